#![no_main]

use histprune_cli::config::{parse_config, Command, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(map) = parse_config(text) else { return };
    for command in [Command::Partition, Command::Prune, Command::Probe, Command::Cost] {
        let _ = RunConfig::resolve(command, &map);
    }
});
