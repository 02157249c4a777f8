#![no_main]

use histprune_cli::Report;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = Report::from_json(text) {
        let again = Report::from_json(&report.to_json()).expect("serialized reports parse");
        assert_eq!(again.command, report.command);
    }
});
