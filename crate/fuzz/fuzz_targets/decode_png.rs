#![no_main]

use histprune::ingest::decode_png;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        assert_eq!(
            img.data().len(),
            img.width() as usize * img.height() as usize * img.channels() as usize
        );
    }
});
