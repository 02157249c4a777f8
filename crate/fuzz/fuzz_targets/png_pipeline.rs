#![no_main]

use histprune::edge::{classify_patches, sobel};
use histprune::ingest::{build_grid, decode_png, resize, ResizePolicy};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(img) = decode_png(data) else { return };
    let Ok(img) = resize(&img, &ResizePolicy::long_side(112)) else { return };
    let grid = build_grid(&img, 28).expect("resized images align to the patch grid");
    let edges = sobel(&img.to_gray()).expect("sobel accepts any decoded image");
    let labels = classify_patches(&edges, &grid, 50.0, 0.01).expect("grid matches image");
    assert_eq!(labels.labels().len(), grid.len());
});
