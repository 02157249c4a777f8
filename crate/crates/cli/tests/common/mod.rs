#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use histprune::ingest::{save_png, RawImage};
use histprune_cli::{execute, CliError, Command, Report, RunConfig};

pub const P: u32 = 28;

pub fn rect_image(w: u32, h: u32, r: (u32, u32, u32, u32)) -> RawImage {
    let (x0, y0, x1, y1) = r;
    RawImage::from_fn_gray(w, h, |x, y| {
        if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
            0
        } else {
            255
        }
    })
    .unwrap()
}

pub fn write_rect(dir: &Path, name: &str, r: (u32, u32, u32, u32)) {
    save_png(&rect_image(224, 224, r), &dir.join(name)).unwrap();
}

pub fn write_flat(dir: &Path, name: &str, v: u8) {
    save_png(&RawImage::filled_gray(224, 224, v).unwrap(), &dir.join(name)).unwrap();
}

/// Patch indices crossed by a rectangle outline on a grid `cols` wide.
pub fn outline(cols: u32, r: (u32, u32, u32, u32)) -> BTreeSet<usize> {
    let (x0, y0, x1, y1) = r;
    let mut set = BTreeSet::new();
    for row in y0 / P..=y1 / P {
        for col in x0 / P..=x1 / P {
            if row == y0 / P || row == y1 / P || col == x0 / P || col == x1 / P {
                set.insert((row * cols + col) as usize);
            }
        }
    }
    set
}

/// Rectangles whose edges stay at least 5 px from any patch border.
pub const RECTS: [(u32, u32, u32, u32); 6] = [
    (38, 40, 150, 120),
    (10, 10, 200, 210),
    (70, 95, 80, 100),
    (120, 8, 190, 48),
    (40, 150, 100, 215),
    (150, 130, 215, 180),
];

pub fn settings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn config(command: Command, out: &Path, pairs: &[(&str, &str)]) -> Result<RunConfig, CliError> {
    let mut map = settings(&[("resize", "long_side:224"), ("out", &out.display().to_string())]);
    map.extend(settings(pairs));
    RunConfig::resolve(command, &map)
}

pub fn run(command: Command, out: &Path, pairs: &[(&str, &str)]) -> Result<Report, CliError> {
    execute(&config(command, out, pairs)?)
}
