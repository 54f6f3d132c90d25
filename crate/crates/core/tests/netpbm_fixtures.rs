//! Files written by Pillow (see `fixtures/make_fixtures.py`) must read back
//! pixel for pixel.

use std::path::Path;

use adaseg_core::netpbm::{decode, encode, read_pgm, read_ppm};
use adaseg_core::IGNORE;

const W: usize = 7;
const H: usize = 5;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rgb(x: usize, y: usize) -> [u8; 3] {
    [
        ((x * 37 + y * 11) % 256) as u8,
        ((x * 5 + y * 53 + 7) % 256) as u8,
        ((255 - x as i64 * 29 - y as i64 * 3).rem_euclid(256)) as u8,
    ]
}

fn label(x: usize, y: usize) -> u8 {
    if (x + y) % 4 == 3 {
        255
    } else {
        ((x * 3 + y) % 5) as u8
    }
}

#[test]
fn pillow_ppm_reads_identically() {
    let image = read_ppm(&fixture("pillow_7x5.ppm")).unwrap();
    assert_eq!(image.shape(), &[3, H, W]);
    for y in 0..H {
        for x in 0..W {
            for (c, &v) in rgb(x, y).iter().enumerate() {
                assert_eq!(image.data()[c * H * W + y * W + x], v as f32 / 255.0, "({x}, {y}) channel {c}");
            }
        }
    }
}

#[test]
fn pillow_pgm_reads_identically() {
    let labels = read_pgm(&fixture("pillow_7x5.pgm")).unwrap();
    assert_eq!((labels.width(), labels.height()), (W, H));
    for y in 0..H {
        for x in 0..W {
            assert_eq!(labels.get(x, y), label(x, y), "({x}, {y})");
        }
    }
    assert_eq!(labels.get(3, 0), IGNORE);
}

#[test]
fn reencoding_reproduces_the_pillow_bytes() {
    for name in ["pillow_7x5.ppm", "pillow_7x5.pgm"] {
        let bytes = std::fs::read(fixture(name)).unwrap();
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes, "{name}");
    }
}
