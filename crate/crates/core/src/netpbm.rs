//! Binary PPM (P6) and PGM (P5) rasters with an 8-bit max value.
//!
//! Images are stored as `3×H×W` float tensors in `[0, 1]` and quantized as
//! `round(v·255)`; label maps are stored verbatim (255 = IGNORE).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::oracle::SparseLabelMap;

/// Decoded 8-bit raster, interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format_err(start, format!("{what} out of range")))
    }
}

/// Parses a P5 or P6 file.
pub fn decode(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 2 {
        return Err(format_err(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format_err(
                0,
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let max_at = r.pos;
    let maxval = r.number("max value")?;
    if maxval != 255 {
        return Err(format_err(max_at, format!("max value {maxval} (only 255 is supported)")));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(format_err(r.pos, "expected a single whitespace before the payload")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| format_err(0, "dimensions overflow"))?;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: {} of {need} bytes", payload.len()),
        ));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: payload[..need].to_vec(),
    })
}

/// Serializes a raster as P5 (one channel) or P6 (three channels).
pub fn encode(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    assert!(raster.channels == 1 || raster.channels == 3, "netpbm supports 1 or 3 channels");
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `3×H×W` image tensor to interleaved RGB bytes.
pub fn image_to_rgb(image: &Tensor<f32>) -> Result<Raster> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let hw = h * w;
    let d = image.data();
    let mut data = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            data.push(quantize(d[ch * hw + p]));
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

pub fn rgb_to_image(raster: &Raster) -> Result<Tensor<f32>> {
    if raster.channels != 3 {
        return Err(Error::Shape("expected an RGB raster".into()));
    }
    let hw = raster.width * raster.height;
    let mut data = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = raster.data[3 * p + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, raster.height, raster.width], data)
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    Ok(encode(&image_to_rgb(image)?))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let raster = decode(bytes)?;
    if raster.channels != 3 {
        return Err(format_err(0, "expected a P6 file"));
    }
    rgb_to_image(&raster)
}

pub fn encode_pgm(labels: &SparseLabelMap) -> Vec<u8> {
    encode(&Raster {
        width: labels.width(),
        height: labels.height(),
        channels: 1,
        data: labels.as_slice().to_vec(),
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<SparseLabelMap> {
    let raster = decode(bytes)?;
    if raster.channels != 1 {
        return Err(format_err(0, "expected a P5 file"));
    }
    SparseLabelMap::from_vec(raster.width, raster.height, raster.data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io_path(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io_path(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io_path(path, e))?;
    with_path(path, decode_ppm(&bytes))
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<SparseLabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io_path(path, e))?;
    with_path(path, decode_pgm(&bytes))
}

pub fn write_pgm(path: &Path, labels: &SparseLabelMap) -> Result<()> {
    write_file(path, &encode_pgm(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::IGNORE;
    use proptest::prelude::*;

    #[test]
    fn single_ignore_pixel() {
        let labels = decode_pgm(b"P5 1 1 255\n\xff").unwrap();
        assert_eq!(labels.get(0, 0), IGNORE);
        assert_eq!(labels.annotated_count(), 0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let r = decode(b"P6\n# made by hand\n2 1\n# max\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 3));
        assert_eq!(r.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let cases: &[(&[u8], usize)] = &[
            (b"P3 1 1 255\n", 0),
            (b"P5 x 1 255\n", 3),
            (b"P5 1 1 65535\n", 6),
            (b"P5 1 1 255", 10),
            (b"P6 2 2 255\n\x00\x00", 13),
        ];
        for &(bytes, offset) in cases {
            match decode(bytes) {
                Err(Error::Format { offset: got, .. }) => assert_eq!(got, offset, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("expected a format error, got {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn raster_round_trip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
            let channels = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..w * h * channels).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let raster = Raster { width: w, height: h, channels, data };
            prop_assert_eq!(decode(&encode(&raster)).unwrap(), raster);
        }

        #[test]
        fn image_quantization_round_trip(values in proptest::collection::vec(0u8..=255, 3 * 4 * 5)) {
            let raster = Raster { width: 5, height: 4, channels: 3, data: values };
            let image = rgb_to_image(&raster).unwrap();
            prop_assert_eq!(image_to_rgb(&image).unwrap(), raster);
        }
    }
}
