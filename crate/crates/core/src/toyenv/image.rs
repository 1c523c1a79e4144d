use std::io::Write;

use crate::error::{Error, Result};

/// Grayscale frame with intensities in `[0, 1]`, stored as multiples of
/// `1/255` so that 8-bit PGM persistence is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn from_levels(width: usize, height: usize, levels: &[u8]) -> Result<Self> {
        if levels.len() != width * height {
            return Err(Error::Demo(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                levels.len()
            )));
        }
        Ok(Image { width, height, data: levels.iter().map(|&l| l as f32 / 255.0).collect() })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn levels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// 2×2 average pooling (odd trailing rows/columns are dropped).
    pub fn downsample2(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.get(2 * x, 2 * y)
                    + self.get(2 * x + 1, 2 * y)
                    + self.get(2 * x, 2 * y + 1)
                    + self.get(2 * x + 1, 2 * y + 1);
                data.push(s / 4.0);
            }
        }
        Image { width: w, height: h, data }
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 16);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("writing to a Vec");
        out.extend(self.levels());
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Demo("truncated PGM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        if fields[0] != "P5" {
            return Err(Error::Demo(format!("not a binary PGM (magic {:?})", fields[0])));
        }
        let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::Demo(format!("bad PGM {what}: {s:?}")));
        let (w, h, maxval) = (parse(&fields[1], "width")?, parse(&fields[2], "height")?, parse(&fields[3], "maxval")?);
        if maxval != 255 {
            return Err(Error::Demo(format!("unsupported PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let raster = bytes.get(pos + 1..).unwrap_or(&[]);
        if raster.len() != w * h {
            return Err(Error::Demo(format!("PGM raster has {} bytes, expected {}", raster.len(), w * h)));
        }
        Image::from_levels(w, h, raster)
    }
}
