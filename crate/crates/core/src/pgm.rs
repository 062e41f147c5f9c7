//! Portable graymap I/O: reads P2 and P5 (maxval ≤ 255), writes P2.

use std::path::Path;

use crate::error::{GbpError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples in `0..=maxval`.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        let m = f64::from(self.maxval);
        self.pixels.iter().map(|p| f64::from(*p) / m).collect()
    }

    /// Quantize `[0, 1]` intensities (clamped) at maxval 255.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(GbpError::Pgm(format!(
                "{} values for a {width}×{height} image",
                values.len()
            )));
        }
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self {
            width,
            height,
            maxval: 255,
            pixels,
        })
    }

    /// Plain (P2) encoding, 16 samples per line.
    pub fn to_p2(&self) -> String {
        let mut out = format!("P2\n{} {}\n{}\n", self.width, self.height, self.maxval);
        for row in self.pixels.chunks(self.width.max(1)) {
            for line in row.chunks(16) {
                let strs: Vec<String> = line.iter().map(u8::to_string).collect();
                out.push_str(&strs.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next_token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(GbpError::Pgm("unexpected end of file".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| GbpError::Pgm("non-ASCII header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.next_token()?;
        t.parse().map_err(|_| GbpError::Pgm(format!("expected a number, found `{t}`")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut tok = Tokens { bytes, pos: 0 };
    let magic = tok.next_token()?;
    let binary = match magic {
        "P2" => false,
        "P5" => true,
        other => return Err(GbpError::Pgm(format!("unsupported magic `{other}`"))),
    };
    let width = tok.number()?;
    let height = tok.number()?;
    let maxval = tok.number()?;
    if width == 0 || height == 0 {
        return Err(GbpError::Pgm("empty image".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(GbpError::Pgm(format!("maxval {maxval} not in 1..=255")));
    }
    let n = width * height;
    let pixels = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = tok.pos + 1;
        let raster = bytes
            .get(start..start + n)
            .ok_or_else(|| GbpError::Pgm("truncated raster".into()))?;
        raster.to_vec()
    } else {
        (0..n)
            .map(|_| {
                let v = tok.number()?;
                if v > maxval {
                    return Err(GbpError::Pgm(format!("sample {v} exceeds maxval {maxval}")));
                }
                Ok(v as u8)
            })
            .collect::<Result<_>>()?
    };
    if pixels.iter().any(|p| usize::from(*p) > maxval) {
        return Err(GbpError::Pgm("sample exceeds maxval".into()));
    }
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn write_p2(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, image.to_p2())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p2_round_trip() {
        let img = GrayImage::from_unit(3, 2, &[0.0, 0.5, 1.0, 0.25, 0.75, 2.0]).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255, 64, 191, 255]);
        let back = parse_pgm(img.to_p2().as_bytes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn p5_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 10, 200, 255]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 10, 200, 255]);
        assert!((img.to_unit()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_pgm(b"P6\n1 1\n255\n").is_err());
        assert!(parse_pgm(b"P2\n2 1\n255\n1").is_err());
        assert!(parse_pgm(b"P2\n1 1\n65535\n1").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(parse_pgm(b"P2\n1 1\n10\n11").is_err());
    }
}
