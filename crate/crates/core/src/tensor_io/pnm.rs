//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::io::Write;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major triplets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(3 * height * width)
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("expected a decimal header field".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header field out of range".into()))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageRgb> {
    if bytes.len() < 2 {
        return Err(Error::Format("file too short for a PNM header".into()));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::Format(format!(
                "bad magic {:?} (expected P6 or P5)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.token()?;
    let height = cur.token()?;
    let maxval = cur.token()?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported (need 255)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Format("missing separator after maxval".into())),
    }
    let raster = &bytes[cur.pos..];
    let expected = width * height * channels;
    if raster.len() != expected {
        return Err(Error::Format(format!(
            "{width}x{height} raster needs {expected} bytes, found {}",
            raster.len()
        )));
    }
    let data = if channels == 3 {
        raster.to_vec()
    } else {
        raster.iter().flat_map(|&g| [g, g, g]).collect()
    };
    ImageRgb::new(height, width, data)
}

pub fn encode_ppm(image: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write_ppm<W: Write>(writer: &mut W, image: &ImageRgb) -> std::io::Result<()> {
    writer.write_all(&encode_ppm(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel() {
        let img = decode_pnm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        assert_eq!((img.height, img.width), (1, 1));
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
    }

    #[test]
    fn grayscale_is_replicated() {
        let img = decode_pnm(b"P5 2 1 255\n\x00\xff").unwrap();
        assert_eq!(img.data, vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn short_raster_is_rejected() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0u8; 9]);
        assert!(matches!(decode_pnm(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn comments_are_skipped() {
        let img = decode_pnm(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.pixel(0, 0), [1, 2, 3]);
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            decode_pnm(b"P3\n1 1\n255\n0 0 0"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn encode_decode_identity() {
        let img = ImageRgb::new(2, 3, (0..18).collect()).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(decode_pnm(&bytes).unwrap(), img);
        assert_eq!(encode_ppm(&decode_pnm(&bytes).unwrap()), bytes);
    }
}
