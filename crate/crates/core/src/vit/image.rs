use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// RGB image with channel-last `f64` pixels, usually in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Image(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self { height, width, data })
    }

    /// Raw 8-bit RGB bytes, scaled to `[0, 1]`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let data = (0..height * width * 3).map(|_| rng.uniform(0.0, 1.0)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_ppm(&fs::read(path)?)
    }

    /// Parses binary (`P6`) or plain (`P3`) portable pixmaps with
    /// `maxval ≤ 255`.
    pub fn parse_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let binary = match magic.as_str() {
            "P6" => true,
            "P3" => false,
            other => return Err(Error::Image(format!("unsupported pixmap magic {other:?}"))),
        };
        let width = parse_num(&next_token(bytes, &mut pos)?)?;
        let height = parse_num(&next_token(bytes, &mut pos)?)?;
        let maxval = parse_num(&next_token(bytes, &mut pos)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Image(format!("unsupported maxval {maxval}")));
        }
        let count = width * height * 3;
        let raw: Vec<usize> = if binary {
            // exactly one whitespace byte separates the header from the raster
            pos += 1;
            let body = bytes.get(pos..pos + count).ok_or_else(|| {
                Error::Image(format!("pixmap raster truncated: need {count} bytes"))
            })?;
            body.iter().map(|&b| b as usize).collect()
        } else {
            (0..count)
                .map(|_| next_token(bytes, &mut pos).and_then(|t| parse_num(&t)))
                .collect::<Result<_>>()?
        };
        if raw.iter().any(|&v| v > maxval) {
            return Err(Error::Image("sample exceeds maxval".into()));
        }
        let scale = maxval as f64;
        Self::new(height, width, raw.into_iter().map(|v| v as f64 / scale).collect())
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("unexpected end of pixmap header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_num(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Image(format!("expected a number, found {tok:?}")))
}
