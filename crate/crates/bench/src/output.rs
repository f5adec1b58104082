//! File writers: portable graymaps and small CSV helpers.

use std::fs;
use std::path::Path;

use crate::error::CliResult;

/// Linear min-max scaling to `0..=255`; a constant image maps to 0.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary (`P5`) graymap, `width × height`, row-major values.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "graymap size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(to_gray(values));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> CliResult<()> {
    fs::write(path, pgm_bytes(width, height, values))?;
    Ok(())
}

/// Reads back a `P5` graymap written by [`pgm_bytes`].
pub fn parse_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let text_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i)?;
    let header = std::str::from_utf8(&bytes[..text_end]).ok()?;
    let mut it = header.split_ascii_whitespace();
    if it.next()? != "P5" {
        return None;
    }
    let w: usize = it.next()?.parse().ok()?;
    let h: usize = it.next()?.parse().ok()?;
    let body = bytes[text_end + 1..].to_vec();
    (body.len() == w * h).then_some((w, h, body))
}

/// `index,value` lines under a header.
pub fn write_vector_csv(path: &Path, index_name: &str, values: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([index_name, "value"])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
