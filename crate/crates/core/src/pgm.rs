//! Binary greyscale PGM (`P5`, 8-bit) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Encode values in `[0, 1]` (clamped) as an 8-bit P5 image.
pub fn encode(grid: &Grid<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(
        grid.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Encode after dividing by the maximum, for viewing density maps.
pub fn encode_normalized(grid: &Grid<f64>) -> Vec<u8> {
    let max = grid.max();
    if max > 0.0 {
        let scaled: Vec<f64> = grid.data().iter().map(|v| v / max).collect();
        encode(&Grid::new(grid.height(), grid.width(), scaled).expect("same size"))
    } else {
        encode(&Grid::zeros(grid.height(), grid.width()))
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
        return Err(Error::format("pgm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("pgm", "bad header number"))
}

/// Decode an 8-bit P5 image into values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Grid<f64>> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::format("pgm", "only binary P5 images are supported"));
    }
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("pgm", format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let body = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| Error::format("pgm", "raster shorter than header declares"))?;
    let maxval = maxval as f64;
    Grid::new(height, width, body.iter().map(|b| *b as f64 / maxval).collect())
}

pub fn write(path: &Path, grid: &Grid<f64>) -> Result<()> {
    fs::write(path, encode(grid)).map_err(|e| Error::io(path, e))
}

pub fn write_normalized(path: &Path, grid: &Grid<f64>) -> Result<()> {
    fs::write(path, encode_normalized(grid)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Grid<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
