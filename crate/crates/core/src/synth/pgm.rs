//! Binary 8-bit PGM (P5) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

/// `round(v · 255)` after clamping to `[0, 1]`.
pub fn quantize(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn dequantize(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

pub fn encode_pgm(bytes: &[u8], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn write_pgm(path: &Path, pixels: &[f64], side: usize) -> Result<()> {
    write_pgm_bytes(path, &quantize(pixels), side)
}

pub fn write_pgm_bytes(path: &Path, bytes: &[u8], side: usize) -> Result<()> {
    if bytes.len() != side * side {
        return Err(Error::dim("write_pgm", &[bytes.len()], &[side * side]));
    }
    std::fs::write(path, encode_pgm(bytes, side)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path, side: usize) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&raw, side, path)
}

struct Cursor<'a> {
    raw: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.raw.len() {
            match self.raw[self.pos] {
                b'#' => {
                    while self.pos < self.raw.len() && self.raw[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> &[u8] {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.raw.len() && !self.raw[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        &self.raw[start..self.pos]
    }
}

/// Parses a P5 image that must be `side × side` with maxval 255.
pub fn parse_pgm(raw: &[u8], side: usize, path: &Path) -> Result<Vec<u8>> {
    let err = |field, detail: String| Error::Parse {
        path: path.to_path_buf(),
        field,
        detail,
    };
    let mut cur = Cursor { raw, pos: 0 };
    let magic = cur.token();
    if magic != b"P5" {
        return Err(err(
            "magic",
            format!("unsupported magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut number = |field: &'static str| -> Result<usize> {
        let tok = cur.token();
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(field, format!("expected an integer, found {:?}", String::from_utf8_lossy(tok))))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width != side {
        return Err(err("width", format!("expected {side}, found {width}")));
    }
    if height != side {
        return Err(err("height", format!("expected {side}, found {height}")));
    }
    if maxval != 255 {
        return Err(err("maxval", format!("expected 255, found {maxval}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if cur.pos >= raw.len() || !raw[cur.pos].is_ascii_whitespace() {
        return Err(err("payload", format!("expected {} bytes, found 0", side * side)));
    }
    let payload = &raw[cur.pos + 1..];
    if payload.len() != side * side {
        return Err(err(
            "payload",
            format!("expected {} bytes, found {}", side * side, payload.len()),
        ));
    }
    Ok(payload.to_vec())
}
