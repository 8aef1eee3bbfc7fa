//! Minimal binary PGM (P5) / PPM (P6) codec. These are the only image
//! formats the engine reads or writes; anything else must be converted
//! first (e.g. `magick input.png -colorspace gray output.pgm`).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image as row-major [0,1] samples.
#[derive(Debug)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_separators(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => return Ok(()),
                None => {
                    return Err(Error::Format(format!(
                        "pgm: truncated header at offset {}",
                        self.pos
                    )))
                }
            }
        }
    }

    fn token(&mut self) -> Result<usize> {
        self.skip_separators()?;
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(Error::Format(format!(
                "pgm: expected integer at offset {start}"
            )));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("pgm: bad integer at offset {start}")))
    }
}

/// Reads a binary PGM (P5) with maxval up to 65535; samples above 255 use
/// the two-byte big-endian encoding. Values are scaled to [0,1].
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format(format!(
            "pgm: bad magic in {} (want P5)",
            path.display()
        )));
    }
    let mut parser = HeaderParser { bytes: &bytes, pos: 2 };
    let width = parser.token()?;
    let height = parser.token()?;
    let maxval = parser.token()?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("pgm: unsupported maxval {maxval}")));
    }
    // Exactly one separator byte between maxval and the payload.
    let payload_start = parser.pos + 1;
    if parser.bytes.get(parser.pos).map(|b| b.is_ascii_whitespace()) != Some(true) {
        return Err(Error::Format(format!(
            "pgm: missing separator after maxval at offset {}",
            parser.pos
        )));
    }
    let two_byte = maxval > 255;
    let sample_size = if two_byte { 2 } else { 1 };
    let expected = width * height * sample_size;
    let payload = &bytes[payload_start.min(bytes.len())..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "pgm: truncated payload in {} (expected {expected} bytes at offset {payload_start}, found {})",
            path.display(),
            payload.len()
        )));
    }
    let maxval = maxval as f64;
    let mut pixels = Vec::with_capacity(width * height);
    if two_byte {
        for chunk in payload[..expected].chunks_exact(2) {
            let v = u16::from_be_bytes([chunk[0], chunk[1]]);
            pixels.push(v as f64 / maxval);
        }
    } else {
        pixels.extend(payload[..expected].iter().map(|&b| b as f64 / maxval));
    }
    Ok(GrayImage {
        height,
        width,
        pixels,
    })
}

/// Writes an 8-bit binary PGM; inputs are clamped to [0,1].
pub fn write_pgm8(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    write_pgm(path, height, width, pixels, 255)
}

/// Writes a 16-bit binary PGM; inputs are clamped to [0,1].
pub fn write_pgm16(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    write_pgm(path, height, width, pixels, 65535)
}

fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[f64], maxval: u32) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::Dimension(format!(
            "write_pgm: {height}x{width} needs {} samples, got {}",
            height * width,
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(pixels.len() * 2 + 32);
    write!(out, "P5\n{width} {height}\n{maxval}\n").expect("in-memory write");
    for &p in pixels {
        let q = (p.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if maxval > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    fs::write(path, out).map_err(Error::Io)
}

/// Writes a binary PPM (P6) from interleaved 8-bit RGB data.
pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Dimension(format!(
            "write_ppm: {height}x{width} needs {} bytes, got {}",
            height * width * 3,
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(rgb.len() + 32);
    write!(out, "P6\n{width} {height}\n255\n").expect("in-memory write");
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(Error::Io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_tiny_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        fs::write(&path, b"P5\n2 2\n255\n\x00\xff\xff\x00").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.height, img.width), (2, 2));
        assert_eq!(img.pixels, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn sixteen_bit_full_scale_reads_as_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t16.pgm");
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.pixels, vec![1.0]);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# a comment\n1 1\n# another\n255\n\x80").unwrap();
        let img = read_pgm(&path).unwrap();
        assert!((img.pixels[0] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tr.pgm");
        fs::write(&path, b"P5\n2 2\n255\n\x00\x01").unwrap();
        let err = read_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.pgm");
        let pixels: Vec<f64> = (0..=255).map(|v| v as f64 / 255.0).collect();
        write_pgm8(&path, 16, 16, &pixels).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.pixels, pixels);
    }
}
