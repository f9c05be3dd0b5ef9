//! Minimal binary portable-graymap (P5) and portable-pixmap (P6) I/O for
//! kernel-map and prediction-montage exports.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, payload: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{}\n{} {}\n255\n", magic, width, height)?;
    out.write_all(payload)?;
    out.flush()?;
    Ok(())
}

/// Write 8-bit grayscale pixels (row-major) as binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "pgm payload {} does not match {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    write_pnm(path, "P5", width, height, pixels)
}

/// Write interleaved 8-bit RGB pixels (row-major) as binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "ppm payload {} does not match {}x{}x3",
            rgb.len(),
            width,
            height
        )));
    }
    write_pnm(path, "P6", width, height, rgb)
}

/// Decoded PNM image: `channels` is 1 for P5, 3 for P6.
pub struct PnmImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Parse a binary PGM/PPM produced by this module (maxval 255, no comments).
pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;

    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("pnm header ended early".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            Error::Format("pnm header is not ascii".into())
        })?);
    }
    pos += 1; // single whitespace byte after maxval

    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported pnm magic '{}'", other))),
    };
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad pnm header field '{}'", s)))
    };
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported pnm maxval {}", maxval)));
    }
    let expected = width * height * channels;
    if bytes.len() < pos + expected {
        return Err(Error::Truncated(format!(
            "pnm payload has {} bytes, expected {}",
            bytes.len().saturating_sub(pos),
            expected
        )));
    }
    Ok(PnmImage {
        channels,
        width,
        height,
        pixels: bytes[pos..pos + expected].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pgm_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let pixels: Vec<u8> = (0..12).map(|i| i * 20).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.channels, img.width, img.height), (1, 4, 3));
        assert_eq!(img.pixels, pixels);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let rgb: Vec<u8> = (0..2 * 2 * 3).map(|i| 255 - i as u8).collect();
        write_ppm(&path, 2, 2, &rgb).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.channels, img.width, img.height), (3, 2, 2));
        assert_eq!(img.pixels, rgb);
    }

    #[test]
    fn payload_size_is_validated() {
        let dir = tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("b.pgm"), 3, 3, &[0; 8]).is_err());
    }
}
