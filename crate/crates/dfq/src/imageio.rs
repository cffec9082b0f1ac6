//! Plain-text PGM (P2) and PPM (P3) files.
//!
//! ASCII formats chosen so test fixtures diff bit-exactly without any
//! image dependency.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale, P2.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), w * h);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in pixels.chunks(w) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text.split_whitespace();
    let magic = tokens.next().unwrap_or("");
    if magic != "P2" {
        return Err(Error::invalid("read_pgm", format!("bad magic `{magic}`")));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::invalid("read_pgm", format!("missing {what}")))
    };
    let w = next_usize("width")?;
    let h = next_usize("height")?;
    let maxval = next_usize("maxval")?;
    if maxval != 255 {
        return Err(Error::invalid("read_pgm", format!("unsupported maxval {maxval}")));
    }
    let mut pixels = Vec::with_capacity(w * h);
    for t in tokens {
        let v: u16 = t
            .parse()
            .map_err(|_| Error::invalid("read_pgm", format!("bad pixel `{t}`")))?;
        pixels.push(v.min(255) as u8);
    }
    if pixels.len() != w * h {
        return Err(Error::invalid(
            "read_pgm",
            format!("expected {} pixels, got {}", w * h, pixels.len()),
        ));
    }
    Ok((w, h, pixels))
}

/// 8-bit RGB, P3, interleaved pixel data.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * w * h);
    let mut out = format!("P3\n{w} {h}\n255\n");
    for row in rgb.chunks(3 * w) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Map a CHW float image in [−1, 1] to interleaved RGB bytes.
pub fn chw_to_rgb8(data: &[f32], h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    assert_eq!(data.len(), 3 * plane);
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = ((data[c * plane + i] + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let pixels: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
    }

    #[test]
    fn pgm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, "P5\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
