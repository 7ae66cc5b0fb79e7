//! Grayscale PFM: `Pf\n<w> <h>\n-1.0\n` followed by little-endian `f32`
//! rows from the bottom of the image to the top. Background is stored as 0.

use std::path::Path;

use super::DepthMap;
use crate::error::{Error, Result};

pub fn encode_pfm(map: &DepthMap) -> Vec<u8> {
    let header = format!("Pf\n{} {}\n-1.0\n", map.width, map.height);
    let mut out = Vec::with_capacity(header.len() + 4 * map.data.len());
    out.extend_from_slice(header.as_bytes());
    for y in (0..map.height).rev() {
        for &d in &map.data[y * map.width..(y + 1) * map.width] {
            let v = if d.is_finite() { d as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads one whitespace-delimited header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| std::str::from_utf8(&bytes[start..*pos]).ok()).flatten()
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos).ok_or_else(|| Error::format(path, "header", "empty file"))?;
    match magic {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "header", "color PFM (PF) is not supported, expected grayscale Pf")),
        other => return Err(Error::format(path, "header", format!("bad magic {other:?}"))),
    }
    let mut dim = |what: &str| -> Result<usize> {
        token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| Error::format(path, "header", format!("bad {what}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let scale: f64 = token(bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format(path, "header", "bad scale"))?;
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = 4 * width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(Error::format(
            path,
            "raster",
            format!("expected {need} bytes for {width}x{height}, found {}", raster.len()),
        ));
    }
    let mut data = vec![0.0; width * height];
    for (k, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (k / width, k % width);
        let y = height - 1 - row;
        data[y * width + x] = if v == 0.0 { f64::INFINITY } else { v as f64 };
    }
    Ok(DepthMap { width, height, data })
}

pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    std::fs::write(path, encode_pfm(map))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path)?;
    decode_pfm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (width, height) = (7, 5);
        let data = (0..width * height)
            .map(|_| {
                if rng.random_bool(0.3) {
                    f64::INFINITY
                } else {
                    rng.random_range(100.0f32..2000.0) as f64
                }
            })
            .collect();
        DepthMap { width, height, data }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = random_map(3);
        let bytes = encode_pfm(&m);
        let back = decode_pfm(&bytes, Path::new("m.pfm")).unwrap();
        assert_eq!(back.width, 7);
        for (a, b) in m.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_pfm(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let m = random_map(4);
        let bytes = encode_pfm(&m);
        assert!(bytes.starts_with(b"Pf\n7 5\n-1.0\n"));
        // First stored row is the bottom image row.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let expect = m.data[4 * 7];
        assert_eq!(first as f64, if expect.is_finite() { expect } else { 0.0 });
    }

    #[test]
    fn color_pfm_rejected() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0; 12]);
        let err = decode_pfm(&bytes, Path::new("c.pfm")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn truncated_raster_rejected() {
        let mut bytes = encode_pfm(&random_map(5));
        bytes.pop();
        assert!(decode_pfm(&bytes, Path::new("t.pfm")).is_err());
        assert!(decode_pfm(b"Pf\n0 3\n-1.0\n", Path::new("z.pfm")).is_err());
    }
}
