//! Binary PPM (P6, 8-bit) images and 16-bit PGM (P5) heatmaps.

use super::{DataError, Result, RgbImage};
use crate::cam::Heatmap;

pub fn write_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

/// Samples are `round(65535 * clamp(h, 0, 1))`, big-endian.
pub fn write_pgm16(heatmap: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", heatmap.width(), heatmap.height()).into_bytes();
    for &v in heatmap.values() {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    payload_at: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DataError::Header(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut at = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(at) {
                Some(b'#') => {
                    while bytes.get(at).is_some_and(|&b| b != b'\n') {
                        at += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => at += 1,
                _ => break,
            }
        }
        let start = at;
        while bytes.get(at).is_some_and(u8::is_ascii_digit) {
            at += 1;
        }
        let name = ["width", "height", "maxval"][k];
        let text = std::str::from_utf8(&bytes[start..at]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| DataError::Header(format!("missing or invalid {name} at byte {start}")))?;
    }
    match bytes.get(at) {
        Some(b) if b.is_ascii_whitespace() => at += 1,
        _ => return Err(DataError::Header("no whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(DataError::Header(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(DataError::Header(format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        payload_at: at,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, samples: usize) -> Result<&'a [u8]> {
    let bps = if h.maxval > 255 { 2 } else { 1 };
    let expected = samples * bps;
    let actual = bytes.len() - h.payload_at;
    if actual < expected {
        return Err(DataError::Truncated { expected, actual });
    }
    Ok(&bytes[h.payload_at..h.payload_at + expected])
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    if h.maxval != 255 {
        return Err(DataError::Header(format!("only 8-bit PPM supported, maxval {}", h.maxval)));
    }
    let data = payload(bytes, &h, h.width * h.height * 3)?;
    RgbImage::new(h.width, h.height, data.to_vec())
}

/// Reads a P5 map; values are divided by maxval (8- or 16-bit samples).
pub fn read_pgm16(bytes: &[u8]) -> Result<Heatmap> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, h.width * h.height)?;
    let max = h.maxval as f64;
    let values: Vec<f32> = if h.maxval > 255 {
        data.chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f64 / max) as f32)
            .collect()
    } else {
        data.iter().map(|&b| (b as f64 / max) as f32).collect()
    };
    if values.iter().any(|&v| v > 1.0) {
        return Err(DataError::Invalid("sample exceeds maxval".into()));
    }
    Heatmap::new(h.height, h.width, values).map_err(|e| DataError::Invalid(e.to_string()))
}
