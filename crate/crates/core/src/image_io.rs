//! PNG export of colour and mask images, PFM for depth.
//!
//! PFM stores rows bottom-to-top as little-endian `f32`; a negative scale in
//! the header marks little-endian data. Invalid depth is written as NaN.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::plane::{DepthMap, Mask, Plane, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("pfm: {0}")]
    Pfm(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<(), ImageError> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| ImageError::Png(e.to_string()))?;
    w.write_image_data(data)
        .map_err(|e| ImageError::Png(e.to_string()))?;
    w.finish().map_err(|e| ImageError::Png(e.to_string()))
}

pub fn save_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let data: Vec<u8> = img
        .as_slice()
        .iter()
        .flat_map(|p| p.map(quantize))
        .collect();
    write_png(
        path.as_ref(),
        img.width(),
        img.height(),
        png::ColorType::Rgb,
        &data,
    )
}

/// 8-bit grayscale of values in [0, 1].
pub fn save_gray_png(img: &Plane<f64>, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let data: Vec<u8> = img.as_slice().iter().map(|&v| quantize(v)).collect();
    write_png(
        path.as_ref(),
        img.width(),
        img.height(),
        png::ColorType::Grayscale,
        &data,
    )
}

pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    save_gray_png(&mask.map(|&m| if m { 1.0 } else { 0.0 }), path)
}

/// Decodes an 8- or 16-bit grayscale, RGB or RGBA PNG into linear [0, 1]
/// RGB. Alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, ImageError> {
    let err = |e: png::DecodingError| ImageError::Png(e.to_string());
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ImageError::Png("unexpanded palette".into())),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let px = |x: usize, y: usize| {
        let at = y * stride + x * channels;
        let v = |c: usize| data[at + c] as f64 / 255.0;
        if channels < 3 {
            [v(0); 3]
        } else {
            [v(0), v(1), v(2)]
        }
    };
    Ok(Plane::from_fn(w, h, px))
}

pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage, ImageError> {
    decode_png(&std::fs::read(path)?)
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*depth.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

/// Reads the next whitespace-delimited header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, ImageError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || start > 64 {
        return Err(ImageError::Pfm("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| ImageError::Pfm("header is not ASCII".into()))
}

/// Decodes a single-channel PFM. Both byte orders are accepted.
pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap, ImageError> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != "Pf" {
        return Err(ImageError::Pfm("expected single-channel 'Pf' magic".into()));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageError::Pfm(format!("bad dimension '{s}'")))
    };
    let w = dim(token(bytes, &mut pos)?)?;
    let h = dim(token(bytes, &mut pos)?)?;
    let scale: f64 = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| ImageError::Pfm("bad scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(ImageError::Pfm("scale must be finite and non-zero".into()));
    }
    // Exactly one whitespace byte separates header and data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Pfm("missing data separator".into()));
    }
    pos += 1;
    let n = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| ImageError::Pfm("dimensions overflow".into()))?;
    let data = &bytes[pos..];
    if data.len() != n {
        return Err(ImageError::Pfm(format!(
            "expected {n} data bytes, found {}",
            data.len()
        )));
    }
    let little = scale < 0.0;
    let value = |i: usize| {
        let b: [u8; 4] = data[4 * i..4 * i + 4].try_into().expect("4-byte chunk");
        (if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }) as f64
    };
    Ok(Plane::from_fn(w, h, |x, y| value((h - 1 - y) * w + x)))
}

pub fn save_pfm(depth: &DepthMap, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_pfm(depth))?;
    f.flush()?;
    Ok(())
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<DepthMap, ImageError> {
    decode_pfm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_preserves_f32_and_nan() {
        let d = Plane::from_fn(5, 3, |x, y| {
            if x == 2 && y == 1 {
                f64::NAN
            } else {
                0.5 + x as f64 * 1.25 + y as f64
            }
        });
        let back = decode_pfm(&encode_pfm(&d)).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                let (a, b) = (*d.get(x, y), *back.get(x, y));
                assert!(a.is_nan() && b.is_nan() || a == b, "{a} {b}");
            }
        }
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let d = Plane::from_fn(1, 2, |_, y| y as f64);
        let bytes = encode_pfm(&d);
        let header = b"Pf\n1 2\n-1.0\n".len();
        assert_eq!(&bytes[header..header + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn pfm_big_endian_accepted() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&3.0f32.to_be_bytes());
        bytes.extend_from_slice(&4.0f32.to_be_bytes());
        let d = decode_pfm(&bytes).unwrap();
        assert_eq!((*d.get(0, 0), *d.get(1, 0)), (3.0, 4.0));
    }

    #[test]
    fn pfm_rejects_bad_input() {
        assert!(decode_pfm(b"PF\n1 1\n-1\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n99999999999 99999999999\n-1\n").is_err());
        assert!(decode_pfm(b"").is_err());
    }

    #[test]
    fn png_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let img = Plane::from_fn(4, 3, |x, y| [x as f64 / 3.0, y as f64 / 2.0, 0.5]);
        save_rgb_png(&img, dir.path().join("a.png")).unwrap();
        save_mask_png(
            &Plane::from_fn(4, 3, |x, _| x % 2 == 0),
            dir.path().join("m.png"),
        )
        .unwrap();
        let bytes = std::fs::read(dir.path().join("a.png")).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Plane::from_fn(5, 4, |x, y| [x as f64 / 4.0, y as f64 / 3.0, 0.25]);
        save_rgb_png(&img, dir.path().join("a.png")).unwrap();
        let back = load_rgb_png(dir.path().join("a.png")).unwrap();
        assert_eq!((back.width(), back.height()), (5, 4));
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        save_mask_png(
            &Plane::from_fn(3, 2, |x, _| x == 1),
            dir.path().join("m.png"),
        )
        .unwrap();
        let m = load_rgb_png(dir.path().join("m.png")).unwrap();
        assert_eq!(*m.get(1, 0), [1.0; 3]);
        assert!(decode_png(b"not a png").is_err());
    }
}
