//! Image decoding and the raw-tensor sidecar format.
//!
//! Binary PGM (P5) and PPM (P6) are parsed here; PNG goes through the
//! `image` crate. Decoded images are 3×H×W with values in `[0, 1]`;
//! single-channel inputs are replicated across the three channels.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// File extensions picked up when indexing a dataset directory.
pub const IMAGE_EXTENSIONS: &[&str] = &["pgm", "ppm", "pnm", "png"];

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

struct PnmHeader {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> std::result::Result<PnmHeader, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("truncated header".into()),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("invalid maxval {maxval}"));
    }
    Ok(PnmHeader {
        channels,
        width,
        height,
        maxval,
        data_offset: pos,
    })
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let h = parse_pnm_header(bytes)?;
    let bps = if h.maxval < 256 { 1 } else { 2 };
    let count = h.width * h.height * h.channels;
    let body = &bytes[h.data_offset..];
    if body.len() < count * bps {
        return Err(format!(
            "truncated pixel data: expected {} bytes, found {}",
            count * bps,
            body.len()
        ));
    }
    let maxval = h.maxval as f32;
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 {
            body[i] as usize
        } else {
            ((body[2 * i] as usize) << 8) | body[2 * i + 1] as usize
        };
        v.min(h.maxval) as f32 / maxval
    };
    let plane = h.width * h.height;
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if h.channels == 1 { p } else { p * 3 + c };
            out[c * plane + p] = sample(src);
        }
    }
    Tensor::new(vec![3, h.height, h.width], out).map_err(|e| e.to_string())
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err("zero image extent".into());
    }
    let plane = w * h;
    let mut out = vec![0f32; 3 * plane];
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        for (p, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px.0[c] as f32 / 255.0;
            }
        }
    } else {
        let luma = img.to_luma8();
        for (p, px) in luma.pixels().enumerate() {
            let v = px.0[0] as f32 / 255.0;
            for c in 0..3 {
                out[c * plane + p] = v;
            }
        }
    }
    Tensor::new(vec![3, h, w], out).map_err(|e| e.to_string())
}

/// Decodes an in-memory PGM/PPM/PNG image to a 3×H×W tensor in `[0, 1]`.
pub fn decode_bytes(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err("unrecognized image format".into())
    }
}

pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

/// Reads only the header and returns `(width, height)`.
pub fn probe_image(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.starts_with(PNG_SIGNATURE) {
        let reader = image::ImageReader::with_format(
            std::io::Cursor::new(&bytes),
            image::ImageFormat::Png,
        );
        let (w, h) = reader.into_dimensions().map_err(|e| decode_err(e.to_string()))?;
        Ok((w as usize, h as usize))
    } else {
        let h = parse_pnm_header(&bytes).map_err(decode_err)?;
        let bps = if h.maxval < 256 { 1 } else { 2 };
        if bytes.len() - h.data_offset < h.width * h.height * h.channels * bps {
            return Err(decode_err("truncated pixel data".into()));
        }
        Ok((h.width, h.height))
    }
}

/// Encodes an 8-bit image as binary PGM (1 channel) or PPM (3 channels).
/// `pixels` is interleaved row-major.
pub fn encode_pnm(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Vec<u8> {
    assert!(channels == 1 || channels == 3, "PNM supports 1 or 3 channels");
    assert_eq!(pixels.len(), width * height * channels);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Raw-tensor sidecar: rank and dims as little-endian u64, then
/// little-endian f32 data.
pub fn encode_raw_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.rank()) + 4 * t.numel());
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw_tensor(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let word = |i: usize| -> std::result::Result<u64, String> {
        bytes
            .get(8 * i..8 * i + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| "truncated raw tensor header".to_string())
    };
    let rank = word(0)? as usize;
    if rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let shape = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[8 * (rank + 1)..];
    if body.len() != 4 * n {
        return Err(format!(
            "raw tensor payload is {} bytes, dims imply {}",
            body.len(),
            4 * n
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_raw_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_raw_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_raw_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_tensor(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_pgm_is_scaled_and_replicated() {
        let bytes = encode_pnm(2, 2, 1, &[0, 255, 128, 64]);
        let t = decode_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        let expected = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for c in 0..3 {
            assert_eq!(&t.data()[c * 4..c * 4 + 4], &expected);
        }
    }

    #[test]
    fn ppm_is_planar_after_decode() {
        let bytes = encode_pnm(2, 1, 3, &[255, 0, 0, 0, 0, 255]);
        let t = decode_bytes(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_zero_image_decodes_to_zeros() {
        let t = decode_bytes(&encode_pnm(3, 3, 1, &[0; 9])).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20]);
        let t = decode_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
    }

    #[test]
    fn truncated_and_garbage_inputs_fail() {
        let bytes = encode_pnm(4, 4, 3, &[7; 48]);
        assert!(decode_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_bytes(&bytes[..5]).is_err());
        assert!(decode_bytes(b"hello").is_err());
        assert!(decode_bytes(b"P5\n0 3\n255\n").is_err());
    }

    #[test]
    fn png_round_trip() {
        let img = image::GrayImage::from_raw(2, 2, vec![0, 255, 128, 64]).unwrap();
        let mut buf = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
            .unwrap();
        let t = decode_bytes(&buf).unwrap();
        assert_eq!(&t.data()[8..12], &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert!(decode_bytes(&buf[..buf.len() / 2]).is_err());
    }

    #[test]
    fn raw_tensor_round_trip_and_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap();
        let bytes = encode_raw_tensor(&t);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(decode_raw_tensor(&bytes).unwrap(), t);
        assert!(decode_raw_tensor(&bytes[..bytes.len() - 2]).is_err());
    }
}
