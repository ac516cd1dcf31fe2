//! Raw tensor files, PNG import/export and the named-array container used for
//! model weights and agent checkpoints.
//!
//! Raw layout: `b"RLT1"`, then `C`, `H`, `W` as little-endian `u32`, then
//! `C*H*W` little-endian `f32` values in channel-major order.
//!
//! Named-array container: a concatenation of records, each a little-endian
//! `u32` name length, the UTF-8 name, and one raw blob.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::image::{ImageError, ImageTensor};

pub const RAW_MAGIC: &[u8; 4] = b"RLT1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    Image(#[from] ImageError),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("png codec: {0}")]
    Png(String),
    #[error("invalid array name")]
    BadName,
    #[error("array {0:?} not found")]
    MissingArray(String),
}

/// A named float array stored with a `(C, H, W)` shape header. Values are not
/// range checked, so the container can hold network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: (usize, usize, usize),
    pub values: Vec<f32>,
}

impl NamedArray {
    pub fn matrix(name: &str, rows: usize, cols: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        Self {
            name: name.to_string(),
            shape: (1, rows, cols),
            values,
        }
    }

    pub fn vector(name: &str, values: Vec<f32>) -> Self {
        let n = values.len();
        Self::matrix(name, 1, n, values)
    }
}

fn write_blob<W: Write>(w: &mut W, shape: (usize, usize, usize), values: &[f32]) -> io::Result<()> {
    w.write_all(RAW_MAGIC)?;
    for d in [shape.0, shape.1, shape.2] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], FormatError> {
    if buf.len() < n {
        return Err(FormatError::Truncated {
            expected: n,
            found: buf.len(),
        });
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn read_u32(buf: &mut &[u8]) -> Result<u32, FormatError> {
    let b = take(buf, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_blob(buf: &mut &[u8]) -> Result<((usize, usize, usize), Vec<f32>), FormatError> {
    let magic = take(buf, 4)?;
    if magic != RAW_MAGIC {
        return Err(FormatError::BadMagic([
            magic[0], magic[1], magic[2], magic[3],
        ]));
    }
    let c = read_u32(buf)? as usize;
    let h = read_u32(buf)? as usize;
    let w = read_u32(buf)? as usize;
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or(FormatError::Truncated {
            expected: usize::MAX,
            found: buf.len(),
        })?;
    let expected = n.checked_mul(4).unwrap_or(usize::MAX);
    let body = take(buf, expected)?;
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(((c, h, w), values))
}

pub fn encode_raw(image: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * image.len());
    write_blob(&mut out, image.shape(), image.values()).expect("writing to a Vec cannot fail");
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<ImageTensor, FormatError> {
    let mut buf = bytes;
    let ((c, h, w), values) = read_blob(&mut buf)?;
    Ok(ImageTensor::new(c, h, w, values)?)
}

pub fn write_raw(path: impl AsRef<Path>, image: &ImageTensor) -> Result<(), FormatError> {
    fs::write(path, encode_raw(image))?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<ImageTensor, FormatError> {
    decode_raw(&fs::read(path)?)
}

/// Quantizes a unit value to a byte with round-half-up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_png(path: impl AsRef<Path>, image: &ImageTensor) -> Result<(), FormatError> {
    let (c, h, w) = image.shape();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => return Err(FormatError::UnsupportedChannels(other)),
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                bytes.push(quantize(image.get(ch, row, col)));
            }
        }
    }
    image::save_buffer_with_format(
        path,
        &bytes,
        w as u32,
        h as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| FormatError::Png(e.to_string()))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageTensor, FormatError> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => FormatError::Io(io),
        other => FormatError::Png(other.to_string()),
    })?;
    let (channels, width, height, bytes) = match decoded.color() {
        image::ColorType::L8 => {
            let g = decoded.into_luma8();
            (1, g.width(), g.height(), g.into_raw())
        }
        image::ColorType::Rgb8 => {
            let g = decoded.into_rgb8();
            (3, g.width(), g.height(), g.into_raw())
        }
        other => {
            return Err(FormatError::UnsupportedChannels(
                other.channel_count() as usize
            ))
        }
    };
    let (h, w) = (height as usize, width as usize);
    let mut values = vec![0.0f32; channels * h * w];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..channels {
                values[(ch * h + row) * w + col] =
                    bytes[(row * w + col) * channels + ch] as f32 / 255.0;
            }
        }
    }
    Ok(ImageTensor::new(channels, h, w, values)?)
}

/// Reads `.png` files through the PNG codec and everything else as raw tensors.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor, FormatError> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        read_png(path)
    } else {
        read_raw(path)
    }
}

pub fn encode_arrays(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        write_blob(&mut out, a.shape, &a.values).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<NamedArray>, FormatError> {
    let mut buf = bytes;
    let mut out = Vec::new();
    while !buf.is_empty() {
        let len = read_u32(&mut buf)? as usize;
        let name = std::str::from_utf8(take(&mut buf, len)?)
            .map_err(|_| FormatError::BadName)?
            .to_string();
        let (shape, values) = read_blob(&mut buf)?;
        out.push(NamedArray {
            name,
            shape,
            values,
        });
    }
    Ok(out)
}

pub fn write_arrays(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<(), FormatError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_arrays(arrays))?;
    Ok(())
}

pub fn read_arrays(path: impl AsRef<Path>) -> Result<Vec<NamedArray>, FormatError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_arrays(&bytes)
}

pub fn find_array<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray, FormatError> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| FormatError::MissingArray(name.to_string()))
}
