//! MRC2014 image stacks (mode 2, little-endian float32).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const HEADER_LEN: usize = 1024;

/// Square images with their pixel size in Angstrom.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub images: Vec<Image>,
    pub pixel_size: f64,
}

impl ImageStack {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.images.first().map_or(0, Image::size)
    }
}

fn put_i32(buf: &mut [u8], offset: usize, v: i32) {
    buf[offset..offset + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], offset: usize, v: f32) {
    buf[offset..offset + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i32(buf: &[u8], offset: usize) -> i32 {
    i32::from_le_bytes(buf[offset..offset + 4].try_into().expect("4 bytes"))
}

fn get_f32(buf: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(buf[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Serializes a stack; pixel values are rounded to float32.
pub fn encode_mrc_stack(images: &[Image], pixel_size: f64) -> Result<Vec<u8>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot write an empty stack"))?;
    let size = first.size();
    for img in images {
        img.check_size(size)?;
    }
    if !(pixel_size > 0.0 && pixel_size.is_finite()) {
        return Err(Error::invalid(format!("pixel size {pixel_size} must be > 0")));
    }
    let nz = images.len();
    let mut buf = vec![0u8; HEADER_LEN + 4 * size * size * nz];
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    let mut sum = 0.0f64;
    let mut sum2 = 0.0f64;
    let mut offset = HEADER_LEN;
    for img in images {
        for &v in img.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite("MRC pixel data".into()));
            }
            min = min.min(f);
            max = max.max(f);
            sum += f as f64;
            sum2 += (f as f64) * (f as f64);
            buf[offset..offset + 4].copy_from_slice(&f.to_le_bytes());
            offset += 4;
        }
    }
    let count = (size * size * nz) as f64;
    let mean = sum / count;
    let rms = (sum2 / count - mean * mean).max(0.0).sqrt();
    let dims = [size as i32, size as i32, nz as i32];
    for (i, &d) in dims.iter().enumerate() {
        put_i32(&mut buf, 4 * i, d);
        put_i32(&mut buf, 28 + 4 * i, d);
        put_f32(&mut buf, 40 + 4 * i, (d as f64 * pixel_size) as f32);
        put_f32(&mut buf, 52 + 4 * i, 90.0);
        put_i32(&mut buf, 64 + 4 * i, i as i32 + 1);
    }
    put_i32(&mut buf, 12, 2);
    put_f32(&mut buf, 76, min);
    put_f32(&mut buf, 80, max);
    put_f32(&mut buf, 84, mean as f32);
    put_i32(&mut buf, 108, 20140);
    buf[208..212].copy_from_slice(b"MAP ");
    buf[212..216].copy_from_slice(&[0x44, 0x44, 0x00, 0x00]);
    put_f32(&mut buf, 216, rms as f32);
    Ok(buf)
}

/// Parses a mode-2 stack of square frames; extended headers are skipped.
pub fn decode_mrc_stack(bytes: &[u8]) -> Result<ImageStack> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[208..212].try_into().expect("4 bytes");
    if &magic != b"MAP " {
        return Err(Error::BadMagic(magic));
    }
    let mode = get_i32(bytes, 12);
    if mode != 2 {
        return Err(Error::UnsupportedMode(mode));
    }
    let (nx, ny, nz) = (get_i32(bytes, 0), get_i32(bytes, 4), get_i32(bytes, 8));
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(Error::invalid(format!("MRC dimensions {nx} x {ny} x {nz}")));
    }
    if nx != ny {
        return Err(Error::invalid(format!("frames must be square, got {nx} x {ny}")));
    }
    let nsymbt = get_i32(bytes, 92);
    if nsymbt < 0 {
        return Err(Error::invalid(format!("negative extended header length {nsymbt}")));
    }
    let size = nx as usize;
    let start = HEADER_LEN + nsymbt as usize;
    let expected = (start + 4 * size * size * nz as usize) as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mx = get_i32(bytes, 28);
    let cella = get_f32(bytes, 40) as f64;
    let pixel_size = if mx > 0 && cella > 0.0 {
        cella / mx as f64
    } else {
        1.0
    };
    let frame = 4 * size * size;
    let images = (0..nz as usize)
        .map(|z| {
            let base = start + z * frame;
            let data = (0..size * size)
                .map(|i| get_f32(bytes, base + 4 * i) as f64)
                .collect();
            Image::from_vec(size, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageStack { images, pixel_size })
}

pub fn write_mrc_stack(images: &[Image], pixel_size: f64, path: &Path) -> Result<()> {
    let bytes = encode_mrc_stack(images, pixel_size)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mrc_stack(path: &Path) -> Result<ImageStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mrc_stack(&bytes)
}
