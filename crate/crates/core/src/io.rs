//! Binary grid formats and PNG helpers.
//!
//! All integers and floats are little-endian, grids are row-major.
//!
//! * real grid: `h: u32, w: u32` then `h*w` `f32` values
//! * mask: `h: u32, w: u32` then `h` rows of `ceil(w/8)` bytes, MSB first
//! * feature map: `h: u32, w: u32, d: u32, crc32(payload): u32` then `h*w*d` `f32`

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn f32s_to_le_bytes(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn f32s_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect()
}

pub fn encode_real_grid(grid: &Grid<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + grid.len() * 4);
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    f32s_to_le_bytes(grid.data(), &mut out);
    out
}

pub fn decode_real_grid(bytes: &[u8], path: &Path) -> Result<Grid<f32>> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated header"));
    }
    let h = read_u32(bytes, 0) as usize;
    let w = read_u32(bytes, 4) as usize;
    if bytes.len() != 8 + h * w * 4 {
        return Err(Error::format(path, format!("expected {} payload bytes for {h}x{w}", h * w * 4)));
    }
    Grid::from_vec(h, w, f32s_from_le_bytes(&bytes[8..]))
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let (h, w) = mask.shape();
    let row_bytes = w.div_ceil(8);
    let mut out = Vec::with_capacity(8 + h * row_bytes);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if *mask.get(y, x) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated header"));
    }
    let h = read_u32(bytes, 0) as usize;
    let w = read_u32(bytes, 4) as usize;
    let row_bytes = w.div_ceil(8);
    if bytes.len() != 8 + h * row_bytes {
        return Err(Error::format(path, format!("expected {} payload bytes for {h}x{w}", h * row_bytes)));
    }
    let rows = &bytes[8..];
    Ok(Grid::from_fn(h, w, |y, x| rows[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0))
}

pub fn encode_feature_grid(h: usize, w: usize, d: usize, values: &[f32]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(values.len() * 4);
    f32s_to_le_bytes(values, &mut payload);
    let mut out = Vec::with_capacity(16 + payload.len());
    for v in [h as u32, w as u32, d as u32, crc32(&payload)] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out
}

/// Returns `(h, w, d, values)`; verifies the payload checksum.
pub fn decode_feature_grid(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    let h = read_u32(bytes, 0) as usize;
    let w = read_u32(bytes, 4) as usize;
    let d = read_u32(bytes, 8) as usize;
    let payload = &bytes[16..];
    if payload.len() != h * w * d * 4 {
        return Err(Error::format(path, format!("expected {} payload bytes for {h}x{w}x{d}", h * w * d * 4)));
    }
    if crc32(payload) != read_u32(bytes, 12) {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    Ok((h, w, d, f32s_from_le_bytes(payload)))
}

pub fn encode_rgb_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width(), image.height());
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(image.as_raw())?;
    }
    Ok(out)
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8())
}

pub fn read_rgb_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn write_rgb_png(image: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, encode_rgb_png(image)?)?;
    Ok(())
}

/// Pascal VOC colour map: bit-interleaved index colours, 256 entries.
pub fn voc_palette() -> Vec<[u8; 3]> {
    (0..256u32)
        .map(|i| {
            let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
            let mut c = i;
            for j in 0..8 {
                r |= ((c & 1) as u8) << (7 - j);
                g |= (((c >> 1) & 1) as u8) << (7 - j);
                b |= (((c >> 2) & 1) as u8) << (7 - j);
                c >>= 3;
            }
            [r, g, b]
        })
        .collect()
}

/// Single-channel indexed PNG with the VOC palette.
pub fn write_label_png(labels: &Grid<u16>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len());
    for &l in labels.data() {
        let v = u8::try_from(l)
            .map_err(|_| Error::format(path, format!("label {l} does not fit an 8-bit palette image")))?;
        bytes.push(v);
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.width() as u32, labels.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(voc_palette().concat());
    let mut writer = enc.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Reads an index mask. Indexed PNGs yield raw palette indices; 8-bit
/// greyscale PNGs yield their values.
pub fn read_label_png(path: &Path) -> Result<Grid<u16>> {
    let mut decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "label masks must be 8-bit"));
    }
    let channels = match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => 1,
        other => return Err(Error::format(path, format!("unsupported label colour type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..h)
        .flat_map(|y| {
            let row = &buf[y * info.line_size..];
            (0..w).map(move |x| row[x * channels] as u16)
        })
        .collect();
    Grid::from_vec(h, w, data)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
