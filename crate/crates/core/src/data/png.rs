//! 8-bit PNG import and export. Quantization makes this path lossy; it is
//! meant for visualization and for bringing external images in, never for
//! round-tripping tensors.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes a [0, 1] value to a byte.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

/// Encodes a 1×H×W (grayscale) or 3×H×W (RGB) image with values in [0, 1].
/// Each `(keyword, text)` pair becomes a tEXt chunk.
pub fn encode(image: &Tensor, text: &[(&str, &str)]) -> Result<Vec<u8>> {
    let &[c, h, w] = image.dims() else {
        return Err(Error::Contract(format!("expected a C×H×W image, got dims {:?}", image.dims())));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Contract(format!("cannot encode {c} channels as PNG"))),
    };
    let plane = h * w;
    let mut pixels = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            pixels.push(to_u8(image.data()[ch * plane + p]));
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    for (k, t) in text {
        enc.add_text_chunk(k.to_string(), t.to_string()).map_err(png_err)?;
    }
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor, text: &[(&str, &str)]) -> Result<()> {
    let bytes = encode(image, text)?;
    fs::write(path, bytes).map_err(|e| Error::io("writing png", path, e))
}

/// Decodes an 8-bit grayscale, RGB or RGBA PNG into C×H×W values in [0, 1]
/// (alpha is dropped), together with its tEXt chunks.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, Vec<(String, String)>)> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; keep * plane];
    for p in 0..plane {
        for ch in 0..keep {
            data[ch * plane + p] = buf[p * stride + ch] as f32 / 255.0;
        }
    }
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok((Tensor::new(&[keep, h, w], data)?, text))
}

pub fn read(path: &Path) -> Result<(Tensor, Vec<(String, String)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io("reading png", path, e))?;
    decode(&bytes)
}
