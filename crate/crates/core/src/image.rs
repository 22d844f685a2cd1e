//! RGB reference images, bounding boxes and PNG encoding.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Resolution, SoftMask};

/// 8-bit interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "rgb image {width}x{height} given {} bytes",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Axis-aligned box with inclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub xmin: usize,
    pub ymin: usize,
    pub xmax: usize,
    pub ymax: usize,
}

impl BBox {
    pub fn new(xmin: usize, ymin: usize, xmax: usize, ymax: usize) -> Result<Self> {
        if xmin > xmax || ymin > ymax {
            return Err(Error::DimensionMismatch(format!(
                "degenerate box ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn area(&self) -> usize {
        (self.xmax - self.xmin + 1) * (self.ymax - self.ymin + 1)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.xmin <= self.xmax && self.ymin <= self.ymax && self.xmax < width && self.ymax < height
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix0 = self.xmin.max(other.xmin);
        let iy0 = self.ymin.max(other.ymin);
        let ix1 = self.xmax.min(other.xmax);
        let iy1 = self.ymax.min(other.ymax);
        if ix0 > ix1 || iy0 > iy1 {
            return 0.0;
        }
        let inter = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

impl From<[usize; 4]> for BBox {
    fn from(v: [usize; 4]) -> Self {
        BBox {
            xmin: v[0],
            ymin: v[1],
            xmax: v[2],
            ymax: v[3],
        }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let text = serde_json::to_string(boxes).map_err(|e| Error::Json(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let boxes: Vec<BBox> = serde_json::from_str(&text)
        .map_err(|e| Error::Json(format!("{}: {e}", path.display())))?;
    if let Some(b) = boxes.iter().find(|b| b.xmin > b.xmax || b.ymin > b.ymax) {
        return Err(Error::Json(format!(
            "{}: box {:?} has min > max",
            path.display(),
            <[usize; 4]>::from(*b)
        )));
    }
    Ok(boxes)
}

/// Decoded 8-bit PNG.
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
    pub text: Vec<(String, String)>,
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<DecodedPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, 0, format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, 0, "png too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, 0, format!("png: {e}")))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::format(path, 0, "unexpanded palette image"));
        }
    };
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
        text,
    })
}

pub fn read_png(path: &Path) -> Result<DecodedPng> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
    text: &[(&str, &str)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string())
                .map_err(|e| Error::Json(format!("png text chunk: {e}")))?;
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Json(format!("png encode: {e}")))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Json(format!("png encode: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Json(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_rgb_png(path: &Path, image: &RgbImage, text: &[(&str, &str)]) -> Result<()> {
    let bytes = encode_png(image.width, image.height, png::ColorType::Rgb, &image.data, text)?;
    write_file(path, &bytes)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let png = read_png(path)?;
    let data = match png.channels {
        3 => png.data,
        4 => png.data.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        1 => png.data.iter().flat_map(|&g| [g, g, g]).collect(),
        2 => png.data.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        _ => unreachable!(),
    };
    RgbImage::new(png.width, png.height, data)
}

pub fn write_gray_png(
    path: &Path,
    width: usize,
    height: usize,
    data: &[u8],
    text: &[(&str, &str)],
) -> Result<()> {
    let bytes = encode_png(width, height, png::ColorType::Grayscale, data, text)?;
    write_file(path, &bytes)
}

/// Reads a PNG as a single luminance channel (the first channel for colour input).
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let png = read_png(path)?;
    let data = if png.channels == 1 {
        png.data
    } else {
        png.data.chunks_exact(png.channels).map(|c| c[0]).collect()
    };
    Ok((png.width, png.height, data))
}

/// Binary masks are stored as 0/255 grayscale; any value >= 128 reads as foreground.
pub fn write_mask_png(path: &Path, mask: &BinaryMask, text: &[(&str, &str)]) -> Result<()> {
    let data: Vec<u8> = mask.values.iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_gray_png(path, mask.cols, mask.rows, &data, text)
}

pub fn read_mask_png(path: &Path, resolution: Resolution) -> Result<BinaryMask> {
    let (w, h, data) = read_gray_png(path)?;
    BinaryMask::new(resolution, h, w, data.iter().map(|&v| v >= 128).collect())
}

pub fn write_soft_png(path: &Path, mask: &SoftMask, text: &[(&str, &str)]) -> Result<()> {
    write_gray_png(path, mask.cols, mask.rows, &mask.to_u8(), text)
}

/// Class-index maps: 8-bit grayscale or palette PNGs, read as raw indices.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(Cursor::new(&bytes[..]));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, 0, format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, 0, "png too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, 0, format!("png: {e}")))?;
    let ok_type = matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed);
    if !ok_type || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            0,
            format!("label map must be 8-bit grayscale or palette, got {:?}", info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let data = buf.chunks(stride).take(h).flat_map(|row| row[..w].to_vec()).collect();
    Ok((w, h, data))
}

pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    write_gray_png(path, width, height, labels, &[])
}

/// Blend a pixel-resolution mask over an image (foreground tinted red).
pub fn overlay(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    if mask.rows != image.height || mask.cols != image.width {
        return Err(Error::DimensionMismatch(format!(
            "overlay mask {}x{} vs image {}x{}",
            mask.cols, mask.rows, image.width, image.height
        )));
    }
    let mut out = image.clone();
    for (i, &fg) in mask.values.iter().enumerate() {
        if fg {
            let px = &mut out.data[i * 3..i * 3 + 3];
            px[0] = ((px[0] as u16 + 255) / 2) as u8;
            px[1] /= 2;
            px[2] /= 2;
        }
    }
    Ok(out)
}
