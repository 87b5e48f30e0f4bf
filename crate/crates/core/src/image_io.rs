//! PNG frame and map I/O.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, IoContext, Result};
use crate::tensor::{Shape, Tensor};

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

/// 8-bit RGB PNG as a `1×3×H×W` tensor in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let s = frame.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!("expected a 1×3×H×W frame, got {s}")));
    }
    let img = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| quantize8(frame.at(0, c, y as usize, x as usize))))
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Single-channel map stored as 16-bit grey, value `round(m · 65535)`.
pub fn write_map16(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::invalid(format!("expected a 1×1×H×W map, got {s}")));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        Luma([(map.at(0, 0, y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_map16(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| img.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0))
}

pub fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Zero-padded file name used for every stored frame.
pub fn frame_name(index: usize) -> String {
    format!("{index:08}.png")
}
