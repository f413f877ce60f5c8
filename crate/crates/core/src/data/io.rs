//! 8-bit image file I/O.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{io_err, Error, Result};
use crate::metrics::SaliencyMap;

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// RGB image as channel-major floats in `[0, 1]`; returns `(h, w, data)`.
pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Ok((h, w, data))
}

pub fn load_gray(path: &Path) -> Result<SaliencyMap> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    SaliencyMap::new(h, w, values)
}

/// Grayscale mask binarized at 0.5.
pub fn load_mask(path: &Path) -> Result<SaliencyMap> {
    let m = load_gray(path)?;
    let values = m.values().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    SaliencyMap::new(m.height(), m.width(), values)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_gray(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let buf: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::Shape(format!("{} values do not fill {height}x{width}", values.len())))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    save_gray(path, map.height(), map.width(), map.values())
}

/// Saves channel-major `[0, 1]` floats as an RGB PNG.
pub fn save_rgb(path: &Path, height: usize, width: usize, chw: &[f32]) -> Result<()> {
    ensure_parent(path)?;
    let plane = height * width;
    if chw.len() != 3 * plane {
        return Err(Error::Shape(format!("{} values do not fill 3x{height}x{width}", chw.len())));
    }
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push(to_u8(chw[c * plane + i] as f64));
        }
    }
    let img = RgbImage::from_raw(width as u32, height as u32, buf).expect("buffer sized above");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
