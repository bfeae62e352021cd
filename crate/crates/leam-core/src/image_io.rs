//! Image ingestion: 8-bit RGB PNG or the raw planar binary format
//! (u32 height, u32 width little-endian, then R, G, B planes), both landing
//! in a `[3, H, W]` tensor normalized by `x / 127.5 - 1`.

use std::io::Read;
use std::path::Path;

use crate::desknet::normalize_pixel;
use crate::tensor::Tensor;
use crate::{Error, Result};

const PNG_MAGIC: [u8; 4] = [0x89, b'P', b'N', b'G'];

/// Load an image file into a normalized `[3, H, W]` tensor. The format is
/// sniffed from the file header, not the extension.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() >= 4 && bytes[..4] == PNG_MAGIC {
        let img = image::load_from_memory(&bytes)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw(); // interleaved RGB
        let mut tensor = Tensor::zeros(vec![3, h, w]);
        for ch in 0..3 {
            let plane = &mut tensor.data_mut()[ch * h * w..(ch + 1) * h * w];
            for (i, v) in plane.iter_mut().enumerate() {
                *v = normalize_pixel(raw[i * 3 + ch]);
            }
        }
        Ok(tensor)
    } else {
        load_raw_planar(&bytes)
    }
}

fn load_raw_planar(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Format("raw image shorter than its header".into()));
    }
    let h = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let w = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if h == 0 || w == 0 {
        return Err(Error::Format("raw image with zero dimension".into()));
    }
    let expected = 8 + 3 * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "raw image payload is {} bytes, header wants {expected}",
            bytes.len()
        )));
    }
    let data = bytes[8..].iter().map(|&b| normalize_pixel(b)).collect();
    Tensor::new(vec![3, h, w], data)
}

/// Write the raw planar format.
pub fn save_raw_planar(path: &Path, height: usize, width: usize, planes: &[u8]) -> Result<()> {
    if planes.len() != 3 * height * width {
        return Err(Error::Format(format!(
            "raw payload is {} bytes for {height}x{width}",
            planes.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + planes.len());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(planes);
    std::fs::write(path, out)?;
    Ok(())
}

/// Write an RGB PNG from per-channel byte planes.
pub fn save_png_rgb(
    path: &Path,
    height: usize,
    width: usize,
    planes: &[u8],
) -> Result<()> {
    if planes.len() != 3 * height * width {
        return Err(Error::Format(format!(
            "png payload is {} bytes for {height}x{width}",
            planes.len()
        )));
    }
    let plane = height * width;
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for (i, pixel) in img.pixels_mut().enumerate() {
        *pixel = image::Rgb([planes[i], planes[plane + i], planes[2 * plane + i]]);
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn png_and_raw_agree() {
        let dir = tempdir().unwrap();
        let (h, w) = (5, 4);
        let planes: Vec<u8> = (0..3 * h * w).map(|i| (i * 11 % 256) as u8).collect();

        let png = dir.path().join("img.png");
        save_png_rgb(&png, h, w, &planes).unwrap();
        let raw = dir.path().join("img.raw");
        save_raw_planar(&raw, h, w, &planes).unwrap();

        let from_png = load_image(&png).unwrap();
        let from_raw = load_image(&raw).unwrap();
        assert_eq!(from_png.shape(), &[3, h, w]);
        assert_eq!(from_png, from_raw);
        assert!(from_png.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.raw");
        std::fs::write(&path, [4u8, 0, 0, 0, 4, 0, 0, 0, 1, 2, 3]).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format(_))));
    }
}
