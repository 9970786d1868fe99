//! PNG reading and writing for frames, reference images and masks.

use std::path::Path;

use image::{GrayImage, RgbImage};
use subjvid_core::Tensor;

use crate::error::{HarnessError, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` image with values in `[0, 1]` (clamped).
pub fn write_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    assert!(s.len() == 3 && s[0] == 3, "expected [3, H, W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_byte(d[(c * h + y as usize) * w + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    });
    buf.save(path).map_err(|e| HarnessError::Image(format!("{}: {e}", path.display())))
}

/// Writes a `[H, W]` mask as 0 / 255 grey levels.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let s = mask.shape();
    assert!(s.len() == 2, "expected [H, W], got {s:?}");
    let (h, w) = (s[0], s[1]);
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_byte(mask.data()[y as usize * w + x as usize])]));
    buf.save(path).map_err(|e| HarnessError::Image(format!("{}: {e}", path.display())))
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| HarnessError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}

/// Reads a grey mask, thresholding at half intensity.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| HarnessError::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(&[h, w], |i| {
        if img.get_pixel((i % w) as u32, (i / w) as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Writes every frame of `[J, 3, H, W]` as `frame_000.png`, ...
pub fn write_frames(dir: &Path, frames: &Tensor) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let s = frames.shape();
    for f in 0..s[0] {
        let img = Tensor::new(&s[1..], frames.outer(f).to_vec());
        write_rgb(&dir.join(format!("frame_{f:03}.png")), &img)?;
    }
    Ok(())
}
