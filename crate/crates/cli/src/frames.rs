//! Frame export: per-frame PNGs, an animated GIF and an M-mode strip.

use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};
use image::codecs::gif::{GifEncoder, Repeat};
use image::imageops::FilterType;
use image::{Delay, Frame, GrayImage, Luma, RgbaImage};
use lvfm_core::pipeline::to_image;
use lvfm_core::seqcond::PaddedVideo;

const FRAME_DELAY_MS: u32 = 100;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn magnify(img: &GrayImage, scale: u32) -> GrayImage {
    if scale <= 1 {
        return img.clone();
    }
    image::imageops::resize(img, img.width() * scale, img.height() * scale, FilterType::Nearest)
}

/// Writes `frame_XX.png` for every valid frame, `video.gif` and `mmode.png`
/// (the middle row traced over time, time running left to right). Returns
/// the number of frames written.
pub fn write_video(video: &PaddedVideo, dir: &Path, scale: u32) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (_, h, w) = video.frame_dims();
    let valid: Vec<usize> = video.valid_indices().collect();
    let mut images = Vec::with_capacity(valid.len());
    for (n, &k) in valid.iter().enumerate() {
        let frame = to_image(&video.frames().outer(k)?);
        // first channel only; toy videos are grayscale
        let px = &frame.data()[..h * w];
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(px[y as usize * w + x as usize])]));
        let path = dir.join(format!("frame_{n:02}.png"));
        magnify(&img, scale).save(&path).with_context(|| format!("writing {}", path.display()))?;
        images.push(img);
    }

    let gif_path = dir.join("video.gif");
    let file = File::create(&gif_path).with_context(|| format!("writing {}", gif_path.display()))?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)?;
    for img in &images {
        let big = magnify(img, scale);
        let rgba = RgbaImage::from_fn(big.width(), big.height(), |x, y| {
            let v = big.get_pixel(x, y)[0];
            image::Rgba([v, v, v, 255])
        });
        enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(FRAME_DELAY_MS, 1)))?;
    }
    drop(enc);

    let row = h / 2;
    let mmode = GrayImage::from_fn(images.len() as u32, w as u32, |t, x| *images[t as usize].get_pixel(x, row as u32));
    let path = dir.join("mmode.png");
    magnify(&mmode, scale).save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(images.len())
}
