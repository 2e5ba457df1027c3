use std::path::Path;

use image::{DynamicImage, RgbImage};
use ratenet_autograd::Tensor;

use crate::error::{Error, Result};

/// Maps an 8-bit RGB image to a `3 x H x W` tensor in `[-1, 1]`.
pub fn normalize_image(raw: &DynamicImage) -> Result<Tensor<f32>> {
    let channels = raw.color().channel_count();
    if channels != 3 || raw.color().bytes_per_pixel() != 3 {
        return Err(Error::Invalid(format!(
            "expected an 8-bit 3-channel image, got {:?} ({channels} channels)",
            raw.color()
        )));
    }
    let rgb = raw.to_rgb8();
    Ok(normalize_rgb(&rgb))
}

pub fn normalize_rgb(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = byte_to_unit(px.0[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("shape matches")
}

pub fn byte_to_unit(b: u8) -> f32 {
    2.0 * b as f32 / 255.0 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`normalize_image`]; values outside `[-1, 1]` are clamped.
pub fn denormalize_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::Invalid(format!("expected a 3 x H x W image tensor, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Invalid(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([unit_to_byte(d[i]), unit_to_byte(d[h * w + i]), unit_to_byte(d[2 * h * w + i])])
    }))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    normalize_image(&img)
}

/// PNG bytes of an RGB image; the encoder is deterministic for equal pixels.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}
