//! RGB image conversion, PNG I/O and resampling.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn from_rgb<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::lit(px[c] as f64 / 255.0);
        }
    }
    Tensor::new([3, h, w], data)
}

/// Quantize to 8-bit RGB (values clamped to `[0, 1]`).
pub fn to_rgb<T: Scalar>(t: &Tensor<T>) -> RgbImage {
    let (c, h, w) = t.dims3();
    assert_eq!(c, 3, "expected a 3-channel image");
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = t.data()[(ch * h + y as usize) * w + x as usize].to_f64_lossy();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Map a `[-1, 1]` generator output to `[0, 1]`.
pub fn from_signed<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    t.map(|x| (x + T::one()) * half)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound(format!("image {}", path.display())),
        e => Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    })?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn encode_png<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb(t).write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn save_png<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    crate::checkpoint::write_atomic(path.as_ref(), &encode_png(t))
}

/// Bilinear resampling with half-pixel centres (edge-clamped).
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = t.dims3();
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let mut out = vec![T::zero(); c * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = T::lit(fy - y0 as f64);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = T::lit(fx - x0 as f64);
            for ch in 0..c {
                let at = |y: usize, x: usize| t.data()[(ch * h + y) * w + x];
                let top = at(y0, x0) * (T::one() - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (T::one() - wx) + at(y1, x1) * wx;
                out[(ch * out_h + oy) * out_w + ox] = top * (T::one() - wy) + bottom * wy;
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Box-filter downsampling by an integer factor.
pub fn downsample<T: Scalar>(t: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = t.dims3();
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0, "downsample {h}x{w} by {factor}");
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::lit(1.0 / (factor * factor) as f64);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * oh + y / factor) * ow + x / factor] += t.data()[(ch * h + y) * w + x] * norm;
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}
