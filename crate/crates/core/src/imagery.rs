//! Pixel arrays, PNG I/O and antialiased bilinear resampling.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

/// Height x width x channels, values nominally in [0, 1].
pub type Pixels = Array3<f64>;

/// Loads an 8-bit PNG as RGB reals in [0, 1].
pub fn load_png(path: impl AsRef<Path>) -> Result<Pixels> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Quantizes to 8-bit RGB. Single-channel arrays are written as gray.
pub fn to_rgb8(pixels: ArrayView3<f64>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w, c) = pixels.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let q = |ch: usize| {
            let v = pixels[[y as usize, x as usize, ch.min(c - 1)]];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn save_png(path: impl AsRef<Path>, pixels: ArrayView3<f64>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(pixels).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Resampling weights for one axis: for every output index, the first source
/// index and the normalized triangle-filter taps starting there.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut taps: Vec<f64> = (lo..hi)
                .map(|i| {
                    let d = ((i as f64 + 0.5) - center).abs() / support;
                    (1.0 - d).max(0.0)
                })
                .collect();
            let total: f64 = taps.iter().sum();
            if total > 0.0 {
                taps.iter_mut().for_each(|t| *t /= total);
            } else {
                // Degenerate: pick the nearest source sample.
                let nearest = (center.floor() as usize).min(src - 1);
                return (nearest, vec![1.0]);
            }
            (lo, taps)
        })
        .collect()
}

/// Separable bilinear resize; the kernel widens when downscaling so that
/// every source pixel contributes (antialiasing).
pub fn resize_bilinear(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Pixels {
    let (h, w, c) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let col_taps = axis_taps(w, out_w);
    let mut horiz = Array3::zeros((h, out_w, c));
    for y in 0..h {
        for (x, (start, taps)) in col_taps.iter().enumerate() {
            for (k, t) in taps.iter().enumerate() {
                for ch in 0..c {
                    horiz[[y, x, ch]] += t * src[[y, start + k, ch]];
                }
            }
        }
    }
    let row_taps = axis_taps(h, out_h);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (y, (start, taps)) in row_taps.iter().enumerate() {
        for (k, t) in taps.iter().enumerate() {
            let row = horiz.slice(s![start + k, .., ..]);
            let mut dst = out.slice_mut(s![y, .., ..]);
            dst.scaled_add(*t, &row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let src = Array3::from_elem((37, 23, 3), 0.4);
        for (oh, ow) in [(8, 8), (32, 32), (64, 50)] {
            let out = resize_bilinear(src.view(), oh, ow);
            assert_eq!(out.dim(), (oh, ow, 3));
            assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-12));
        }
    }

    #[test]
    fn downscale_by_two_uses_triangle_taps() {
        let mut src = Array3::zeros((4, 4, 1));
        for y in 0..4 {
            for x in 0..4 {
                src[[y, x, 0]] = (x % 2) as f64;
            }
        }
        // Output column 0 centres at source x = 1.0 with taps at 0.5, 1.5, 2.5
        // weighted 0.75, 0.75, 0.25; column 1 mirrors it.
        let out = resize_bilinear(src.view(), 2, 2);
        for y in 0..2 {
            assert!((out[[y, 0, 0]] - 3.0 / 7.0).abs() < 1e-12);
            assert!((out[[y, 1, 0]] - 4.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut px = Array3::zeros((5, 7, 3));
        px.indexed_iter_mut()
            .for_each(|((y, x, c), v)| *v = ((y * 7 + x) * 3 + c) as f64 / 104.0);
        save_png(&path, px.view()).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.dim(), (5, 7, 3));
        for (a, b) in px.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn missing_png_names_path() {
        let err = load_png("/definitely/not/here.png").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.png"));
    }
}
