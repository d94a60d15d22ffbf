//! Superpixel segmentation of 8-bit images and a color-coded overlay.
//!
//! Pixel features are RGB scaled by [`COLOR_WEIGHT`] plus the row and column
//! measured in initial cell sizes, scaled by [`POS_WEIGHT`]. Images whose
//! extents do not tile the grid are reflect-padded and the labels cropped.

use crate::error::{invalid, Result};
use crate::metrics::ImageU8;
use crate::tensor::index::reflect_pad_map;
use crate::Tensor;

use super::{grid_shape, sample, SuperpixelGrid};

pub const COLOR_WEIGHT: f64 = 10.0;
pub const POS_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    /// Superpixel index per pixel, row-major.
    pub labels: Vec<u32>,
    pub grid: SuperpixelGrid,
}

pub fn segment(img: &ImageU8, m: usize, iters: usize) -> Result<Segmentation> {
    if m == 0 || iters == 0 {
        return Err(invalid("superpixels", "need m >= 1 and at least one iteration"));
    }
    let (h, w) = (img.height, img.width);
    let (gh, gw) = grid_shape(m);
    let (ph, pw) = (h.div_ceil(gh) * gh, w.div_ceil(gw) * gw);
    if ph - h >= h.max(1) || pw - w >= w.max(1) {
        return Err(invalid("superpixels", format!("{h}x{w} image is too small for {m} superpixels")));
    }
    let rgb = img.to_tensor::<f64>();
    let pad = reflect_pad_map(rgb.shape(), ph - h, pw - w)?;
    let rgb = rgb.gather(&pad.indices, &pad.shape);
    let grid = SuperpixelGrid::new(ph, pw, gh, gw)?;
    let (ch, cw) = (grid.cell_h() as f64, grid.cell_w() as f64);
    let plane = ph * pw;
    let x = Tensor::from_fn(&[ph, pw, 5], |i| {
        let (p, k) = (i / 5, i % 5);
        match k {
            0..=2 => rgb.data()[k * plane + p] * COLOR_WEIGHT,
            3 => (p / pw) as f64 / ch * POS_WEIGHT,
            _ => (p % pw) as f64 / cw * POS_WEIGHT,
        }
    });
    let d = sample(&x, m, iters)?;
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        labels.extend_from_slice(&d.mask[y * pw..y * pw + w]);
    }
    Ok(Segmentation {
        height: h,
        width: w,
        labels,
        grid,
    })
}

/// Distinct, deterministic color per label (golden-angle hue walk).
pub fn label_color(label: u32) -> [u8; 3] {
    let hue = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let f = hue.fract();
    let (hi, lo) = (230.0, 60.0);
    let up = lo + (hi - lo) * f;
    let down = hi - (hi - lo) * f;
    let c = match hue as u32 {
        0 => [hi, up, lo],
        1 => [down, hi, lo],
        2 => [lo, hi, up],
        3 => [lo, down, hi],
        4 => [up, lo, hi],
        _ => [hi, lo, down],
    };
    c.map(|v| v.round() as u8)
}

/// Half image, half label color; pixels whose right or lower neighbor
/// belongs to another superpixel are drawn white.
pub fn render(img: &ImageU8, seg: &Segmentation) -> Result<ImageU8> {
    if (img.height, img.width) != (seg.height, seg.width) {
        return Err(invalid("superpixels", "segmentation does not match the image"));
    }
    let (h, w) = (img.height, img.width);
    let at = |y: usize, x: usize| seg.labels[y * w + x];
    Ok(ImageU8::from_fn(h, w, |y, x, c| {
        let l = at(y, x);
        let edge = (x + 1 < w && at(y, x + 1) != l) || (y + 1 < h && at(y + 1, x) != l);
        if edge {
            255
        } else {
            ((img.pixel(y, x)[c] as u16 + label_color(l)[c] as u16) / 2) as u8
        }
    }))
}
