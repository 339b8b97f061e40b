//! The fixed base augmentation: random resized crop plus horizontal flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseAugmentConfig {
    /// Side of the square output views.
    pub resolution: usize,
    /// Range of the crop area as a fraction of the image area.
    pub scale: (f64, f64),
    pub flip_prob: f64,
}

impl Default for BaseAugmentConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            scale: (0.2, 1.0),
            flip_prob: 0.5,
        }
    }
}

impl BaseAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if self.resolution == 0 || !(0.0 < lo && lo <= hi && hi <= 1.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("invalid base augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// Bilinear resize of one `[C, H, W]` image (half-pixel centres, edge clamp).
/// Resizing to the same size is exact.
pub fn resize_bilinear<F: Element>(img: &[F], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    if (h, w) == (oh, ow) {
        return img.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, F)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, F::c(src - i0 as f64))
            })
            .collect()
    };
    let (ys, xs) = (axis(h, oh), axis(w, ow));
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
                let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

fn crop<F: Element>(img: &[F], c: usize, h: usize, w: usize, y: usize, x: usize, ch: usize, cw: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(c * ch * cw);
    for p in 0..c {
        for row in y..y + ch {
            let start = p * h * w + row * w + x;
            out.extend_from_slice(&img[start..start + cw]);
        }
    }
    out
}

/// One random view of a `[C, H, W]` image at `config.resolution`.
pub fn random_view<F: Element, R: Rng + ?Sized>(
    img: &[F],
    c: usize,
    h: usize,
    w: usize,
    rng: &mut R,
    config: &BaseAugmentConfig,
) -> Vec<F> {
    let res = config.resolution;
    let (img, h, w) = if h < res || w < res {
        let (nh, nw) = (h.max(res), w.max(res));
        (resize_bilinear(img, c, h, w, nh, nw), nh, nw)
    } else {
        (img.to_vec(), h, w)
    };
    let (lo, hi) = config.scale;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let ch = ((h as f64 * s.sqrt()).round() as usize).clamp(1, h);
    let cw = ((w as f64 * s.sqrt()).round() as usize).clamp(1, w);
    let y = rng.random_range(0..=h - ch);
    let x = rng.random_range(0..=w - cw);
    let flip = rng.random::<f64>() < config.flip_prob;
    let mut view = resize_bilinear(&crop(&img, c, h, w, y, x, ch, cw), c, ch, cw, res, res);
    if flip {
        for row in view.chunks_mut(res) {
            row.reverse();
        }
    }
    view
}

/// One base view per image of an NCHW batch.
pub fn base_view<F: Element, R: Rng + ?Sized>(
    images: &Tensor<F>,
    rng: &mut R,
    config: &BaseAugmentConfig,
) -> Result<Tensor<F>> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape("base_view", images.shape(), &[0, 3, 0, 0]));
    };
    let res = config.resolution;
    let mut out = Vec::with_capacity(n * c * res * res);
    for img in images.data().chunks(c * h * w) {
        out.extend(random_view(img, c, h, w, rng, config));
    }
    Tensor::new(&[n, c, res, res], out)
}

/// Two independent base views of every image, drawn image by image
/// (first view, then second).
pub fn base_augment<F: Element, R: Rng + ?Sized>(
    images: &Tensor<F>,
    rng: &mut R,
    config: &BaseAugmentConfig,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape("base_augment", images.shape(), &[0, 3, 0, 0]));
    };
    let res = config.resolution;
    let mut v1 = Vec::with_capacity(n * c * res * res);
    let mut v2 = Vec::with_capacity(n * c * res * res);
    for img in images.data().chunks(c * h * w) {
        v1.extend(random_view(img, c, h, w, rng, config));
        v2.extend(random_view(img, c, h, w, rng, config));
    }
    Ok((Tensor::new(&[n, c, res, res], v1)?, Tensor::new(&[n, c, res, res], v2)?))
}
