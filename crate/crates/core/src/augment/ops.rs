//! The ten photometric operations of the search space.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Luma weights (ITU-R BT.601).
const LUMA_R: f64 = 0.299;
const LUMA_B: f64 = 0.114;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AugOpKind {
    Identical,
    Brightness,
    Contrast,
    Hue,
    Saturation,
    Solarize,
    GaussianBlur,
    Posterize,
    Gray,
    Sharpness,
}

/// Number of operations in the search space.
pub const NUM_OPS: usize = 10;

impl AugOpKind {
    pub const ALL: [AugOpKind; NUM_OPS] = [
        AugOpKind::Identical,
        AugOpKind::Brightness,
        AugOpKind::Contrast,
        AugOpKind::Hue,
        AugOpKind::Saturation,
        AugOpKind::Solarize,
        AugOpKind::GaussianBlur,
        AugOpKind::Posterize,
        AugOpKind::Gray,
        AugOpKind::Sharpness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AugOpKind::Identical => "Identical",
            AugOpKind::Brightness => "Brightness",
            AugOpKind::Contrast => "Contrast",
            AugOpKind::Hue => "Hue",
            AugOpKind::Saturation => "Saturation",
            AugOpKind::Solarize => "Solarize",
            AugOpKind::GaussianBlur => "GaussianBlur",
            AugOpKind::Posterize => "Posterize",
            AugOpKind::Gray => "Gray",
            AugOpKind::Sharpness => "Sharpness",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn magnitude_spec(self) -> MagnitudeSpec {
        let (low, high, parameter_count) = match self {
            AugOpKind::Identical | AugOpKind::Gray => (0.0, 0.0, 0),
            AugOpKind::Brightness
            | AugOpKind::Contrast
            | AugOpKind::Solarize
            | AugOpKind::Sharpness => (0.0, 1.0, 1),
            AugOpKind::Hue => (-PI, PI, 1),
            AugOpKind::Saturation => (0.0, 2.0, 1),
            AugOpKind::Posterize => (0.0, 8.0, 1),
            AugOpKind::GaussianBlur => (0.0, f64::INFINITY, 1),
        };
        MagnitudeSpec {
            kind: self,
            low,
            high,
            parameter_count,
        }
    }
}

impl fmt::Display for AugOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Magnitude range of one operation, in the operation's native units
/// (radians for Hue, bits for Posterize, sigma for GaussianBlur).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnitudeSpec {
    pub kind: AugOpKind,
    pub low: f64,
    pub high: f64,
    pub parameter_count: usize,
}

impl MagnitudeSpec {
    pub fn has_magnitude(&self) -> bool {
        self.parameter_count > 0
    }

    pub fn contains(&self, v: f64) -> bool {
        if !self.has_magnitude() {
            return true;
        }
        // absorbs rounding in low + (high - low) * sigmoid(raw)
        let slack = if self.high.is_finite() {
            1e-6 * (self.high - self.low)
        } else {
            0.0
        };
        v.is_finite() && v >= self.low - slack && v <= self.high + slack
    }

    pub fn check(&self, v: f64) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::MagnitudeOutOfRange {
                kind: self.kind.name(),
                value: v,
                low: self.low,
                high: self.high,
            })
        }
    }
}

/// Tunables of the operation implementations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Side of the square Gaussian kernel (odd).
    pub blur_kernel_size: usize,
    /// Blur sigma is `softplus(raw) * blur_sigma_scale` during search.
    pub blur_sigma_scale: f64,
    /// Sigma range used when a blur magnitude is drawn at random.
    pub random_blur_sigma: (f64, f64),
    /// Slope of the sigmoid surrogate of the Solarize threshold step.
    pub solarize_surrogate_slope: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur_kernel_size: 9,
            blur_sigma_scale: 2.0,
            random_blur_sigma: (0.0, 2.0),
            solarize_surrogate_slope: 10.0,
        }
    }
}

fn check_image<F: Element>(image: &Tensor<F>) -> Result<usize> {
    match image.shape() {
        [_, c @ (1 | 3), _, _] => Ok(*c),
        s => Err(Error::shape("apply_aug", s, &[0, 3, 0, 0])),
    }
}

/// Applies `kind` with `magnitude` (a one-element tensor, ignored by
/// Identical and Gray) to an NCHW batch in `[0, 1]`. Differentiable with
/// respect to both image and magnitude; output is clamped to `[0, 1]`.
pub fn apply_aug<F: Element>(
    image: &Tensor<F>,
    kind: AugOpKind,
    magnitude: &Tensor<F>,
    config: &AugmentConfig,
) -> Result<Tensor<F>> {
    let channels = check_image(image)?;
    let spec = kind.magnitude_spec();
    if spec.has_magnitude() {
        if magnitude.numel() != 1 {
            return Err(Error::shape("apply_aug magnitude", magnitude.shape(), &[]));
        }
        spec.check(magnitude.item()?.f64())?;
    }
    let m = || magnitude.reshape(&[]);
    let out = match kind {
        AugOpKind::Identical => return Ok(image.clone()),
        AugOpKind::Brightness => {
            // x + m (1 - x): m = 0 leaves the input untouched, m = 1 is white
            image.add(&image.affine(-F::one(), F::one()).mul(&m()?)?)?
        }
        AugOpKind::Contrast => {
            let mean = grayscale(image)?.mean_axes(&[1, 2, 3], true)?;
            let w = m()?.affine(-F::one(), F::one());
            image.add(&mean.sub(image)?.mul(&w)?)?
        }
        AugOpKind::Hue if channels == 3 => hue_shift(image, &m()?)?,
        AugOpKind::Saturation if channels == 3 => {
            let w = m()?.affine(-F::one(), F::one());
            image.add(&grayscale(image)?.sub(image)?.mul(&w)?)?
        }
        AugOpKind::Gray if channels == 3 => {
            grayscale(image)?.add(&Tensor::zeros(&[1, 3, 1, 1]))?
        }
        AugOpKind::Hue | AugOpKind::Saturation | AugOpKind::Gray => return Ok(image.clone()),
        AugOpKind::Solarize => solarize(image, &m()?, config)?,
        AugOpKind::Posterize => posterize(image, &m()?)?,
        AugOpKind::GaussianBlur => image.filter2d(&gaussian_kernel(&m()?, config.blur_kernel_size)?)?,
        AugOpKind::Sharpness => {
            let k: Vec<F> = [1., 1., 1., 1., 5., 1., 1., 1., 1.]
                .iter()
                .map(|&v| F::c(v / 13.0))
                .collect();
            let smooth = image.filter2d(&Tensor::new(&[3, 3], k)?)?;
            image.add(&image.sub(&smooth)?.mul(&m()?)?)?
        }
    };
    Ok(out.clamp(F::zero(), F::one()))
}

/// Convenience wrapper taking a plain magnitude value.
pub fn apply_aug_value<F: Element>(
    image: &Tensor<F>,
    kind: AugOpKind,
    magnitude: f64,
    config: &AugmentConfig,
) -> Result<Tensor<F>> {
    apply_aug(image, kind, &Tensor::scalar(F::c(magnitude)), config)
}

/// Luma of an `[N, 3, H, W]` batch as `[N, 1, H, W]`, written as
/// `g + wr (r - g) + wb (b - g)` so that gray pixels map to themselves exactly.
pub fn grayscale<F: Element>(image: &Tensor<F>) -> Result<Tensor<F>> {
    let &[n, c, h, w] = image.shape() else {
        return Err(Error::shape("grayscale", image.shape(), &[0, 3, 0, 0]));
    };
    if c == 1 {
        return Ok(image.clone());
    }
    if c != 3 {
        return Err(Error::shape("grayscale", image.shape(), &[n, 3, h, w]));
    }
    let (wr, wb) = (F::c(LUMA_R), F::c(LUMA_B));
    let wg = F::one() - wr - wb;
    let plane = h * w;
    let x = image.data();
    let mut out = Vec::with_capacity(n * plane);
    for img in 0..n {
        let base = img * 3 * plane;
        for p in 0..plane {
            let (r, g, b) = (x[base + p], x[base + plane + p], x[base + 2 * plane + p]);
            out.push(g + wr * (r - g) + wb * (b - g));
        }
    }
    Tensor::from_op(
        "grayscale",
        vec![n, 1, h, w],
        Arc::new(out),
        &[image],
        move |g, _| {
            let mut gx = vec![F::zero(); n * 3 * plane];
            for img in 0..n {
                for p in 0..plane {
                    let v = g[img * plane + p];
                    let base = img * 3 * plane;
                    gx[base + p] = v * wr;
                    gx[base + plane + p] = v * wg;
                    gx[base + 2 * plane + p] = v * wb;
                }
            }
            vec![Some(gx)]
        },
    )
}

/// HSV value-domain function that turns a hue position into a channel weight.
#[inline]
fn hue_ramp<F: Element>(k: F) -> (F, F) {
    let four = F::c(4.0);
    let v = k.min(four - k).max(F::zero()).min(F::one());
    let dv = if k > F::zero() && k < F::one() {
        F::one()
    } else if k > F::c(3.0) && k < four {
        -F::one()
    } else {
        F::zero()
    };
    (v, dv)
}

/// Cyclic shift of the HSV hue channel by `theta` radians; saturation and
/// value are untouched so the result stays in gamut.
fn hue_shift<F: Element>(image: &Tensor<F>, theta: &Tensor<F>) -> Result<Tensor<F>> {
    let &[n, _, h, w] = image.shape() else {
        unreachable!("checked by apply_aug")
    };
    let plane = h * w;
    let six = F::c(6.0);
    let per_rad = F::c(3.0 / PI);
    let shift = theta.item()? * per_rad;
    let x = Arc::new(image.to_vec());
    let mut out = vec![F::zero(); x.len()];
    // per pixel: output channel values and their Jacobians
    let mut jac = vec![[[F::zero(); 3]; 3]; n * plane];
    let mut dtheta = vec![[F::zero(); 3]; n * plane];
    for img in 0..n {
        let base = img * 3 * plane;
        for p in 0..plane {
            let rgb = [x[base + p], x[base + plane + p], x[base + 2 * plane + p]];
            let (values, j, dt) = hue_pixel(rgb, shift, six, per_rad);
            for c in 0..3 {
                out[base + c * plane + p] = values[c];
            }
            jac[img * plane + p] = j;
            dtheta[img * plane + p] = dt;
        }
    }
    Tensor::from_op(
        "hue_shift",
        image.shape().to_vec(),
        Arc::new(out),
        &[image, theta],
        move |g, needs| {
            let mut gx = vec![F::zero(); g.len()];
            let mut gt = F::zero();
            for img in 0..n {
                let base = img * 3 * plane;
                for p in 0..plane {
                    let (j, dt) = (&jac[img * plane + p], &dtheta[img * plane + p]);
                    for c in 0..3 {
                        let go = g[base + c * plane + p];
                        gt += go * dt[c];
                        for (src, &d) in j[c].iter().enumerate() {
                            gx[base + src * plane + p] += go * d;
                        }
                    }
                }
            }
            vec![needs[0].then_some(gx), needs[1].then(|| vec![gt])]
        },
    )
}

fn wrap<F: Element>(x: F, period: F) -> F {
    let r = x - period * (x / period).floor();
    if r >= period { r - period } else { r }
}

type HuePixel<F> = ([F; 3], [[F; 3]; 3], [F; 3]);

fn hue_pixel<F: Element>(rgb: [F; 3], shift: F, six: F, per_rad: F) -> HuePixel<F> {
    let mut imax = 0;
    let mut imin = 0;
    for c in 1..3 {
        if rgb[c] > rgb[imax] {
            imax = c;
        }
        if rgb[c] < rgb[imin] {
            imin = c;
        }
    }
    let (vmax, vmin) = (rgb[imax], rgb[imin]);
    let chroma = vmax - vmin;
    let mut d_max = [F::zero(); 3];
    let mut d_min = [F::zero(); 3];
    d_max[imax] = F::one();
    d_min[imin] = F::one();
    let d_chroma: [F; 3] = std::array::from_fn(|j| d_max[j] - d_min[j]);

    let (h6, dh6) = if chroma > F::zero() {
        let (num, dnum, off) = match imax {
            0 => (rgb[1] - rgb[2], [0.0, 1.0, -1.0], 0.0),
            1 => (rgb[2] - rgb[0], [-1.0, 0.0, 1.0], 2.0),
            _ => (rgb[0] - rgb[1], [1.0, -1.0, 0.0], 4.0),
        };
        let h6 = num / chroma + F::c(off);
        let dh6: [F; 3] =
            std::array::from_fn(|j| F::c(dnum[j]) / chroma - num / (chroma * chroma) * d_chroma[j]);
        (h6, dh6)
    } else {
        (F::zero(), [F::zero(); 3])
    };
    let hue = wrap(h6 + shift, six);
    let offsets = [5.0, 3.0, 1.0];
    let mut values = [F::zero(); 3];
    let mut jac = [[F::zero(); 3]; 3];
    let mut dtheta = [F::zero(); 3];
    for c in 0..3 {
        let k = wrap(F::c(offsets[c]) + hue, six);
        let (ramp, dramp) = hue_ramp(k);
        values[c] = if shift == F::zero() { rgb[c] } else { vmax - chroma * ramp };
        for j in 0..3 {
            jac[c][j] = d_max[j] - d_chroma[j] * ramp - chroma * dramp * dh6[j];
        }
        dtheta[c] = -chroma * dramp * per_rad;
    }
    (values, jac, dtheta)
}

/// Inverts pixels strictly above the threshold. The threshold receives the
/// gradient of a sigmoid relaxation of the step.
fn solarize<F: Element>(image: &Tensor<F>, threshold: &Tensor<F>, config: &AugmentConfig) -> Result<Tensor<F>> {
    let t = threshold.item()?;
    let slope = F::c(config.solarize_surrogate_slope);
    let fixed = image.detach();
    let step = fixed.map_detached(|v| if v > t { F::one() } else { F::zero() });
    let relaxed = fixed.sub(threshold)?.scale(slope).sigmoid();
    let mask = relaxed.with_value(&step)?;
    image.add(&mask.mul(&image.affine(F::c(-2.0), F::one()))?)
}

/// Keeps the top `round(bits)` bits of each 8-bit pixel. Gradient: identity
/// for the image, and for the bit count the derivative of the mean
/// quantisation loss `x - 2^-bits / 2`.
fn posterize<F: Element>(image: &Tensor<F>, bits: &Tensor<F>) -> Result<Tensor<F>> {
    let b = bits.item()?.f64().round().clamp(0.0, 8.0) as u32;
    let step = 1u32 << (8 - b);
    let scale = F::c(255.0);
    let value = image.map_detached(|x| {
        let v = (x * scale).round().max(F::zero()).min(scale).to_u32().unwrap_or(0);
        F::c(f64::from((v / step) * step)) / scale
    });
    let level = bits.scale(F::c(-std::f64::consts::LN_2)).exp().scale(F::c(0.5));
    image.sub(&level)?.with_value(&value)
}

/// Normalised 2-D Gaussian kernel of side `size` for a (differentiable) sigma.
pub fn gaussian_kernel<F: Element>(sigma: &Tensor<F>, size: usize) -> Result<Tensor<F>> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("blur kernel size {size} must be odd")));
    }
    let r = (size / 2) as f64;
    let sq: Vec<F> = (0..size).map(|i| F::c((i as f64 - r).powi(2))).collect();
    // sigma below ~0.05 yields a delta kernel in both precisions
    let s = sigma.reshape(&[1])?.clamp(F::c(0.05), F::infinity());
    let denom = s.square().scale(F::c(2.0));
    let taps = Tensor::from_vec(sq).div(&denom)?.neg().exp();
    let taps = taps.div(&taps.sum_all())?;
    let col = taps.reshape(&[size, 1])?;
    let row = taps.reshape(&[1, size])?;
    col.matmul(&row)
}
