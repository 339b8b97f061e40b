//! Point clouds with known intrinsic dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "dim")]
pub enum ManifoldKind {
    /// Uniform in the unit `d`-ball.
    UniformBall(usize),
    /// Standard normal in `d` dimensions.
    Gaussian(usize),
    /// Uniform on the unit segment.
    Segment,
}

impl ManifoldKind {
    pub fn intrinsic_dim(self) -> usize {
        match self {
            Self::UniformBall(d) | Self::Gaussian(d) => d,
            Self::Segment => 1,
        }
    }
}

impl std::str::FromStr for ManifoldKind {
    type Err = Error;

    /// `segment`, `uniform-ball:<d>` or `gaussian:<d>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown manifold {s:?}"));
        if s == "segment" {
            return Ok(Self::Segment);
        }
        let (name, d) = s.split_once(':').ok_or_else(bad)?;
        let d: usize = d.parse().map_err(|_| bad())?;
        match name {
            "uniform-ball" => Ok(Self::UniformBall(d)),
            "gaussian" => Ok(Self::Gaussian(d)),
            _ => Err(bad()),
        }
    }
}

/// Row-major `n x ambient` points. With `ambient` larger than the intrinsic
/// dimension the samples are mapped through a random orthonormal embedding.
pub fn make_manifold(seed: u64, kind: ManifoldKind, n: usize, ambient: Option<usize>) -> Result<Vec<f64>> {
    let d = kind.intrinsic_dim();
    if d == 0 {
        return Err(Error::invalid("manifold dimension must be at least 1"));
    }
    let ambient = ambient.unwrap_or(d);
    if ambient < d {
        return Err(Error::invalid(format!("ambient dimension {ambient} below intrinsic {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n * d);
    for _ in 0..n {
        match kind {
            ManifoldKind::Segment => pts.push(rng.random::<f64>()),
            ManifoldKind::Gaussian(_) => pts.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal))),
            ManifoldKind::UniformBall(_) => {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let radius = rng.random::<f64>().powf(1.0 / d as f64);
                pts.extend(dir.iter().map(|v| v / norm * radius));
            }
        }
    }
    if ambient == d {
        return Ok(pts);
    }
    let basis = orthonormal_rows(&mut rng, d, ambient);
    let mut out = vec![0.0; n * ambient];
    for (p, o) in pts.chunks(d).zip(out.chunks_mut(ambient)) {
        for (coef, row) in p.iter().zip(basis.chunks(ambient)) {
            for (dst, b) in o.iter_mut().zip(row) {
                *dst += coef * b;
            }
        }
    }
    Ok(out)
}

/// `d` orthonormal rows in `R^ambient` (Gram-Schmidt on Gaussian vectors).
pub fn orthonormal_rows<R: Rng + ?Sized>(rng: &mut R, d: usize, ambient: usize) -> Vec<f64> {
    let mut basis: Vec<f64> = Vec::with_capacity(d * ambient);
    while basis.len() < d * ambient {
        let mut v: Vec<f64> = (0..ambient).map(|_| rng.sample(StandardNormal)).collect();
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for row in basis.chunks(ambient) {
                let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(row).for_each(|(x, r)| *x -= dot * r);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.extend(v.iter().map(|x| x / norm));
        }
    }
    basis
}
