//! Synthetic clean images, noise processes and per-image normalization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Clean-image family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleanKind {
    /// Horizontal ramp `j / (W - 1)`.
    Gradient,
    /// `period x period` squares alternating between 0.25 and 0.75.
    Checker { period: usize },
    /// iid noise blurred by a 9x9 Gaussian and rescaled to `[0, 1]`.
    BandLimited,
}

impl fmt::Display for CleanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CleanKind::Gradient => f.write_str("gradient"),
            CleanKind::Checker { period } => write!(f, "checker:{period}"),
            CleanKind::BandLimited => f.write_str("band-limited"),
        }
    }
}

impl FromStr for CleanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.split_once(':') {
            Some(("checker", p)) => {
                let period = p
                    .parse()
                    .ok()
                    .filter(|&p: &usize| p > 0)
                    .ok_or_else(|| Error::Config(format!("bad checker period {p:?}")))?;
                Ok(Self::Checker { period })
            }
            None if s == "checker" => Ok(Self::Checker { period: 8 }),
            None if s == "gradient" => Ok(Self::Gradient),
            None if s == "band-limited" || s == "bandlimited" => Ok(Self::BandLimited),
            _ => Err(Error::Config(format!("unknown clean image kind {s:?}"))),
        }
    }
}

const BLUR_RADIUS: usize = 4;
const BLUR_SIGMA: f64 = 2.0;

fn gaussian_taps(radius: usize, sigma: f64) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Valid-mode 2-D correlation of an `h x w` field with a `kh x kw` kernel.
fn correlate_valid(src: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h + 1 - kh, w + 1 - kw);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    acc += k[a * kw + b] * src[(i + a) * w + j + b];
                }
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// One `[1, C, H, W]` clean image with values in `[0, 1]`.
pub fn gen_clean<T: Scalar, R: Rng + ?Sized>(
    kind: CleanKind,
    h: usize,
    w: usize,
    c: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if h == 0 || w == 0 || c == 0 {
        return Err(invalid!("empty image {c}x{h}x{w}"));
    }
    let plane = h * w;
    let data: Vec<f64> = match kind {
        CleanKind::Gradient => {
            let denom = (w - 1).max(1) as f64;
            (0..c * plane).map(|k| (k % w) as f64 / denom).collect()
        }
        CleanKind::Checker { period } => {
            if period == 0 {
                return Err(invalid!("checker period must be positive"));
            }
            (0..c * plane)
                .map(|k| {
                    let (i, j) = ((k % plane) / w, k % w);
                    if (i / period + j / period) % 2 == 0 {
                        0.25
                    } else {
                        0.75
                    }
                })
                .collect()
        }
        CleanKind::BandLimited => {
            let taps = gaussian_taps(BLUR_RADIUS, BLUR_SIGMA);
            let kernel: Vec<f64> = taps
                .iter()
                .flat_map(|a| taps.iter().map(move |b| a * b))
                .collect();
            let n = 2 * BLUR_RADIUS + 1;
            let (ph, pw) = (h + n - 1, w + n - 1);
            let mut data = Vec::with_capacity(c * plane);
            for _ in 0..c {
                let field = normals(ph * pw, rng);
                data.extend(correlate_valid(&field, ph, pw, &kernel, n, n));
            }
            let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            data.iter()
                .map(|v| if span > 0.0 { (v - lo) / span } else { 0.5 })
                .collect()
        }
    };
    Tensor::new(&[1, c, h, w], data.into_iter().map(T::of).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    IidGaussian,
    CorrelatedGaussian,
    Heteroscedastic,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::IidGaussian => "iid",
            NoiseKind::CorrelatedGaussian => "correlated",
            NoiseKind::Heteroscedastic => "heteroscedastic",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iid" | "iid_gaussian" => Ok(Self::IidGaussian),
            "correlated" | "correlated_gaussian" => Ok(Self::CorrelatedGaussian),
            "heteroscedastic" => Ok(Self::Heteroscedastic),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// Small normalized correlation kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrKernel {
    pub h: usize,
    pub w: usize,
    pub taps: Vec<f64>,
}

impl CorrKernel {
    pub fn boxed(h: usize, w: usize) -> Self {
        let n = h * w;
        Self {
            h,
            w,
            taps: vec![1.0 / n as f64; n],
        }
    }
}

impl Default for CorrKernel {
    fn default() -> Self {
        Self::boxed(2, 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Marginal standard deviation for the Gaussian kinds.
    pub sigma: f64,
    pub corr_kernel: CorrKernel,
    /// Heteroscedastic variance `a * y + b`.
    pub a: f64,
    pub b: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::CorrelatedGaussian,
            sigma: 0.1,
            corr_kernel: CorrKernel::default(),
            a: 0.0,
            b: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn iid(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::IidGaussian,
            sigma,
            ..Self::default()
        }
    }

    pub fn correlated(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::CorrelatedGaussian,
            sigma,
            ..Self::default()
        }
    }

    pub fn heteroscedastic(a: f64, b: f64) -> Self {
        Self {
            kind: NoiseKind::Heteroscedastic,
            a,
            b,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        let k = &self.corr_kernel;
        if k.h == 0 || k.w == 0 || k.taps.len() != k.h * k.w {
            return Err(invalid!("correlation kernel shape {}x{} with {} taps", k.h, k.w, k.taps.len()));
        }
        let total: f64 = k.taps.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid!("correlation kernel sums to {total}, not 1"));
        }
        // a*y + b is linear in y, so checking both ends of [0, 1] suffices
        if !(self.b >= 0.0 && self.a + self.b >= 0.0) {
            return Err(invalid!("variance a*y + b is negative on [0, 1]"));
        }
        Ok(())
    }
}

/// `x = y + noise` for a `[B, C, H, W]` clean tensor.
pub fn add_noise<T: Scalar, R: Rng + ?Sized>(
    y: &Tensor<T>,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (b, c, h, w) = y.dims4()?;
    let noise: Vec<f64> = match spec.kind {
        NoiseKind::IidGaussian => normals(y.len(), rng)
            .into_iter()
            .map(|g| spec.sigma * g)
            .collect(),
        NoiseKind::CorrelatedGaussian => {
            let k = &spec.corr_kernel;
            let gain = spec.sigma / k.taps.iter().map(|t| t * t).sum::<f64>().sqrt();
            let (ph, pw) = (h + k.h - 1, w + k.w - 1);
            let mut out = Vec::with_capacity(y.len());
            for _ in 0..b * c {
                let field = normals(ph * pw, rng);
                out.extend(
                    correlate_valid(&field, ph, pw, &k.taps, k.h, k.w)
                        .into_iter()
                        .map(|v| gain * v),
                );
            }
            out
        }
        NoiseKind::Heteroscedastic => y
            .data()
            .iter()
            .map(|v| {
                let g: f64 = StandardNormal.sample(&mut *rng);
                (spec.a * v.as_f64() + spec.b).max(0.0).sqrt() * g
            })
            .collect(),
    };
    let data = y
        .data()
        .iter()
        .zip(noise)
        .map(|(v, n)| T::of(v.as_f64() + n))
        .collect();
    Tensor::new(y.shape(), data)
}

/// Mean and floored standard deviation of one normalized image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// `(x - mean) / max(std, 1/sqrt(m))` over all `m` elements of `x`.
pub fn normalize<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, NormStats)> {
    if x.is_empty() {
        return Err(invalid!("cannot normalize an empty tensor"));
    }
    let m = x.len() as f64;
    let mean = x.data().iter().map(|v| v.as_f64()).sum::<f64>() / m;
    let var = x
        .data()
        .iter()
        .map(|v| (v.as_f64() - mean).powi(2))
        .sum::<f64>()
        / m;
    let std = var.sqrt().max(1.0 / m.sqrt());
    let out = x.map(|v| T::of((v.as_f64() - mean) / std));
    Ok((out, NormStats { mean, std }))
}

pub fn denormalize<T: Scalar>(x: &Tensor<T>, stats: NormStats) -> Tensor<T> {
    x.map(|v| T::of(v.as_f64() * stats.std + stats.mean))
}
