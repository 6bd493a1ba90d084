//! Monte-Carlo check of the supervised-loss upper bound
//!
//! ```text
//! E||f(x) - y||^2 + E||x - y||^2
//!     <= E||f(x) - x||^2 + 2 sqrt(m s^2) * sqrt(E||d_s(f(x)) - f_M(d_s(x))||^2)
//! ```
//!
//! on synthetic fields with iid Gaussian noise, using a small linear network
//! whose blind twin is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{conv2d, Tensor};
use crate::error::{invalid, Result};
use crate::exec;
use crate::model::conditional_mask;
use crate::resample::IndexMap;

/// Linear single-channel network: masked 3x3 conv to `width` channels,
/// a residual dilated (d = 2) 3x3 conv, then a 1x1 projection back to one
/// channel. No biases.
#[derive(Debug, Clone)]
pub struct ProbeNet {
    masked: Tensor<f64>,
    dilated: Tensor<f64>,
    project: Tensor<f64>,
}

impl ProbeNet {
    /// Weights drawn from `N(0, 1 / fan_in)`.
    pub fn random<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut draw = |shape: &[usize], fan_in: usize| {
            let std = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let g: f64 = StandardNormal.sample(rng);
                std * g
            })
        };
        Self {
            masked: draw(&[width, 1, 3, 3], 9),
            dilated: draw(&[width, width, 3, 3], 9 * width),
            project: draw(&[1, width, 1, 1], width),
        }
    }

    /// The zero function (both conditions).
    pub fn zero(width: usize) -> Self {
        Self {
            masked: Tensor::zeros(&[width, 1, 3, 3]),
            dilated: Tensor::zeros(&[width, width, 3, 3]),
            project: Tensor::zeros(&[1, width, 1, 1]),
        }
    }

    pub fn width(&self) -> usize {
        self.masked.shape()[0]
    }

    pub fn apply(&self, x: &Tensor<f64>, blind: bool) -> Result<Tensor<f64>> {
        let w = self.width();
        let mask = conditional_mask::<f64>(3, blind)?;
        let zero_w = Tensor::zeros(&[w]);
        let h = conv2d(x, &self.masked, &zero_w, 1, Some(&mask))?;
        let d = conv2d(&h, &self.dilated, &zero_w, 2, None)?;
        let h = h.zip_map(&d, |a, b| a + b)?;
        conv2d(&h, &self.project, &Tensor::zeros(&[1]), 1, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropositionReport {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of `lhs - rhs`.
    pub stderr: f64,
    pub holds: bool,
    pub trials: usize,
}

struct Sample {
    lhs: f64,
    self_: f64,
    inv: f64,
}

fn sq_dist(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_and_se(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Estimates both sides of the bound over `trials` independent `(x, y)`
/// pairs on `size x size` fields, random-subsampling with stride `s`.
///
/// Clean fields are random linear ramps; noise is iid `N(0, sigma^2)`. The
/// bound is declared to hold when `lhs <= rhs + 3 * stderr`.
pub fn check_proposition<R: Rng + ?Sized>(
    net: &ProbeNet,
    size: usize,
    sigma: f64,
    s: usize,
    trials: usize,
    rng: &mut R,
) -> Result<PropositionReport> {
    if trials < 100 {
        return Err(invalid!("need at least 100 trials, got {trials}"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid!("noise level must be finite and >= 0, got {sigma}"));
    }
    if s == 0 || !size.is_multiple_of(s) {
        return Err(invalid!("stride {s} does not divide field size {size}"));
    }
    let base = rng.random::<u64>();
    let samples = exec::try_map_indexed(trials, |i| -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(i as u64);
        let (c0, cy, cx): (f64, f64, f64) = (
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let denom = (size - 1).max(1) as f64;
        let y = Tensor::from_fn(&[1, 1, size, size], |k| {
            c0 + cy * (k / size) as f64 / denom + cx * (k % size) as f64 / denom
        });
        let x = Tensor::from_fn(y.shape(), |k| {
            let g: f64 = StandardNormal.sample(&mut rng);
            y.data()[k] + sigma * g
        });
        let fx = net.apply(&x, false)?;
        let plan = IndexMap::random(size, size, s, &mut rng)?.plan(x.shape())?;
        let fm = net.apply(&plan.apply(&x)?, true)?;
        Ok(Sample {
            lhs: sq_dist(&fx, &y) + sq_dist(&x, &y),
            self_: sq_dist(&fx, &x),
            inv: sq_dist(&plan.apply(&fx)?, &fm),
        })
    })?;

    let m = (size * size) as f64;
    let k = 2.0 * (m * (s * s) as f64).sqrt();
    let lhs = samples.iter().map(|t| t.lhs).sum::<f64>() / trials as f64;
    let self_ = samples.iter().map(|t| t.self_).sum::<f64>() / trials as f64;
    let (diff, se_diff) = mean_and_se(samples.iter().map(|t| t.lhs - t.self_));
    let (inv, se_inv) = mean_and_se(samples.iter().map(|t| t.inv));
    debug_assert!((diff - (lhs - self_)).abs() <= 1e-9 * (1.0 + lhs.abs()));
    let rhs = self_ + k * inv.sqrt();
    // delta method for k * sqrt(mean inv)
    let se_sqrt = if inv > 0.0 { k * se_inv / (2.0 * inv.sqrt()) } else { 0.0 };
    let stderr = se_diff + se_sqrt;
    Ok(PropositionReport {
        lhs,
        rhs,
        stderr,
        holds: lhs <= rhs + 3.0 * stderr,
        trials,
    })
}
