//! Image quality scores and the blind-spot dependency tester.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::diffcore::{Scalar, Tensor};
use crate::error::{invalid, Result};
use crate::exec;
use crate::model::{conditional_mask, CbsnParams, Graph};

/// PSNR reported for identical inputs.
pub const PSNR_SENTINEL: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for signals with unit dynamic range.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return Err(invalid!("cannot score empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL))
}

fn gaussian_taps() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let mu_x = filter_valid(x, h, w, taps);
    let mu_y = filter_valid(y, h, w, taps);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let e_xx = filter_valid(&xx, h, w, taps);
    let e_yy = filter_valid(&yy, h, w, taps);
    let e_xy = filter_valid(&xy, h, w, taps);
    let n = mu_x.len();
    let mut total = 0.0;
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let sxx = e_xx[p] - mx * mx;
        let syy = e_yy[p] - my * my;
        let sxy = e_xy[p] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2);
        total += num / den;
    }
    total / n as f64
}

fn planes<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    Ok((b * c, h, w, x.data().iter().map(|v| v.as_f64()).collect()))
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, unit dynamic range, averaged over channels and
/// batch items. Both sides must be at least 11 pixels.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (n, h, w, xa) = planes(a)?;
    let (_, _, _, xb) = planes(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let taps = gaussian_taps();
    let hw = h * w;
    let total: f64 = (0..n)
        .map(|p| ssim_plane(&xa[p * hw..(p + 1) * hw], &xb[p * hw..(p + 1) * hw], h, w, &taps))
        .sum();
    Ok(total / n as f64)
}

/// Strength of period-`s` mosaic artifacts.
///
/// The residual `x - boxblur_s(x)` is split into the `s*s` pixel phases
/// `(i mod s, j mod s)`; the score is the population variance of the phase
/// means, averaged over planes. The box window spans offsets
/// `-(s/2) .. s - s/2` on each axis and clamps at the border.
pub fn checkerboard_score<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<f64> {
    if s < 2 {
        return Err(invalid!("checkerboard period must be at least 2, got {s}"));
    }
    let (n, h, w, data) = planes(x)?;
    if h < s || w < s {
        return Err(invalid!("image {h}x{w} is smaller than the period {s}"));
    }
    let lo = -((s / 2) as isize);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let hw = h * w;
    let mut total = 0.0;
    for p in 0..n {
        let plane = &data[p * hw..(p + 1) * hw];
        let mut sums = vec![0.0; s * s];
        let mut counts = vec![0usize; s * s];
        for i in 0..h {
            for j in 0..w {
                let mut blur = 0.0;
                for di in 0..s as isize {
                    let si = clamp(i as isize + lo + di, h);
                    for dj in 0..s as isize {
                        blur += plane[si * w + clamp(j as isize + lo + dj, w)];
                    }
                }
                let r = plane[i * w + j] - blur / (s * s) as f64;
                let phase = (i % s) * s + j % s;
                sums[phase] += r;
                counts[phase] += 1;
            }
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(&v, &c)| v / c as f64).collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        total += means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64;
    }
    Ok(total / n as f64)
}

/// Scores of one image against its clean reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub checkerboard_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub checkerboard_score: f64,
    pub per_image: Vec<ImageScores>,
}

impl EvalReport {
    pub const HEADER: &'static str = "name,psnr_db,ssim,checkerboard";

    /// Scores `(name, estimate, clean)` triples; the checkerboard score is taken
    /// on the estimate with period `period`.
    pub fn evaluate<T: Scalar>(items: &[(String, Tensor<T>, Tensor<T>)], period: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid!("nothing to evaluate"));
        }
        let per_image = exec::try_map_indexed(items.len(), |i| {
            let (name, est, clean) = &items[i];
            Ok::<_, crate::Error>(ImageScores {
                name: name.clone(),
                psnr_db: psnr(est, clean)?,
                ssim: ssim(est, clean)?,
                checkerboard_score: checkerboard_score(est, period)?,
            })
        })?;
        Ok(Self::from_scores(per_image))
    }

    /// Report whose headline values are the plain means of `per_image`.
    pub fn from_scores(per_image: Vec<ImageScores>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&ImageScores) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Self {
            psnr_db: mean(|s| s.psnr_db),
            ssim: mean(|s| s.ssim),
            checkerboard_score: mean(|s| s.checkerboard_score),
            per_image,
        }
    }

    /// Per-image rows in CSV form, without the header.
    pub fn table(&self) -> String {
        self.per_image
            .iter()
            .map(|s| format!("{},{},{},{}\n", s.name, s.psnr_db, s.ssim, s.checkerboard_score))
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean,{},{},{}",
            self.psnr_db, self.ssim, self.checkerboard_score
        )
    }
}

/// Outcome of [`blind_spot_test`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlindSpotReport {
    /// Largest output change at the perturbed pixel under the blind condition.
    pub blind_max_delta: f64,
    /// Fraction of trials whose non-blind output moved at the perturbed pixel.
    pub nonblind_min_delta_frac: f64,
    /// Set when no trial moved the non-blind output, e.g. for zero weights;
    /// the blind result then says nothing about the masking.
    pub degenerate: bool,
    pub trials: usize,
}

impl BlindSpotReport {
    pub fn passes(&self) -> bool {
        self.blind_max_delta == 0.0 && !self.degenerate && self.nonblind_min_delta_frac >= 0.99
    }
}

/// Perturbs one pixel of a random image per trial and measures how much the
/// output at that pixel moves, with and without the blind condition.
///
/// `shape` is `[C, H, W]`. Inputs are uniform in `[0, 1)`, perturbations
/// have magnitude in `[0.5, 1.5)` with random sign.
pub fn blind_spot_test<T: Scalar, R: Rng + ?Sized>(
    params: &CbsnParams<T>,
    shape: [usize; 3],
    trials: usize,
    rng: &mut R,
) -> Result<BlindSpotReport> {
    let masks = |blind: bool| move |k: usize| conditional_mask::<T>(k, blind);
    blind_spot_test_with_masks(params, shape, trials, &masks(true), &masks(false), rng)
}

/// [`blind_spot_test`] with caller-supplied masks for the blind condition.
#[doc(hidden)]
pub fn blind_spot_test_with_masks<T: Scalar, R: Rng + ?Sized>(
    params: &CbsnParams<T>,
    shape: [usize; 3],
    trials: usize,
    blind_masks: &(dyn Fn(usize) -> Result<Tensor<T>> + Sync),
    open_masks: &(dyn Fn(usize) -> Result<Tensor<T>> + Sync),
    rng: &mut R,
) -> Result<BlindSpotReport> {
    if trials == 0 {
        return Err(invalid!("need at least one trial"));
    }
    let [c, h, w] = shape;
    if c != params.config().in_channels {
        return Err(invalid!("network expects {} channels, got {c}", params.config().in_channels));
    }
    let seed: u64 = rng.random();
    let deltas = exec::try_map_indexed(trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let unit = Uniform::new(0.0, 1.0).expect("valid range");
        let x = Tensor::<T>::from_fn(&[1, c, h, w], |_| T::of(unit.sample(&mut rng)));
        let (ch, i, j) = (rng.random_range(0..c), rng.random_range(0..h), rng.random_range(0..w));
        let size = 0.5 + unit.sample(&mut rng);
        let delta = if rng.random::<bool>() { size } else { -size };
        let mut moved = x.clone();
        *moved.at4_mut(0, ch, i, j) = T::of(x.at4(0, ch, i, j).as_f64() + delta);
        let pair = Tensor::stack_batch(&[x, moved])?;
        let change = |masks: &dyn Fn(usize) -> Result<Tensor<T>>| -> Result<f64> {
            let mut graph = Graph::constant(params);
            let xv = graph.tape.constant(pair.clone());
            let y = graph.forward_with_masks(xv, masks)?;
            let y = graph.tape.value(y);
            let cout = y.shape()[1];
            Ok((0..cout)
                .map(|o| (y.at4(1, o, i, j).as_f64() - y.at4(0, o, i, j).as_f64()).abs())
                .fold(0.0, f64::max))
        };
        Ok::<_, crate::Error>((change(blind_masks)?, change(open_masks)?))
    })?;
    let blind_max_delta = deltas.iter().map(|d| d.0).fold(0.0, f64::max);
    let moved = deltas.iter().filter(|d| d.1 > 0.0).count();
    Ok(BlindSpotReport {
        blind_max_delta,
        nonblind_min_delta_frac: moved as f64 / trials as f64,
        degenerate: moved == 0,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CbsnConfig;
    use crate::noisegen::{add_noise, NoiseSpec};
    use rand_distr::StandardNormal;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, h, w], |k| f(k / w, k % w))
    }

    fn small_config() -> CbsnConfig {
        CbsnConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: 4,
            modules_per_branch: 1,
            ..CbsnConfig::default()
        }
    }

    #[test]
    fn psnr_examples() {
        let b = image(8, 8, |i, j| ((i * 8 + j) as f64) / 100.0);
        let a = b.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&b, &b).unwrap(), PSNR_SENTINEL);
        let mut c = b.clone();
        c.data_mut()[0] += 0.8; // mse = 0.64 / 64 = 0.01
        assert!((psnr(&c, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let clean = image(32, 32, |i, j| (i + j) as f64 / 64.0).cast::<f32>();
        let mut last = f64::INFINITY;
        for sigma in [0.05, 0.1, 0.2] {
            let noisy = add_noise(&clean, &NoiseSpec::iid(sigma), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let p = psnr(&noisy, &clean).unwrap();
            assert!(p < last, "sigma {sigma}: {p} vs {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_luminance_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::from_fn(&[1, 2, 16, 20], |_| rng.random());
        let b = Tensor::<f64>::from_fn(&[1, 2, 16, 20], |_| rng.random());
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&ab));

        // constant zero vs constant 0.5: only the luminance term is active,
        // l = C1 / (0.25 + C1)
        let zero = Tensor::<f64>::zeros(&[1, 1, 12, 12]);
        let half = zero.map(|v| v + 0.5);
        let s = ssim(&zero, &half).unwrap();
        assert!((s - SSIM_C1 / (0.25 + SSIM_C1)).abs() < 1e-12);
        assert!(s < 0.1);
        assert!(ssim(&Tensor::<f64>::zeros(&[1, 1, 10, 12]), &Tensor::zeros(&[1, 1, 10, 12])).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized() {
        let g = gaussian_taps();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn checkerboard_score_examples() {
        let flat = image(16, 16, |_, _| 0.3);
        assert_eq!(checkerboard_score(&flat, 2).unwrap(), 0.0);

        let checker = image(16, 16, |i, j| ((i + j) % 2 == 0) as u8 as f64);
        let sc = checkerboard_score(&checker, 2).unwrap();
        assert!(sc > 0.0);
        // interior residual is +-0.5 on the two diagonals; the border clamp
        // pulls the phase means in slightly
        assert!((sc - 0.25).abs() < 0.03, "{sc}");

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Tensor::<f64>::from_fn(&[1, 1, 16, 16], |_| 0.5 * rng.sample::<f64, _>(StandardNormal));
        assert!(checkerboard_score(&noise, 2).unwrap() < sc);

        let shifted = checker.map(|v| v + 3.0);
        assert!((checkerboard_score(&shifted, 2).unwrap() - sc).abs() < 1e-12);
        assert!(checkerboard_score(&checker, 1).is_err());
    }

    #[test]
    fn report_means_are_per_image_averages() {
        let clean = image(12, 12, |i, j| (i * j) as f64 / 144.0);
        let items: Vec<_> = [0.01, 0.05, 0.2]
            .iter()
            .map(|&e| (format!("img{e}"), clean.map(|v| v + e), clean.clone()))
            .collect();
        let report = EvalReport::evaluate(&items, 2).unwrap();
        let avg = report.per_image.iter().map(|s| s.psnr_db).sum::<f64>() / 3.0;
        assert_eq!(report.psnr_db, avg);
        assert_eq!(report.per_image.len(), 3);
        assert!(report.to_string().starts_with("mean,"));
        assert_eq!(report.table().lines().count(), 3);
        assert!(EvalReport::evaluate::<f64>(&[], 2).is_err());
    }

    #[test]
    fn blind_condition_is_exactly_independent() {
        let cfg = small_config();
        for seed in 0..2 {
            let params = CbsnParams::<f32>::build(&cfg, seed).unwrap();
            let r = blind_spot_test(&params, [1, 16, 16], 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(r.blind_max_delta, 0.0);
            assert!(r.nonblind_min_delta_frac >= 0.99, "{r:?}");
            assert!(r.passes());
        }
    }

    #[test]
    fn zero_network_is_flagged_degenerate() {
        let cfg = small_config();
        let mut params = CbsnParams::<f32>::build(&cfg, 0).unwrap();
        params.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let r = blind_spot_test(&params, [1, 16, 16], 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((r.blind_max_delta, r.nonblind_min_delta_frac), (0.0, 0.0));
        assert!(r.degenerate);
        assert!(!r.passes());
    }

    #[test]
    fn open_centre_under_blind_is_caught() {
        let params = CbsnParams::<f32>::build(&small_config(), 2).unwrap();
        let open = |k: usize| conditional_mask::<f32>(k, false);
        let r = blind_spot_test_with_masks(&params, [1, 16, 16], 10, &open, &open, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(r.blind_max_delta > 0.0);
        assert!(!r.passes());
    }
}
