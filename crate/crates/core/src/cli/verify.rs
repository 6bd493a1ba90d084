//! Self-checks behind `cbsn verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::raster;
use crate::diffcore::{finite_diff_grad, relative_error, relative_error_all};
use crate::diffcore::{Tape, Tensor};
use crate::error::Result;
use crate::losses::{check_proposition, ProbeNet};
use crate::losses::{l_self, l_total, lambda_schedule, sample_plan, LossWeights};
use crate::metrics::{blind_spot_test, blind_spot_test_with_masks};
use crate::model::{conditional_mask, CbsnConfig, CbsnParams};
use crate::resample::{b2s, pd_down, pd_up, s2b, IndexMap};
use crate::trainkit::{adam_step, AdamConfig, AdamState};
use crate::trainkit::{lr_at, train, NoisyDataset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    pub seed: u64,
    /// Opens the centre tap under the blind condition, which must make the
    /// blind-spot check fail.
    pub corrupt_mask: bool,
}

type Outcome = Result<(bool, String)>;
type CheckFn = fn(&Options) -> Outcome;

fn tiny_model() -> CbsnConfig {
    CbsnConfig {
        in_channels: 1,
        out_channels: 1,
        base_width: 2,
        modules_per_branch: 1,
        tail_depth: 2,
        ..CbsnConfig::default()
    }
}

fn blind_spot(opts: &Options) -> Outcome {
    let cfg = CbsnConfig::default();
    let mut worst = (0.0f64, 1.0f64);
    for seed in 0..5 {
        let params = CbsnParams::<f32>::build(&cfg, opts.seed + seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + seed);
        let report = if opts.corrupt_mask {
            let open = |k: usize| conditional_mask::<f32>(k, false);
            blind_spot_test_with_masks(&params, [3, 24, 24], 20, &open, &open, &mut rng)?
        } else {
            blind_spot_test(&params, [3, 24, 24], 20, &mut rng)?
        };
        worst.0 = worst.0.max(report.blind_max_delta);
        worst.1 = worst.1.min(report.nonblind_min_delta_frac);
    }
    Ok((
        worst.0 == 0.0 && worst.1 >= 0.99,
        format!("blind max delta {:e}, non-blind moved fraction {}", worst.0, worst.1),
    ))
}

fn conv_gradient(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = Tensor::<f64>::from_fn(&[2, 2, 6, 7], |_| rng.random_range(-1.0..1.0));
    let k = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::<f64>::from_fn(&[3], |_| rng.random_range(-1.0..1.0));
    let target = Tensor::<f64>::from_fn(&[2, 3, 6, 7], |_| rng.random_range(-1.0..1.0));
    let mask = conditional_mask::<f64>(3, true)?;
    let loss = |x: &Tensor<f64>, k: &Tensor<f64>| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.param(x.clone()), tape.param(k.clone()), tape.param(b.clone()));
        let t = tape.constant(target.clone());
        let y = tape.conv2d(xv, kv, bv, 2, Some(mask.clone()))?;
        let y = tape.relu(y)?;
        let l = tape.mean_sq(y, t)?;
        let g = tape.backward(l)?;
        Ok((tape.value(l).item()?, g.collect(&[xv, kv])?))
    };
    let (_, grads) = loss(&x, &k)?;
    let fx = finite_diff_grad(|x| loss(x, &k).map_or(f64::NAN, |v| v.0), &x, 1e-6);
    let fk = finite_diff_grad(|k| loss(&x, k).map_or(f64::NAN, |v| v.0), &k, 1e-6);
    let err = relative_error(&grads[0], &fx).max(relative_error(&grads[1], &fk));
    Ok((err < 1e-4, format!("max relative error {err:.2e}")))
}

/// Invariance residuals closer to zero than this sit on the kink of the L1
/// norm for a finite-difference step of 1e-6, where no derivative exists.
const NEAR_TIE: f64 = 1e-4;

/// Finite differences of `L_total` with the invariance target frozen at the
/// unperturbed parameters, against the tape gradient. Instances with a
/// near-tie in the invariance residual are redrawn.
fn total_gradient(opts: &Options) -> Outcome {
    for attempt in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(attempt);
        if let Some(err) = total_gradient_instance(&mut rng)? {
            return Ok((err < 1e-4, format!("relative error {err:.2e}, {attempt} instances redrawn")));
        }
    }
    Ok((false, "every instance had a near-tie".into()))
}

fn total_gradient_instance(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let mut params = CbsnParams::<f64>::build(&tiny_model(), rng.random())?;
    // zero biases put ReLU inputs on exact zeros in dead regions
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let x = Tensor::<f64>::from_fn(&[1, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let weights = LossWeights {
        blind_stride: 2,
        warmup_iters: 10,
        ..LossWeights::default()
    };
    let iter = 5;
    let seed = rng.random();

    let mut plans = ChaCha8Rng::seed_from_u64(seed);
    let blind_plan = sample_plan(weights.blind_downsampler, x.shape(), weights.blind_stride, &mut plans)?;
    let inv_plan = sample_plan(weights.inv_downsampler, x.shape(), weights.rs_stride, &mut plans)?;
    let back = blind_plan.inverse()?;
    let frozen = params.apply(&inv_plan.apply(&x)?, true)?;
    let g = inv_plan.apply(&params.apply(&x, false)?)?;
    if g.data().iter().zip(frozen.data()).any(|(a, b)| (a - b).abs() < NEAR_TIE) {
        return Ok(None);
    }

    let eval = l_total(&params, &x, &weights, iter, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let lambda = lambda_schedule(iter, weights.warmup_iters);
    let objective = |p: &CbsnParams<f64>| -> Result<f64> {
        let blind = l_self(&back.apply(&p.apply(&blind_plan.apply(&x)?, true)?)?, &x)?;
        let fx = p.apply(&x, false)?;
        let inv = l_self(&inv_plan.apply(&fx)?, &frozen)?;
        Ok(blind + lambda * (l_self(&fx, &x)? + weights.lambda_inv * inv))
    };

    let fd: Vec<Tensor<f64>> = params
        .tensors()
        .iter()
        .map(|(name, tensor)| {
            finite_diff_grad(
                |v| {
                    let mut p = params.clone();
                    *p.get_mut(name).expect("tensor exists") = v.clone();
                    objective(&p).unwrap_or(f64::NAN)
                },
                tensor,
                1e-6,
            )
        })
        .collect();
    Ok(Some(relative_error_all(&eval.grads, &fd)))
}

fn round_trips(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = Tensor::<f32>::from_fn(&[1, 3, 5, 7], |_| rng.random_range(-2.0..2.0));
    let back = raster::decode(&raster::encode(&x)?)?;
    let raster_ok = back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let cfg = ExperimentConfig::default();
    let text = cfg.to_text();
    let again = ExperimentConfig::parse(&text)?;
    let config_ok = again == cfg && again.to_text() == text;
    let u8_ok = (0..=255u8).all(|v| raster::to_u8(raster::from_u8(v)) == v);
    Ok((
        raster_ok && config_ok && u8_ok,
        format!("raster {raster_ok}, config {config_ok}, 8-bit {u8_ok}"),
    ))
}

fn resamplers(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut exact = true;
    for _ in 0..20 {
        let s = rng.random_range(1..=4);
        let (b, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (s * rng.random_range(1..=5), s * rng.random_range(1..=5));
        let x = Tensor::<f32>::from_fn(&[b, c, h, w], |_| rng.random());
        exact &= b2s(&s2b(&x, s)?, s)? == x && pd_up(&pd_down(&x, s)?, s)? == x;
    }
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        let map = IndexMap::random(2, 2, 2, &mut rng)?;
        let (dy, dx) = map.offsets()[0];
        counts[dy * 2 + dx] += 1;
    }
    let worst = counts
        .iter()
        .map(|&n| (n as f64 / 10_000.0 - 0.25).abs())
        .fold(0.0, f64::max);
    Ok((
        exact && worst <= 0.02,
        format!("inverse pairs exact {exact}, RS offset deviation {worst:.4}"),
    ))
}

fn anchors(_: &Options) -> Outcome {
    let paper = TrainConfig::paper();
    let weights = LossWeights::default();
    let sched = lambda_schedule(0, weights.warmup_iters) == 0.0
        && lambda_schedule(weights.warmup_iters, weights.warmup_iters) == 1.0;
    let lr = lr_at(0, &paper) == 1e-4 && lr_at(300_000, &paper) == 2e-5;
    let mut theta = vec![Tensor::new(&[1], vec![1.0f64])?];
    let mut state = AdamState::new(&theta);
    adam_step(&mut theta, &[Tensor::new(&[1], vec![2.0])?], &mut state, 0.1, &AdamConfig::default())?;
    let adam = (theta[0].data()[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12;
    Ok((sched && lr && adam, format!("schedule {sched}, learning rate {lr}, adam {adam}")))
}

fn proposition(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut held = 0;
    let mut total = 0;
    let mut worst = f64::NEG_INFINITY;
    for sigma in [0.1, 0.25] {
        for _ in 0..10 {
            let net = ProbeNet::random(4, &mut rng);
            let r = check_proposition(&net, 8, sigma, 2, 1000, &mut rng)?;
            total += 1;
            held += r.holds as usize;
            worst = worst.max(r.lhs - r.rhs - 3.0 * r.stderr);
        }
    }
    Ok((held == total, format!("{held}/{total} cases hold, worst margin {worst:.3e}")))
}

fn toy_training(opts: &Options) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let images = (0..2)
        .map(|_| Tensor::<f32>::from_fn(&[1, 1, 24, 24], |_| rng.random()))
        .collect();
    let train_cfg = TrainConfig {
        total_iters: 20,
        batch: 2,
        patch: 20,
        log_every: 5,
        lr0: 1e-3,
        seed: opts.seed,
        ..TrainConfig::desk()
    };
    let weights = LossWeights {
        warmup_iters: 10,
        ..LossWeights::desk()
    };
    let (_, log) = train(NoisyDataset::new(images)?, &tiny_model(), train_cfg, weights)?;
    let finite = log.iter().all(|r| r.total.is_finite());
    // iterations 0, 5, 10, 15 and the final 19
    Ok((finite && log.len() == 5, format!("{} log records, finite {finite}", log.len())))
}

/// Runs the suite for `level`, in a fixed order.
pub fn run(level: Level, opts: &Options) -> Vec<Check> {
    let mut suite: Vec<(&'static str, CheckFn)> = vec![
        ("blind-spot", blind_spot),
        ("conv-gradient", conv_gradient),
        ("total-gradient", total_gradient),
        ("round-trips", round_trips),
        ("resamplers", resamplers),
        ("anchors", anchors),
    ];
    if level == Level::Full {
        suite.push(("proposition", proposition));
        suite.push(("toy-training", toy_training));
    }
    suite
        .into_iter()
        .map(|(name, check)| match check(opts) {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let checks = run(Level::Quick, &Options::default());
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(checks.len(), 6);
    }

    #[test]
    fn full_suite_passes() {
        let checks = run(Level::Full, &Options { seed: 3, ..Options::default() });
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(checks.len(), 8);
    }

    #[test]
    fn total_gradient_holds_across_seeds() {
        for seed in 0..30 {
            let (passed, detail) = total_gradient(&Options { seed, ..Options::default() }).unwrap();
            assert!(passed, "seed {seed}: {detail}");
        }
    }

    #[test]
    fn corrupt_mask_fails_blind_spot() {
        let opts = Options {
            corrupt_mask: true,
            ..Options::default()
        };
        let (passed, _) = blind_spot(&opts).unwrap();
        assert!(!passed);
    }
}
