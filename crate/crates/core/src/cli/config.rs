//! Plain-text `key = value` experiment configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key is optional
//! and falls back to [`ExperimentConfig::default`], the desk preset. Unknown
//! and repeated keys are errors. [`ExperimentConfig::to_text`] writes every
//! key, so its output parses back to an equal config.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{BranchSpec, CbsnConfig};
use crate::noisegen::{CleanKind, CorrKernel, NoiseSpec};
use crate::trainkit::TrainConfig;

/// Synthetic dataset layout for `make-noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub clean: CleanKind,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Fraction of images kept out of training.
    pub holdout: f64,
    pub seed: u64,
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clean: CleanKind::BandLimited,
            count: 40,
            height: 128,
            width: 128,
            channels: 3,
            holdout: 0.1,
            seed: 1,
            dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: CbsnConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub noise: NoiseSpec,
    pub data: DataConfig,
    /// Output directory of `train`.
    pub run_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: CbsnConfig::default(),
            train: TrainConfig::desk(),
            loss: LossWeights::desk(),
            noise: NoiseSpec::correlated(0.1),
            data: DataConfig::default(),
            run_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_branches(value: &str) -> Result<Vec<BranchSpec>> {
    value
        .split(',')
        .map(|item| {
            let (k, d) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("model.branches: expected kernel:dilation, got {item:?}")))?;
            Ok(BranchSpec {
                kernel: parse("model.branches", k)?,
                dilation: parse("model.branches", d)?,
            })
        })
        .collect()
}

/// `HxW:t0,t1,...` with taps row-major.
fn parse_kernel(value: &str) -> Result<CorrKernel> {
    let bad = || Error::Config(format!("noise.corr_kernel: expected HxW:taps, got {value:?}"));
    let (dims, taps) = value.split_once(':').ok_or_else(bad)?;
    let (h, w) = dims.split_once('x').ok_or_else(bad)?;
    Ok(CorrKernel {
        h: parse("noise.corr_kernel", h)?,
        w: parse("noise.corr_kernel", w)?,
        taps: taps
            .split(',')
            .map(|t| parse("noise.corr_kernel", t.trim()))
            .collect::<Result<_>>()?,
    })
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, l, z, d) = (
            &mut self.model,
            &mut self.train,
            &mut self.loss,
            &mut self.noise,
            &mut self.data,
        );
        match key {
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.out_channels" => m.out_channels = parse(key, v)?,
            "model.base_width" => m.base_width = parse(key, v)?,
            "model.modules_per_branch" => m.modules_per_branch = parse(key, v)?,
            "model.branches" => m.branch_specs = parse_branches(v)?,
            "model.tail_depth" => m.tail_depth = parse(key, v)?,

            "train.lr0" => t.lr0 = parse(key, v)?,
            "train.lr_halve_every" => t.lr_halve_every = parse(key, v)?,
            "train.lr_floor" => t.lr_floor = parse(key, v)?,
            "train.total_iters" => t.total_iters = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.patch" => t.patch = parse(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam.eps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,

            "loss.lambda_inv" => l.lambda_inv = parse(key, v)?,
            "loss.warmup_iters" => l.warmup_iters = parse(key, v)?,
            "loss.rs_stride" => l.rs_stride = parse(key, v)?,
            "loss.blind_stride" => l.blind_stride = parse(key, v)?,
            "loss.blind_downsampler" => l.blind_downsampler = parse(key, v)?,
            "loss.inv_downsampler" => l.inv_downsampler = parse(key, v)?,
            "loss.lambda_mode" => l.lambda_mode = parse(key, v)?,
            "loss.inv_form" => l.inv_form = parse(key, v)?,

            "noise.kind" => z.kind = parse(key, v)?,
            "noise.sigma" => z.sigma = parse(key, v)?,
            "noise.corr_kernel" => z.corr_kernel = parse_kernel(v)?,
            "noise.a" => z.a = parse(key, v)?,
            "noise.b" => z.b = parse(key, v)?,

            "data.clean" => d.clean = parse(key, v)?,
            "data.count" => d.count = parse(key, v)?,
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.channels" => d.channels = parse(key, v)?,
            "data.holdout" => d.holdout = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.dir" => d.dir = PathBuf::from(v),

            "run.dir" => self.run_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key in a fixed order.
    pub fn to_text(&self) -> String {
        let (m, t, l, z, d) = (&self.model, &self.train, &self.loss, &self.noise, &self.data);
        let branches = join(m.branch_specs.iter().map(|b| format!("{}:{}", b.kernel, b.dilation)));
        let kernel = format!(
            "{}x{}:{}",
            z.corr_kernel.h,
            z.corr_kernel.w,
            join(&z.corr_kernel.taps)
        );
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        };
        put("model.in_channels", &m.in_channels);
        put("model.out_channels", &m.out_channels);
        put("model.base_width", &m.base_width);
        put("model.modules_per_branch", &m.modules_per_branch);
        put("model.branches", &branches);
        put("model.tail_depth", &m.tail_depth);
        put("train.lr0", &t.lr0);
        put("train.lr_halve_every", &t.lr_halve_every);
        put("train.lr_floor", &t.lr_floor);
        put("train.total_iters", &t.total_iters);
        put("train.batch", &t.batch);
        put("train.patch", &t.patch);
        put("train.adam_beta1", &t.adam.beta1);
        put("train.adam_beta2", &t.adam.beta2);
        put("train.adam_eps", &t.adam.eps);
        put("train.seed", &t.seed);
        put("train.log_every", &t.log_every);
        put("train.checkpoint_every", &t.checkpoint_every);
        put("loss.lambda_inv", &l.lambda_inv);
        put("loss.warmup_iters", &l.warmup_iters);
        put("loss.rs_stride", &l.rs_stride);
        put("loss.blind_stride", &l.blind_stride);
        put("loss.blind_downsampler", &l.blind_downsampler);
        put("loss.inv_downsampler", &l.inv_downsampler);
        put("loss.lambda_mode", &l.lambda_mode);
        put("loss.inv_form", &l.inv_form);
        put("noise.kind", &z.kind);
        put("noise.sigma", &z.sigma);
        put("noise.corr_kernel", &kernel);
        put("noise.a", &z.a);
        put("noise.b", &z.b);
        put("data.clean", &d.clean);
        put("data.count", &d.count);
        put("data.height", &d.height);
        put("data.width", &d.width);
        put("data.channels", &d.channels);
        put("data.holdout", &d.holdout);
        put("data.seed", &d.seed);
        put("data.dir", &d.dir.display());
        put("run.dir", &self.run_dir.display());
        s
    }

    /// Checks every section and the couplings between them.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.loss)?;
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.data;
        if d.count == 0 || d.height == 0 || d.width == 0 || d.channels == 0 {
            return Err(Error::Config("data dimensions and count must be positive".into()));
        }
        if d.channels != self.model.in_channels {
            return Err(Error::Config(format!(
                "data has {} channels, model expects {}",
                d.channels, self.model.in_channels
            )));
        }
        if !(0.0..1.0).contains(&d.holdout) {
            return Err(Error::Config(format!("data.holdout must be in [0, 1), got {}", d.holdout)));
        }
        Ok(())
    }
}
