//! Optimization loop and single-pass inference.

mod adam;
mod data;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{sample_batch, split_holdout, Dihedral, NoisyDataset, PatchOrigin};

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::losses::{l_total, LossWeights};
use crate::model::{read_tensors, write_tensors, CbsnConfig, CbsnParams};
use crate::noisegen::{denormalize, normalize};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_halve_every: u64,
    pub lr_floor: f64,
    pub total_iters: u64,
    pub batch: usize,
    pub patch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Iterations between metrics log lines.
    pub log_every: u64,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr0: 1e-4,
            lr_halve_every: 100_000,
            lr_floor: 2e-5,
            total_iters: 400_000,
            batch: 4,
            patch: 240,
            adam: AdamConfig::default(),
            seed: 0,
            log_every: 1000,
            checkpoint_every: 10_000,
        }
    }

    pub fn desk() -> Self {
        Self {
            lr0: 1e-3,
            lr_halve_every: 1_000,
            total_iters: 5_000,
            patch: 64,
            log_every: 50,
            checkpoint_every: 500,
            ..Self::paper()
        }
    }

    pub fn validate(&self, weights: &LossWeights) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr0) {
            return Err(Error::Config(format!(
                "need 0 <= lr_floor <= lr0 with lr0 > 0, got {} and {}",
                self.lr_floor, self.lr0
            )));
        }
        if self.batch == 0 || self.patch == 0 || self.lr_halve_every == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch, patch, lr_halve_every and log_every must be positive".into(),
            ));
        }
        let strides = weights.rs_stride * weights.blind_stride;
        if !self.patch.is_multiple_of(strides) {
            return Err(Error::Config(format!(
                "patch {} is not divisible by the loss strides {} x {}",
                self.patch, weights.rs_stride, weights.blind_stride
            )));
        }
        Ok(())
    }
}

/// `max(lr0 * 0.5^floor(iter / lr_halve_every), lr_floor)`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (iter / cfg.lr_halve_every).min(1100) as i32;
    (cfg.lr0 * 0.5f64.powi(halvings)).max(cfg.lr_floor)
}

/// Loss components of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub total: f64,
    pub blind: Option<f64>,
    pub self_: Option<f64>,
    pub inv: Option<f64>,
    pub lambda_sch: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "iter,lr,l_total,l_blind,l_self,l_inv,lambda_sch";
}

impl fmt::Display for LogRecord {
    /// Comma-separated; terms the schedule skipped are written as `nan`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.iter,
            self.lr,
            self.total,
            opt(self.blind),
            opt(self.self_),
            opt(self.inv),
            self.lambda_sch
        )
    }
}

/// Random stream for iteration `iter`. Stream 0 of the seed initializes the
/// weights, so iteration streams start at 1.
fn iter_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter + 1);
    rng
}

/// Owns parameters and optimizer state for one run.
pub struct Trainer {
    params: CbsnParams<f32>,
    state: AdamState<f32>,
    dataset: NoisyDataset,
    train: TrainConfig,
    weights: LossWeights,
}

impl Trainer {
    /// Fresh run with weights initialized from `train.seed`.
    pub fn new(
        dataset: NoisyDataset,
        model: &CbsnConfig,
        train: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        let params = CbsnParams::build(model, train.seed)?;
        let state = AdamState::new(params.tensors().iter().map(|(_, t)| t));
        Self::resume(dataset, params, state, train, weights)
    }

    /// Continues from saved parameters and optimizer state.
    pub fn resume(
        dataset: NoisyDataset,
        params: CbsnParams<f32>,
        state: AdamState<f32>,
        train: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        train.validate(&weights)?;
        weights.validate()?;
        if dataset.channels() != params.config().in_channels {
            return Err(invalid!(
                "dataset has {} channels, network expects {}",
                dataset.channels(),
                params.config().in_channels
            ));
        }
        if train.patch > dataset.max_patch() {
            return Err(invalid!(
                "patch {} is larger than the smallest image side {}",
                train.patch,
                dataset.max_patch()
            ));
        }
        if state.m.len() != params.tensors().len() || state.v.len() != state.m.len() {
            return Err(invalid!("optimizer state does not match the network"));
        }
        Ok(Self {
            params,
            state,
            dataset,
            train,
            weights,
        })
    }

    pub fn iter(&self) -> u64 {
        self.state.step
    }

    pub fn params(&self) -> &CbsnParams<f32> {
        &self.params
    }

    pub fn state(&self) -> &AdamState<f32> {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn is_done(&self) -> bool {
        self.iter() >= self.train.total_iters
    }

    /// Sample, normalize each patch, evaluate the loss and apply one Adam step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let iter = self.iter();
        let mut rng = iter_rng(self.train.seed, iter);
        let (batch, _) = sample_batch(&self.dataset, self.train.batch, self.train.patch, &mut rng)?;
        let patches = (0..self.train.batch)
            .map(|b| normalize(&batch.batch_item(b)?).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack_batch(&patches)?;
        let eval = l_total(&self.params, &x, &self.weights, iter, &mut rng)?;
        if !eval.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iter}")));
        }
        let lr = lr_at(iter, &self.train);
        adam_step(
            self.params.tensors_mut(),
            &eval.grads,
            &mut self.state,
            lr,
            &self.train.adam,
        )?;
        let f = |v: Option<f32>| v.map(f64::from);
        Ok(LogRecord {
            iter,
            lr,
            total: f64::from(eval.total),
            blind: f(eval.blind),
            self_: f(eval.self_),
            inv: f(eval.inv),
            lambda_sch: eval.lambda_sch,
        })
    }

    /// Steps until `total_iters`, calling `on_step` after every iteration.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &LogRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    /// Writes `model.cbsn` and `state.cbsn` into `dir`, each via a temporary
    /// file and a rename so an interrupted write never replaces a good file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut model = Vec::new();
        self.params.save(&mut model)?;
        atomic_write(&dir.join(MODEL_FILE), &model)?;
        // the state file carries its own copy of the weights, so a kill
        // between the two writes cannot pair a model with a stale state
        let mut state = (model.len() as u64).to_le_bytes().to_vec();
        state.extend_from_slice(&model);
        save_state(&self.params, &self.state, &mut state)?;
        atomic_write(&dir.join(STATE_FILE), &state)
    }

    /// Resumes from a directory written by [`save`](Self::save).
    pub fn load(
        dir: &Path,
        dataset: NoisyDataset,
        train: TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        let bytes = fs::read(dir.join(STATE_FILE))?;
        let truncated = || Error::Format("optimizer state: truncated".into());
        let len = bytes.get(..8).ok_or_else(truncated)?;
        let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let rest = &bytes[8..];
        let model = rest.get(..len).ok_or_else(truncated)?;
        let params = CbsnParams::load(&mut &model[..])?;
        let state = load_state(&params, &mut &rest[len..])?;
        Self::resume(dataset, params, state, train, weights)
    }
}

pub const MODEL_FILE: &str = "model.cbsn";
pub const STATE_FILE: &str = "state.cbsn";

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// The step counter is stored as two exactly representable `f32` halves.
fn save_state<W: Write>(params: &CbsnParams<f32>, state: &AdamState<f32>, out: &mut W) -> Result<()> {
    let hi = (state.step >> 24) as f32;
    let lo = (state.step & 0xFF_FFFF) as f32;
    let mut tensors = vec![("step".to_string(), Tensor::new(&[2], vec![hi, lo])?)];
    for ((name, _), (m, v)) in params.tensors().iter().zip(state.m.iter().zip(&state.v)) {
        tensors.push((format!("m.{name}"), m.clone()));
        tensors.push((format!("v.{name}"), v.clone()));
    }
    write_tensors(out, &tensors)
}

fn load_state<R: std::io::Read>(params: &CbsnParams<f32>, input: &mut R) -> Result<AdamState<f32>> {
    let mut tensors = read_tensors(input)?.into_iter();
    let bad = |what: &str| Error::Format(format!("optimizer state: {what}"));
    let (name, step) = tensors.next().ok_or_else(|| bad("empty"))?;
    if name != "step" || step.len() != 2 {
        return Err(bad("missing step counter"));
    }
    let step = ((step.data()[0] as u64) << 24) | step.data()[1] as u64;
    let mut state = AdamState {
        m: Vec::new(),
        v: Vec::new(),
        step,
    };
    for (pname, p) in params.tensors() {
        for (prefix, dst) in [("m", &mut state.m), ("v", &mut state.v)] {
            let (name, t) = tensors.next().ok_or_else(|| bad("truncated"))?;
            if name != format!("{prefix}.{pname}") || t.shape() != p.shape() {
                return Err(bad(&format!("unexpected tensor {name}")));
            }
            dst.push(t);
        }
    }
    if tensors.next().is_some() {
        return Err(bad("trailing tensors"));
    }
    Ok(state)
}

/// Runs training to completion and returns the final parameters and the
/// log records written every `log_every` iterations.
pub fn train(
    dataset: NoisyDataset,
    model: &CbsnConfig,
    train: TrainConfig,
    weights: LossWeights,
) -> Result<(CbsnParams<f32>, Vec<LogRecord>)> {
    let mut trainer = Trainer::new(dataset, model, train, weights)?;
    let mut log = Vec::new();
    trainer.run(|t, rec| {
        if rec.iter % t.config().log_every == 0 || t.is_done() {
            log.push(*rec);
        }
        Ok(())
    })?;
    Ok((trainer.params, log))
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads each plane of a `[B, C, H, W]` tensor by `pad` on every side.
pub fn reflect_pad(x: &Tensor<f32>, pad: usize) -> Result<Tensor<f32>> {
    let (b, c, h, w) = x.dims4()?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    Ok(Tensor::from_fn(&[b, c, ph, pw], |k| {
        let plane = k / (ph * pw);
        let (i, j) = ((k % (ph * pw)) / pw, k % pw);
        let si = reflect(i as isize - pad as isize, h);
        let sj = reflect(j as isize - pad as isize, w);
        x.data()[(plane * h + si) * w + sj]
    }))
}

/// Single non-blind pass per image: normalize, reflect-pad by the receptive
/// radius, run the network, crop and denormalize. Images are processed in
/// parallel.
pub fn denoise(params: &CbsnParams<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (b, c, h, w) = x.dims4()?;
    if c != params.config().in_channels {
        return Err(invalid!(
            "image has {c} channels, network expects {}",
            params.config().in_channels
        ));
    }
    let pad = params.config().receptive_radius();
    let items = exec::try_map_indexed(b, |n| -> Result<Tensor<f32>> {
        let (xn, stats) = normalize(&x.batch_item(n)?)?;
        let y = params.apply(&reflect_pad(&xn, pad)?, false)?;
        let (_, oc, ph, pw) = y.dims4()?;
        let crop = Tensor::from_fn(&[1, oc, h, w], |k| {
            let (ch, rem) = (k / (h * w), k % (h * w));
            y.data()[(ch * ph + rem / w + pad) * pw + rem % w + pad]
        });
        Ok(denormalize(&crop, stats))
    })?;
    Tensor::stack_batch(&items)
}
