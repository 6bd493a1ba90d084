//! The conditional blind-spot network.
//!
//! ```text
//! x -> 1x1 -> relu -+-> masked kxk (k=3) -> relu -> [dilated module, d=2] x n -+
//!                   |                                                          +-> concat -> 1x1 (relu 1x1)* -> out
//!                   +-> masked kxk (k=5) -> relu -> [dilated module, d=3] x n -+
//!
//! dilated module: y = x + 1x1(relu(dilated 3x3(x)))
//! ```
//!
//! The centre tap of each branch's masked kernel is zeroed when the network is
//! called with `blind = true` and kept otherwise; both calls read the same
//! parameter storage. A masked `k = 2l+1` kernel reaches offsets `0 < |d| <= l`
//! and every later spatial conv moves in multiples of `l + 1`, so a blind
//! output pixel never depends on the input pixel at the same position.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Kernel size and dilation of one masked branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub kernel: usize,
    pub dilation: usize,
}

impl BranchSpec {
    /// The branch whose dilation keeps a `kernel`-sized mask blind.
    pub fn for_kernel(kernel: usize) -> Self {
        Self {
            kernel,
            dilation: kernel / 2 + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbsnConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub modules_per_branch: usize,
    pub branch_specs: Vec<BranchSpec>,
    pub tail_depth: usize,
}

impl Default for CbsnConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            base_width: 16,
            modules_per_branch: 2,
            branch_specs: vec![BranchSpec::for_kernel(3), BranchSpec::for_kernel(5)],
            tail_depth: 3,
        }
    }
}

impl CbsnConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("base_width", self.base_width),
            ("modules_per_branch", self.modules_per_branch),
            ("branches", self.branch_specs.len()),
            ("tail_depth", self.tail_depth),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for b in &self.branch_specs {
            if b.kernel % 2 == 0 {
                return Err(Error::Config(format!("masked kernel size {} is even", b.kernel)));
            }
            if b.dilation != b.kernel / 2 + 1 {
                return Err(Error::Config(format!(
                    "branch with kernel {} needs dilation {}, got {}",
                    b.kernel,
                    b.kernel / 2 + 1,
                    b.dilation
                )));
            }
        }
        Ok(())
    }

    /// Largest dilation over all branches.
    pub fn max_dilation(&self) -> usize {
        self.branch_specs.iter().map(|b| b.dilation).max().unwrap_or(1)
    }

    /// Smallest accepted spatial size.
    pub fn min_input_size(&self) -> usize {
        2 * self.max_dilation() + 1
    }

    /// Distance in pixels from an output pixel to the farthest input it reads.
    pub fn receptive_radius(&self) -> usize {
        self.branch_specs
            .iter()
            .map(|b| b.kernel / 2 + self.modules_per_branch * b.dilation)
            .max()
            .unwrap_or(0)
    }

    /// Names and shapes of all parameters, in binding order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.base_width;
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("head".into(), w, self.in_channels, 1);
        for (bi, b) in self.branch_specs.iter().enumerate() {
            conv(format!("branch{bi}.masked"), w, w, b.kernel);
            for mi in 0..self.modules_per_branch {
                conv(format!("branch{bi}.module{mi}.dilated"), w, w, 3);
                conv(format!("branch{bi}.module{mi}.pointwise"), w, w, 1);
            }
        }
        let mut cin = w * self.branch_specs.len();
        for t in 0..self.tail_depth {
            let cout = if t + 1 == self.tail_depth {
                self.out_channels
            } else {
                w
            };
            conv(format!("tail{t}"), cout, cin, 1);
            cin = cout;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Reconstructs the architecture from parameter names and shapes.
    pub fn infer(tensors: &[(String, Vec<usize>)]) -> Result<Self> {
        let shape_of = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let head = shape_of("head.weight")?;
        let (base_width, in_channels) = match head.as_slice() {
            [w, c, 1, 1] => (*w, *c),
            _ => return Err(Error::Format(format!("bad head shape {head:?}"))),
        };
        let mut branch_specs = Vec::new();
        while let Ok(s) = shape_of(&format!("branch{}.masked.weight", branch_specs.len())) {
            branch_specs.push(BranchSpec::for_kernel(s[2]));
        }
        let count = |pattern: &dyn Fn(usize) -> String| {
            (0..).take_while(|&i| shape_of(&pattern(i)).is_ok()).count()
        };
        let modules_per_branch = count(&|i| format!("branch0.module{i}.dilated.weight"));
        let tail_depth = count(&|i| format!("tail{i}.weight"));
        let last = shape_of(&format!("tail{}.weight", tail_depth.saturating_sub(1)))?;
        let config = Self {
            in_channels,
            out_channels: last[0],
            base_width,
            modules_per_branch,
            branch_specs,
            tail_depth,
        };
        config.validate()?;
        if config.layout() != tensors {
            return Err(Error::Format(
                "parameter list does not match any network layout".into(),
            ));
        }
        Ok(config)
    }
}

/// `1 - delta` (centre zero) when `blind`, all ones otherwise.
pub fn conditional_mask<T: Scalar>(k: usize, blind: bool) -> Result<Tensor<T>> {
    if k.is_multiple_of(2) {
        return Err(invalid!("mask size must be odd, got {k}"));
    }
    let mut m = Tensor::full(&[k, k], T::one());
    if blind {
        m.data_mut()[k * k / 2] = T::zero();
    }
    Ok(m)
}

/// Learnable tensors of a network, in [`CbsnConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct CbsnParams<T> {
    config: CbsnConfig,
    tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> CbsnParams<T> {
    /// Fan-in scaled Gaussian weights and zero biases, deterministic in `rng`.
    ///
    /// Kernels that feed a relu get He scaling `sqrt(2 / fan_in)`; the module
    /// pointwise convs and the last tail conv are linear and use `sqrt(1 / fan_in)`.
    pub fn init<R: Rng + ?Sized>(config: &CbsnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let last_tail = format!("tail{}.weight", config.tail_depth - 1);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let gain = if name.contains("pointwise") || name == last_tail {
                        1.0
                    } else {
                        2.0
                    };
                    let std = (gain / fan_in).sqrt();
                    Tensor::from_fn(&shape, |_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::of(z * std)
                    })
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// [`init`](Self::init) driven by a ChaCha stream seeded with `seed`.
    pub fn build(config: &CbsnConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, &mut rng)
    }

    pub fn from_tensors(config: CbsnConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<_> = tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if shapes != config.layout() {
            return Err(Error::Config("tensors do not match the config layout".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &CbsnConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor<T>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> CbsnParams<U> {
        CbsnParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Inference without gradients: `[B, C, H, W]` in, same shape out.
    pub fn apply(&self, x: &Tensor<T>, blind: bool) -> Result<Tensor<T>> {
        let mut graph = Graph::constant(self);
        let xv = graph.tape.constant(x.clone());
        let y = graph.forward(xv, blind)?;
        Ok(graph.tape.value(y).clone())
    }
}

/// A tape with one network's parameters already recorded on it.
pub struct Graph<T> {
    pub tape: Tape<T>,
    config: CbsnConfig,
    params: Vec<Var>,
}

impl<T: Scalar> Graph<T> {
    /// Parameters recorded as differentiable leaves.
    pub fn new(params: &CbsnParams<T>) -> Self {
        Self::bind(params, true)
    }

    /// Parameters recorded as constants; for inference only.
    pub fn constant(params: &CbsnParams<T>) -> Self {
        Self::bind(params, false)
    }

    fn bind(params: &CbsnParams<T>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .tensors
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self {
            tape,
            config: params.config.clone(),
            params: vars,
        }
    }

    pub fn config(&self) -> &CbsnConfig {
        &self.config
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Runs the network on `x`; `blind` selects the centre-masked condition.
    pub fn forward(&mut self, x: Var, blind: bool) -> Result<Var> {
        let masks = |k: usize| conditional_mask::<T>(k, blind);
        self.forward_with_masks(x, &masks)
    }

    /// Forward pass with caller-chosen masked-conv masks.
    ///
    /// Only useful for mutation tests of the blind-spot checker.
    #[doc(hidden)]
    pub fn forward_with_masks(
        &mut self,
        x: Var,
        masks: &dyn Fn(usize) -> Result<Tensor<T>>,
    ) -> Result<Var> {
        let (_, c, h, w) = self.tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(invalid!(
                "network expects {} channels, got {}",
                self.config.in_channels,
                c
            ));
        }
        let min = self.config.min_input_size();
        if h < min || w < min {
            return Err(invalid!("input {h}x{w} is smaller than the minimum {min}x{min}"));
        }

        let params = self.params.clone();
        let mut next = params.chunks_exact(2).map(|p| (p[0], p[1]));
        let tape = &mut self.tape;
        let mut layer = |tape: &mut Tape<T>, input: Var, dilation: usize, mask: Option<Tensor<T>>| {
            let (w, b) = next.next().expect("layout covers every layer");
            tape.conv2d(input, w, b, dilation, mask)
        };

        let head = layer(tape, x, 1, None)?;
        let head = tape.relu(head)?;
        let mut branches = Vec::with_capacity(self.config.branch_specs.len());
        for spec in &self.config.branch_specs {
            let masked = layer(tape, head, 1, Some(masks(spec.kernel)?))?;
            let mut y = tape.relu(masked)?;
            for _ in 0..self.config.modules_per_branch {
                let t = layer(tape, y, spec.dilation, None)?;
                let t = tape.relu(t)?;
                let t = layer(tape, t, 1, None)?;
                y = tape.add(y, t)?;
            }
            branches.push(y);
        }
        let mut y = branches[0];
        for &b in &branches[1..] {
            y = tape.concat_channels(y, b)?;
        }
        for t in 0..self.config.tail_depth {
            y = layer(tape, y, 1, None)?;
            if t + 1 < self.config.tail_depth {
                y = tape.relu(y)?;
            }
        }
        Ok(y)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CBSN";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes named `f32` tensors in the checkpoint container format:
/// `"CBSN"`, version `u32`, then per tensor: name length `u32`, name bytes,
/// rank `u32`, dims `u32` each, raw little-endian `f32` values.
pub fn write_tensors<W: Write>(out: &mut W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&u32_of(name.len())?.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&u32_of(t.rank())?.to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&u32_of(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

/// Reads everything written by [`write_tensors`].
pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a CBSN checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut tensors = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(tensors)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl CbsnParams<f32> {
    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        write_tensors(out, &self.tensors)
    }

    pub fn load<R: Read>(input: &mut R) -> Result<Self> {
        let tensors = read_tensors(input)?;
        let shapes: Vec<_> = tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let config = CbsnConfig::infer(&shapes)?;
        Self::from_tensors(config, tensors)
    }
}
