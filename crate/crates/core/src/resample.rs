//! Stride-`s` samplers used to decorrelate noise.
//!
//! All three are index gathers over `[B, C, H, W]` tensors:
//!
//! - random subsampler (RS): one uniformly drawn pixel per `s x s` cell,
//!   recorded in an [`IndexMap`] so the same positions can be taken from
//!   another tensor of the same shape;
//! - pixel-shuffle downsampling (PD): the `s^2` phase subimages tiled into an
//!   `s x s` mosaic, phase `(p, q)` in block row `p`, block column `q`;
//! - space-to-batch (S2B): phase `(p, q)` of image `b` becomes batch item
//!   `b * s^2 + s * p + q`.
//!
//! A [`Resampling`] is the gather as data, which lets losses apply the same
//! selection on a tape.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};

/// Which sampler a loss term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsampler {
    Rs,
    S2b,
    Pd,
}

impl fmt::Display for Downsampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Downsampler::Rs => "rs",
            Downsampler::S2b => "s2b",
            Downsampler::Pd => "pd",
        })
    }
}

impl FromStr for Downsampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Self::Rs),
            "s2b" => Ok(Self::S2b),
            "pd" => Ok(Self::Pd),
            other => Err(Error::Config(format!("unknown downsampler {other:?}"))),
        }
    }
}

fn check_stride(shape: &[usize], s: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = match *shape {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(shape_err!("expected [B, C, H, W], got {:?}", shape)),
    };
    if s == 0 {
        return Err(invalid!("stride must be positive"));
    }
    if h % s != 0 || w % s != 0 {
        return Err(invalid!("stride {s} does not divide {h}x{w}"));
    }
    Ok((b, c, h, w))
}

/// Per-cell pixel choice of a random subsampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    stride: usize,
    grid_h: usize,
    grid_w: usize,
    offsets: Vec<(usize, usize)>,
}

impl IndexMap {
    /// Independent uniform offsets in `{0..s}^2` for every cell of an `h x w` image.
    pub fn random<R: Rng + ?Sized>(h: usize, w: usize, s: usize, rng: &mut R) -> Result<Self> {
        check_stride(&[1, 1, h, w], s)?;
        let (gh, gw) = (h / s, w / s);
        let offsets = (0..gh * gw)
            .map(|_| (rng.random_range(0..s), rng.random_range(0..s)))
            .collect();
        Ok(Self {
            stride: s,
            grid_h: gh,
            grid_w: gw,
            offsets,
        })
    }

    /// Offsets as `(dy, dx)`, row-major over cells.
    pub fn from_offsets(
        stride: usize,
        grid_h: usize,
        grid_w: usize,
        offsets: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if stride == 0 || offsets.len() != grid_h * grid_w {
            return Err(invalid!(
                "{} offsets for a {}x{} grid with stride {}",
                offsets.len(),
                grid_h,
                grid_w,
                stride
            ));
        }
        if offsets.iter().any(|&(dy, dx)| dy >= stride || dx >= stride) {
            return Err(invalid!("offset outside its {stride}x{stride} cell"));
        }
        Ok(Self {
            stride,
            grid_h,
            grid_w,
            offsets,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    /// Gather plan taking the mapped pixels from every batch item and channel of `shape`.
    pub fn plan(&self, shape: &[usize]) -> Result<Resampling> {
        let (b, c, h, w) = check_stride(shape, self.stride)?;
        if (h / self.stride, w / self.stride) != (self.grid_h, self.grid_w) {
            return Err(shape_err!(
                "index map grid {}x{} does not fit {}x{} with stride {}",
                self.grid_h,
                self.grid_w,
                h,
                w,
                self.stride
            ));
        }
        let s = self.stride;
        let mut index = Vec::with_capacity(b * c * self.offsets.len());
        for plane in 0..b * c {
            for gi in 0..self.grid_h {
                for gj in 0..self.grid_w {
                    let (dy, dx) = self.offsets[gi * self.grid_w + gj];
                    index.push(plane * h * w + (s * gi + dy) * w + s * gj + dx);
                }
            }
        }
        Ok(Resampling::new(shape, &[b, c, self.grid_h, self.grid_w], index))
    }
}

/// A fixed gather from tensors of `in_shape` to tensors of `out_shape`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resampling {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    index: Arc<[usize]>,
}

impl Resampling {
    fn new(in_shape: &[usize], out_shape: &[usize], index: Vec<usize>) -> Self {
        Self {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            index: index.into(),
        }
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(shape_err!("resampling expects {:?}, got {:?}", self.in_shape, x.shape()));
        }
        let data = self.index.iter().map(|&i| x.data()[i]).collect();
        Tensor::new(&self.out_shape, data)
    }

    /// Differentiable version of [`apply`](Self::apply).
    pub fn apply_var<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if tape.value(x).shape() != self.in_shape.as_slice() {
            return Err(shape_err!(
                "resampling expects {:?}, got {:?}",
                self.in_shape,
                tape.value(x).shape()
            ));
        }
        tape.gather(x, self.index.clone(), &self.out_shape)
    }

    /// Inverse gather, available when the plan is a permutation.
    pub fn inverse(&self) -> Result<Self> {
        let n = self.index.len();
        if n != self.in_shape.iter().product::<usize>() {
            return Err(invalid!("resampling is not a permutation"));
        }
        let mut inv = vec![usize::MAX; n];
        for (o, &i) in self.index.iter().enumerate() {
            if inv[i] != usize::MAX {
                return Err(invalid!("resampling is not a permutation"));
            }
            inv[i] = o;
        }
        Ok(Self::new(&self.out_shape, &self.in_shape, inv))
    }
}

/// Gather plan for [`pd_down`].
pub fn pd_down_plan(shape: &[usize], s: usize) -> Result<Resampling> {
    let (b, c, h, w) = check_stride(shape, s)?;
    let (sh, sw) = (h / s, w / s);
    let mut index = vec![0; b * c * h * w];
    for plane in 0..b * c {
        let base = plane * h * w;
        for p in 0..s {
            for q in 0..s {
                for i in 0..sh {
                    for j in 0..sw {
                        let out = base + (p * sh + i) * w + q * sw + j;
                        index[out] = base + (s * i + p) * w + s * j + q;
                    }
                }
            }
        }
    }
    Ok(Resampling::new(shape, shape, index))
}

/// Gather plan for [`s2b`].
pub fn s2b_plan(shape: &[usize], s: usize) -> Result<Resampling> {
    let (b, c, h, w) = check_stride(shape, s)?;
    let (sh, sw) = (h / s, w / s);
    let mut index = Vec::with_capacity(b * c * h * w);
    for n in 0..b {
        for p in 0..s {
            for q in 0..s {
                for ch in 0..c {
                    let base = (n * c + ch) * h * w;
                    for i in 0..sh {
                        for j in 0..sw {
                            index.push(base + (s * i + p) * w + s * j + q);
                        }
                    }
                }
            }
        }
    }
    Ok(Resampling::new(shape, &[b * s * s, c, sh, sw], index))
}

/// Random subsample with a freshly drawn map shared across batch and channels.
pub fn random_subsample<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    s: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, IndexMap)> {
    let (_, _, h, w) = check_stride(x.shape(), s)?;
    let map = IndexMap::random(h, w, s, rng)?;
    let y = subsample_with_map(x, &map)?;
    Ok((y, map))
}

pub fn subsample_with_map<T: Scalar>(x: &Tensor<T>, map: &IndexMap) -> Result<Tensor<T>> {
    map.plan(x.shape())?.apply(x)
}

/// Pixel-shuffle mosaic of the `s^2` phase subimages; same shape as `x`.
pub fn pd_down<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    pd_down_plan(x.shape(), s)?.apply(x)
}

pub fn pd_up<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    pd_down_plan(x.shape(), s)?.inverse()?.apply(x)
}

/// `[B, C, H, W] -> [B s^2, C, H/s, W/s]`.
pub fn s2b<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    s2b_plan(x.shape(), s)?.apply(x)
}

/// Inverse of [`s2b`]: `[B s^2, C, h, w] -> [B, C, h s, w s]`.
pub fn b2s<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (bs, c, h, w) = x.dims4()?;
    if s == 0 || bs % (s * s) != 0 {
        return Err(invalid!("batch {bs} is not a multiple of {s}^2"));
    }
    s2b_plan(&[bs / (s * s), c, h * s, w * s], s)?
        .inverse()?
        .apply(x)
}

/// Pearson correlation of one spatial offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub offset: (isize, isize),
    pub r: f64,
    /// One side of the pairing had zero variance; `r` is reported as 0.
    pub degenerate: bool,
    pub pairs: usize,
}

/// Correlation between `x[i, j]` and `x[i + dy, j + dx]` pooled over all planes.
pub fn autocorrelation<T: Scalar>(
    x: &Tensor<T>,
    offsets: &[(isize, isize)],
) -> Result<Vec<Correlation>> {
    let (b, c, h, w) = x.dims4()?;
    offsets
        .iter()
        .map(|&(dy, dx)| {
            if dy.unsigned_abs() >= h || dx.unsigned_abs() >= w {
                return Err(invalid!("offset ({dy}, {dx}) exceeds {h}x{w}"));
            }
            let (i0, i1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy) as usize);
            let (j0, j1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
            let pairs = || {
                (0..b * c).flat_map(move |plane| {
                    (i0..i1).flat_map(move |i| {
                        (j0..j1).map(move |j| {
                            let a = x.data()[(plane * h + i) * w + j].as_f64();
                            let si = (i as isize + dy) as usize;
                            let sj = (j as isize + dx) as usize;
                            (a, x.data()[(plane * h + si) * w + sj].as_f64())
                        })
                    })
                })
            };
            let n = (b * c * (i1 - i0) * (j1 - j0)) as f64;
            let (sa, sb) = pairs().fold((0.0, 0.0), |(sa, sb), (a, v)| (sa + a, sb + v));
            let (ma, mb) = (sa / n, sb / n);
            let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
            for (a, v) in pairs() {
                cov += (a - ma) * (v - mb);
                va += (a - ma) * (a - ma);
                vb += (v - mb) * (v - mb);
            }
            let degenerate = va == 0.0 || vb == 0.0;
            let r = if degenerate { 0.0 } else { cov / (va * vb).sqrt() };
            Ok(Correlation {
                offset: (dy, dx),
                r,
                degenerate,
                pairs: n as usize,
            })
        })
        .collect()
}
