use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{invalid, Result};

/// Noisy training images, each `[1, C, H, W]`.
///
/// Training code only ever sees this type, so clean references cannot leak
/// into the objective.
#[derive(Debug, Clone)]
pub struct NoisyDataset {
    images: Vec<Tensor<f32>>,
}

impl NoisyDataset {
    pub fn new(images: Vec<Tensor<f32>>) -> Result<Self> {
        let first = images.first().ok_or_else(|| invalid!("dataset is empty"))?;
        let (_, c, _, _) = first.dims4()?;
        for img in &images {
            let (b, c2, _, _) = img.dims4()?;
            if b != 1 || c2 != c {
                return Err(invalid!(
                    "dataset images must be [1, {c}, H, W], got {:?}",
                    img.shape()
                ));
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images[0].shape()[1]
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    /// Side of the largest square patch every image can provide.
    pub fn max_patch(&self) -> usize {
        self.images
            .iter()
            .map(|t| t.shape()[2].min(t.shape()[3]))
            .min()
            .unwrap_or(0)
    }
}

/// One of the eight symmetries of the square: `rot` quarter turns
/// counter-clockwise, then an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub rot: u8,
    pub flip: bool,
}

impl Dihedral {
    pub fn all() -> impl Iterator<Item = Self> {
        (0..4u8).flat_map(|rot| [false, true].map(|flip| Self { rot, flip }))
    }

    pub fn index(self) -> usize {
        self.rot as usize * 2 + self.flip as usize
    }

    /// Applies the transform to a `[1, C, n, n]` tensor.
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = x.dims4()?;
        if h != w {
            return Err(invalid!("dihedral transforms need square patches, got {h}x{w}"));
        }
        let n = h;
        let mut out = Tensor::zeros(&[b, c, n, n]);
        for p in 0..b * c {
            for i in 0..n {
                for j in 0..n {
                    let (mut si, mut sj) = (i, j);
                    if self.flip {
                        sj = n - 1 - sj;
                    }
                    for _ in 0..self.rot {
                        // out[i][j] = in[j][n-1-i] is one counter-clockwise quarter turn
                        (si, sj) = (sj, n - 1 - si);
                    }
                    out.data_mut()[(p * n + i) * n + j] = x.data()[(p * n + si) * n + sj];
                }
            }
        }
        Ok(out)
    }
}

/// Where one batch patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub image: usize,
    pub top: usize,
    pub left: usize,
    pub transform: Dihedral,
}

/// Draws `batch` augmented `patch x patch` crops: uniform image, uniform
/// position, uniform rotation count and flip coin.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &NoisyDataset,
    batch: usize,
    patch: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<PatchOrigin>)> {
    if batch == 0 || patch == 0 {
        return Err(invalid!("batch and patch must be positive"));
    }
    if patch > dataset.max_patch() {
        return Err(invalid!(
            "patch {patch} is larger than the smallest image side {}",
            dataset.max_patch()
        ));
    }
    let mut items = Vec::with_capacity(batch);
    let mut origins = Vec::with_capacity(batch);
    for _ in 0..batch {
        let image = rng.random_range(0..dataset.len());
        let img = &dataset.images[image];
        let (_, c, h, w) = img.dims4()?;
        let top = rng.random_range(0..=h - patch);
        let left = rng.random_range(0..=w - patch);
        let transform = Dihedral {
            rot: rng.random_range(0..4),
            flip: rng.random(),
        };
        let crop = Tensor::from_fn(&[1, c, patch, patch], |k| {
            let (ch, rem) = (k / (patch * patch), k % (patch * patch));
            img.at4(0, ch, top + rem / patch, left + rem % patch)
        });
        items.push(transform.apply(&crop)?);
        origins.push(PatchOrigin {
            image,
            top,
            left,
            transform,
        });
    }
    Ok((Tensor::stack_batch(&items)?, origins))
}

/// Splits `0..n` into (train, holdout) index lists; `fraction` of the
/// items, at least one, are held out. The split depends only on `seed`.
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 || !(0.0..1.0).contains(&fraction) {
        return Err(invalid!("cannot hold out {fraction} of {n} items"));
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut holdout = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    Ok((train, holdout))
}
