//! Dataset loading, splitting and batch assembly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::DataConfig;
use crate::rawdata::io::read_dataset;
use crate::rawdata::{augment, demosaic_simple, generate_dataset, pack_bayer, SyntheticPair};
use crate::tensor::{Image, Tensor};

pub fn load_pairs(cfg: &DataConfig) -> Result<Vec<SyntheticPair>> {
    match &cfg.dir {
        Some(dir) => read_dataset(dir),
        None => generate_dataset(&cfg.synth),
    }
}

/// Index sets of the train / validation / test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded permutation of `0..n` cut by `fractions`.
    pub fn new(n: usize, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * fractions[0]).round() as usize;
        let n_val = (((n as f64) * fractions[1]).round() as usize).min(n - n_train.min(n));
        if n_train == 0 {
            return Err(Error::config(format!("training split of {n} pairs is empty")));
        }
        let test = idx.split_off((n_train + n_val).min(n));
        let val = idx.split_off(n_train);
        Ok(Self { train: idx, val, test })
    }

    /// Validation and test indices together.
    pub fn held_out(&self) -> Vec<usize> {
        self.val.iter().chain(&self.test).copied().collect()
    }
}

/// A training batch, all tensors `N×C×H×W`.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Packed raw (`N×4×H/2×W/2`).
    pub packed: Image,
    /// Demosaicked raw `x̂`.
    pub demosaicked: Image,
    /// Misaligned target `y`.
    pub target: Image,
    pub aligned_gt: Image,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Model inputs of one pair: packed raw and demosaicked raw.
pub fn model_inputs(pair: &SyntheticPair) -> Result<(Image, Image)> {
    Ok((pack_bayer(&pair.raw)?, demosaic_simple(&pair.raw)?))
}

/// Assemble a batch, cropping and augmenting each pair with draws from `rng`.
pub fn make_batch(pairs: &[SyntheticPair], indices: &[usize], cfg: &DataConfig, rng: &mut impl Rng) -> Result<Batch> {
    let mut packed = Vec::with_capacity(indices.len());
    let mut dem = Vec::with_capacity(indices.len());
    let mut target = Vec::with_capacity(indices.len());
    let mut gt = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut p = pairs
            .get(i)
            .ok_or_else(|| Error::param(format!("pair index {i} out of range")))?
            .clone();
        let (h, w) = (p.raw.height, p.raw.width);
        if let Some(c) = cfg.crop {
            if c > h || c > w {
                return Err(Error::config(format!("data.crop {c} exceeds the {h}×{w} pair")));
            }
            let y0 = 2 * rng.random_range(0..=(h - c) / 2);
            let x0 = 2 * rng.random_range(0..=(w - c) / 2);
            p = p.crop(y0, x0, c, c)?;
        } else if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::dim(format!(
                "pair {i} is {h}×{w}; set data.crop to a multiple of 16"
            )));
        }
        if cfg.augment {
            p = augment(&p, rng.random()).0;
        }
        let (pk, dm) = model_inputs(&p)?;
        packed.push(pk);
        dem.push(dm);
        target.push(p.target);
        gt.push(p.aligned_gt);
    }
    Ok(Batch {
        packed: Tensor::stack(&packed)?,
        demosaicked: Tensor::stack(&dem)?,
        target: Tensor::stack(&target)?,
        aligned_gt: Tensor::stack(&gt)?,
        indices: indices.to_vec(),
    })
}
