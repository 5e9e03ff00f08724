//! Online sampler for the image composition task.
//!
//! One draw: pick `g_og` uniformly from the training combinations, an action
//! `a` uniformly over factors, `g_trans` uniformly among training combinations
//! whose `a`-th level differs from `g_og`'s, and build `g_out` by copying
//! `g_trans[a]` into `g_og`. With `restrict_target_to_train` the whole triple
//! is redrawn until `g_out` is also a training combination.
//!
//! Randomness comes from `Xoshiro256PlusPlus` (xoshiro256++, state seeded by
//! SplitMix64 from a 64-bit seed). Each epoch uses its own stream, see
//! [`stream_rng`].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::dataio::write_fids;
use crate::error::{Error, Result};
use crate::factorspace::{DatasetSplit, FactorSpace, FactorSpec, FactorVector};
use crate::image::ImageSet;

pub type SamplerRng = Xoshiro256PlusPlus;

/// Consecutive rejected triples tolerated before the split is declared
/// degenerate.
pub const MAX_REJECTIONS: usize = 100_000;

/// Independent generator for `(seed, stream)`; streams index epochs or
/// workers.
pub fn stream_rng(seed: u64, stream: u64) -> SamplerRng {
    let mixed = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    Xoshiro256PlusPlus::seed_from_u64(mixed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    #[serde(default = "yes")]
    pub restrict_target_to_train: bool,
}

fn yes() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seed: 0,
            restrict_target_to_train: true,
        }
    }
}

/// One training instance. Images are referenced by flat combination index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionSample {
    pub og: usize,
    pub trans: usize,
    pub out: usize,
    pub g_og: FactorVector,
    pub g_trans: FactorVector,
    pub g_out: FactorVector,
    pub action: usize,
    pub query: Vec<f64>,
}

impl CompositionSample {
    pub fn x_og<'a>(&self, images: &'a ImageSet) -> &'a [f64] {
        images.pixels(self.og)
    }

    pub fn x_trans<'a>(&self, images: &'a ImageSet) -> &'a [f64] {
        images.pixels(self.trans)
    }

    pub fn x_out<'a>(&self, images: &'a ImageSet) -> &'a [f64] {
        images.pixels(self.out)
    }

    /// Checks the structural invariants of a sample.
    pub fn check(&self) -> std::result::Result<(), String> {
        let n = self.query.len();
        let ones = self.query.iter().filter(|&&q| q == 1.0).count();
        let zeros = self.query.iter().filter(|&&q| q == 0.0).count();
        if self.action >= n || ones != 1 || zeros != n - 1 || self.query[self.action] != 1.0 {
            return Err(format!("query {:?} is not one-hot at {}", self.query, self.action));
        }
        for i in 0..n {
            let expect = if i == self.action {
                self.g_trans.indices[i]
            } else {
                self.g_og.indices[i]
            };
            if self.g_out.indices[i] != expect {
                return Err(format!("g_out differs from the replacement rule at factor {i}"));
            }
        }
        if self.g_trans.indices[self.action] == self.g_og.indices[self.action] {
            return Err("g_trans matches g_og on the action factor".into());
        }
        Ok(())
    }
}

pub fn one_hot(n: usize, a: usize) -> Vec<f64> {
    let mut q = vec![0.0; n];
    q[a] = 1.0;
    q
}

/// Precomputed view of a split for fast sampling.
#[derive(Clone, Debug)]
pub struct CompositionSampler {
    space: FactorSpace,
    train: Vec<usize>,
    in_train: Vec<bool>,
    /// `level_counts[f][l]`: training combinations with level `l` of factor `f`.
    level_counts: Vec<Vec<usize>>,
    restrict: bool,
}

impl CompositionSampler {
    pub fn new(
        space: &FactorSpace,
        split: &DatasetSplit,
        images: &ImageSet,
        restrict_target_to_train: bool,
    ) -> Result<Self> {
        if images.len() != space.total() {
            return Err(Error::Sampler(format!(
                "{} images do not cover a space of {} combinations",
                images.len(),
                space.total()
            )));
        }
        Self::from_train(space, &split.train, restrict_target_to_train)
    }

    pub fn from_train(space: &FactorSpace, train: &[usize], restrict: bool) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Sampler("no training combinations".into()));
        }
        let mut in_train = vec![false; space.total()];
        let mut level_counts: Vec<Vec<usize>> =
            space.cardinalities().into_iter().map(|k| vec![0; k]).collect();
        for &t in train {
            if t >= space.total() {
                return Err(Error::Sampler(format!("train index {t} out of range")));
            }
            in_train[t] = true;
            for (f, &l) in space.vector(t).indices.iter().enumerate() {
                level_counts[f][l] += 1;
            }
        }
        Ok(CompositionSampler {
            space: space.clone(),
            train: train.to_vec(),
            in_train,
            level_counts,
            restrict,
        })
    }

    pub fn space(&self) -> &FactorSpace {
        &self.space
    }

    pub fn sample(&self, rng: &mut SamplerRng) -> Result<CompositionSample> {
        let n = self.space.n_factors();
        for _ in 0..MAX_REJECTIONS {
            let og = self.train[rng.random_range(0..self.train.len())];
            let g_og = self.space.vector(og);
            let a = rng.random_range(0..n);
            let same = self.level_counts[a][g_og.indices[a]];
            if same == self.train.len() {
                return Err(Error::Sampler(format!(
                    "no training combination differs from {:?} on factor {:?}",
                    g_og.indices,
                    self.space.factors()[a].name
                )));
            }
            let trans = loop {
                let t = self.train[rng.random_range(0..self.train.len())];
                if self.space.vector(t).indices[a] != g_og.indices[a] {
                    break t;
                }
            };
            let g_trans = self.space.vector(trans);
            let mut out_idx = g_og.indices.clone();
            out_idx[a] = g_trans.indices[a];
            let out = self.space.flat_index(&out_idx)?;
            if self.restrict && !self.in_train[out] {
                continue;
            }
            return Ok(CompositionSample {
                og,
                trans,
                out,
                g_out: self.space.vector(out),
                g_og,
                g_trans,
                action: a,
                query: one_hot(n, a),
            });
        }
        Err(Error::Sampler(format!(
            "{MAX_REJECTIONS} consecutive triples had targets outside the training split"
        )))
    }

    pub fn sample_batch(&self, rng: &mut SamplerRng, batch: usize) -> Result<Vec<CompositionSample>> {
        (0..batch).map(|_| self.sample(rng)).collect()
    }
}

pub fn sample_triplet(
    space: &FactorSpace,
    split: &DatasetSplit,
    images: &ImageSet,
    config: &SamplerConfig,
    rng: &mut SamplerRng,
) -> Result<CompositionSample> {
    CompositionSampler::new(space, split, images, config.restrict_target_to_train)?.sample(rng)
}

pub fn sample_batch(
    space: &FactorSpace,
    split: &DatasetSplit,
    images: &ImageSet,
    config: &SamplerConfig,
    rng: &mut SamplerRng,
    batch: usize,
) -> Result<Vec<CompositionSample>> {
    CompositionSampler::new(space, split, images, config.restrict_target_to_train)?
        .sample_batch(rng, batch)
}

#[derive(Serialize)]
struct DumpEntry<'a> {
    slot: usize,
    action: usize,
    query: &'a [f64],
    og: usize,
    trans: usize,
    out: usize,
    g_og: &'a [f64],
    g_trans: &'a [f64],
    g_out: &'a [f64],
}

/// Writes `triplets.fids` (factors `sample × role`, role in og/trans/out) and
/// `index.json` describing each sample.
pub fn dump_samples(
    dir: impl AsRef<Path>,
    samples: &[CompositionSample],
    images: &ImageSet,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    if samples.is_empty() {
        return Err(Error::Sampler("nothing to dump".into()));
    }
    let mut data = Vec::with_capacity(samples.len() * 3 * images.image_len());
    for s in samples {
        data.extend_from_slice(s.x_og(images));
        data.extend_from_slice(s.x_trans(images));
        data.extend_from_slice(s.x_out(images));
    }
    let set = ImageSet::new(images.channels, images.height, images.width, data)?;
    let space = FactorSpace::new(vec![
        FactorSpec::ordinal("sample", samples.len()),
        FactorSpec::categorical("role", ["og", "trans", "out"]),
    ])?;
    write_fids(&set, &space, dir.join("triplets.fids"))?;
    let index: Vec<DumpEntry> = samples
        .iter()
        .enumerate()
        .map(|(slot, s)| DumpEntry {
            slot,
            action: s.action,
            query: &s.query,
            og: s.og,
            trans: s.trans,
            out: s.out,
            g_og: &s.g_og.values,
            g_trans: &s.g_trans.values,
            g_out: &s.g_out.values,
        })
        .collect();
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}
