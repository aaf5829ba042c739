//! Permutation-chain task.
//!
//! A sequence of n/k blocks of size k. Block 0 holds random values; every
//! later block holds a shuffled list of the absolute positions of the block
//! before it. Resolving the reference chain from a position in block b
//! takes b hops, so the deepest chains have n/k - 1 edges and a standard
//! transformer needs ⌈log₂(n/k)⌉ attention layers for the full task. The
//! training target at each reference position is the block-0 value its
//! chain bottoms out at; block 0 itself is masked out of the loss.

use serde::{Deserialize, Serialize};

use super::{Sample, SampleSource};
use crate::graphs::{ComputationGraph, GraphError};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Total sequence length.
    pub n: usize,
    /// Block size; must divide n with at least two blocks.
    pub k: usize,
    /// Master seed of the sample stream.
    pub seed: u64,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 || self.n % self.k != 0 {
            return Err(format!("block size {} must divide n {}", self.k, self.n));
        }
        if self.n / self.k < 2 {
            return Err("need at least two blocks".into());
        }
        if self.n > 128 {
            // token ids are absolute positions; the id alphabet must fit
            // the 128-entry vocabulary
            return Err(format!("n {} exceeds the 128-token alphabet", self.n));
        }
        Ok(())
    }

    /// Ids are positions and values drawn from one shared alphabet of size n.
    pub fn vocab_size(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> usize {
        self.n / self.k
    }

    /// Longest reference chain: blocks - 1 hops.
    pub fn chain_depth(&self) -> usize {
        self.blocks() - 1
    }
}

/// Generated instance. `targets[p]` for a reference position is the chain
/// endpoint value in block 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl ToySample {
    pub fn into_sample(self) -> Sample {
        Sample {
            tokens: self.tokens,
            targets: self.targets,
            loss_mask: self.loss_mask,
        }
    }
}

pub fn gen_toy_sample(cfg: &ToyConfig, rng: &mut Rng) -> ToySample {
    let (n, k) = (cfg.n, cfg.k);
    let blocks = cfg.blocks();
    let mut tokens = vec![0usize; n];
    for t in tokens.iter_mut().take(k) {
        *t = rng.below(cfg.vocab_size());
    }
    for b in 1..blocks {
        let mut refs: Vec<usize> = ((b - 1) * k..b * k).collect();
        rng.shuffle(&mut refs);
        tokens[b * k..(b + 1) * k].copy_from_slice(&refs);
    }
    // resolve chains front to back: a position in block b points into
    // block b-1, whose resolution is already known
    let mut resolved = vec![0usize; n];
    resolved[..k].copy_from_slice(&tokens[..k]);
    for p in k..n {
        resolved[p] = resolved[tokens[p]];
    }
    let loss_mask = (0..n).map(|p| p >= k).collect();
    ToySample {
        tokens,
        targets: resolved,
        loss_mask,
    }
}

/// Dependency graph of a sample: one node per position, an edge from each
/// referenced position to the position referencing it.
pub fn toy_sample_graph(cfg: &ToyConfig, sample: &ToySample) -> Result<ComputationGraph, GraphError> {
    let k = cfg.k;
    let mut edges = Vec::with_capacity(sample.tokens.len().saturating_sub(k));
    for (p, &token) in sample.tokens.iter().enumerate().skip(k) {
        let block = p / k;
        let prev_block = (block - 1) * k..block * k;
        if !prev_block.contains(&token) {
            // a reference token must be a position inside the previous block
            return Err(GraphError::EdgeNotForward { edge: (token, p) });
        }
        edges.push((token, p));
    }
    ComputationGraph::new(sample.tokens.len(), edges)
}

/// Infinite deterministic stream; fresh data at every index, so no example
/// is ever reused during training.
#[derive(Debug, Clone)]
pub struct ToyStream {
    pub cfg: ToyConfig,
}

impl SampleSource for ToyStream {
    fn sample(&self, index: u64) -> Sample {
        let mut rng = Rng::for_sample(self.cfg.seed, index);
        gen_toy_sample(&self.cfg, &mut rng).into_sample()
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size()
    }
}
