//! GPT-2-style decoder stack with per-layer attention selection.
//!
//! Pre-norm residual blocks (x + attn(LN(x)), then + FFN(LN(·)) with GELU),
//! learned positional embeddings, tied input/output embeddings. Any layer
//! can run standard or chain-summing attention; a ChaCAL layer adds no
//! parameters over a standard one of the same dimensions.

pub mod checkpoint;
pub mod decode;

use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_forward, AttentionConfig, AttentionKind, AttentionVars, AttentionWeights, HeadTrace,
};
use crate::numcore::{NumError, Real, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug)]
pub enum ModelError {
    Num(NumError),
    Config(String),
    TokenOutOfRange { id: usize, vocab: usize },
    SequenceTooLong { len: usize, max: usize },
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::Num(e) => write!(f, "{e}"),
            ModelError::Config(m) => write!(f, "model config: {m}"),
            ModelError::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of {vocab}")
            }
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
        }
    }
}

impl std::error::Error for ModelError {}

impl From<NumError> for ModelError {
    fn from(e: NumError) -> Self {
        ModelError::Num(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// One attention config per layer; d_model must agree across layers.
    pub attention: Vec<AttentionConfig>,
    pub d_inner: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Uniform stack of one attention kind.
    pub fn uniform(
        kind: AttentionKind,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_inner: usize,
        vocab_size: usize,
        max_seq_len: usize,
        gamma: f64,
    ) -> Self {
        let layer = match kind {
            AttentionKind::Standard => AttentionConfig::standard(d_model, n_heads),
            AttentionKind::Chacal => AttentionConfig::chacal(d_model, n_heads, gamma),
        };
        ModelConfig {
            n_layers,
            attention: vec![layer; n_layers],
            d_inner,
            vocab_size,
            max_seq_len,
            tie_embeddings: true,
        }
    }

    /// Standard layer first, ChaCAL layers after (the boxes-task stack:
    /// parse sentences, then chain states).
    pub fn standard_then_chacal(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_inner: usize,
        vocab_size: usize,
        max_seq_len: usize,
        gamma: f64,
    ) -> Self {
        let mut cfg = Self::uniform(
            AttentionKind::Chacal,
            n_layers,
            d_model,
            n_heads,
            d_inner,
            vocab_size,
            max_seq_len,
            gamma,
        );
        cfg.attention[0] = AttentionConfig::standard(d_model, n_heads);
        cfg
    }

    pub fn d_model(&self) -> usize {
        self.attention.first().map(|a| a.d_model).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.attention.len() != self.n_layers {
            return Err(ModelError::Config(format!(
                "{} attention configs for {} layers",
                self.attention.len(),
                self.n_layers
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(ModelError::Config("vocab_size and max_seq_len must be positive".into()));
        }
        let d = self.d_model();
        for (i, a) in self.attention.iter().enumerate() {
            a.validate().map_err(|m| ModelError::Config(format!("layer {i}: {m}")))?;
            if a.d_model != d {
                return Err(ModelError::Config(format!(
                    "layer {i} d_model {} differs from layer 0 ({d})",
                    a.d_model
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockParams<R> {
    pub ln1_gain: Tensor<R>,
    pub ln1_bias: Tensor<R>,
    pub attn: AttentionWeights<R>,
    pub ln2_gain: Tensor<R>,
    pub ln2_bias: Tensor<R>,
    pub ffn_w1: Tensor<R>,
    pub ffn_b1: Tensor<R>,
    pub ffn_w2: Tensor<R>,
    pub ffn_b2: Tensor<R>,
}

#[derive(Debug, Clone)]
pub(crate) struct Params<R> {
    pub wte: Tensor<R>,
    pub wpe: Tensor<R>,
    pub blocks: Vec<BlockParams<R>>,
    pub lnf_gain: Tensor<R>,
    pub lnf_bias: Tensor<R>,
    /// Untied output projection (vocab × d_model); None when tied.
    pub lm_head: Option<Tensor<R>>,
}

impl<R: Real> Params<R> {
    /// Visit every parameter with its checkpoint name, in a fixed order
    /// shared by the optimizer, the checkpoint format, and tape
    /// registration.
    pub fn for_each(&self, mut f: impl FnMut(String, &Tensor<R>)) {
        f("wte".into(), &self.wte);
        f("wpe".into(), &self.wpe);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("block{i}.ln1.gain"), &b.ln1_gain);
            f(format!("block{i}.ln1.bias"), &b.ln1_bias);
            f(format!("block{i}.attn.w_q"), &b.attn.w_q);
            f(format!("block{i}.attn.w_k"), &b.attn.w_k);
            f(format!("block{i}.attn.w_v"), &b.attn.w_v);
            f(format!("block{i}.attn.w_o"), &b.attn.w_o);
            f(format!("block{i}.ln2.gain"), &b.ln2_gain);
            f(format!("block{i}.ln2.bias"), &b.ln2_bias);
            f(format!("block{i}.ffn.w1"), &b.ffn_w1);
            f(format!("block{i}.ffn.b1"), &b.ffn_b1);
            f(format!("block{i}.ffn.w2"), &b.ffn_w2);
            f(format!("block{i}.ffn.b2"), &b.ffn_b2);
        }
        f("ln_f.gain".into(), &self.lnf_gain);
        f("ln_f.bias".into(), &self.lnf_bias);
        if let Some(h) = &self.lm_head {
            f("lm_head".into(), h);
        }
    }

    /// Mutable references to every parameter, in `for_each` order.
    pub fn collect_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v: Vec<&mut Tensor<R>> = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            v.push(&mut b.ln1_gain);
            v.push(&mut b.ln1_bias);
            v.push(&mut b.attn.w_q);
            v.push(&mut b.attn.w_k);
            v.push(&mut b.attn.w_v);
            v.push(&mut b.attn.w_o);
            v.push(&mut b.ln2_gain);
            v.push(&mut b.ln2_bias);
            v.push(&mut b.ffn_w1);
            v.push(&mut b.ffn_b1);
            v.push(&mut b.ffn_w2);
            v.push(&mut b.ffn_b2);
        }
        v.push(&mut self.lnf_gain);
        v.push(&mut self.lnf_bias);
        if let Some(h) = &mut self.lm_head {
            v.push(h);
        }
        v
    }
}

/// One block's parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub attn: AttentionVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// All model parameters registered on a tape, in `Params::for_each` order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub(crate) wte: Var,
    pub(crate) wpe: Var,
    pub(crate) blocks: Vec<BlockVars>,
    pub(crate) lnf_gain: Var,
    pub(crate) lnf_bias: Var,
    pub(crate) lm_head: Option<Var>,
}

impl ModelVars {
    /// Parameter vars in the canonical order (aligned with
    /// `Params::for_each` and `Params::collect_mut`).
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = vec![self.wte, self.wpe];
        for b in &self.blocks {
            v.extend([
                b.ln1_gain, b.ln1_bias, b.attn.w_q, b.attn.w_k, b.attn.w_v, b.attn.w_o,
                b.ln2_gain, b.ln2_bias, b.ffn_w1, b.ffn_b1, b.ffn_w2, b.ffn_b2,
            ]);
        }
        v.push(self.lnf_gain);
        v.push(self.lnf_bias);
        if let Some(h) = self.lm_head {
            v.push(h);
        }
        v
    }
}

/// Per-layer attention internals captured during a full-sequence pass.
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
}

pub struct Model<R: Real> {
    cfg: ModelConfig,
    pub(crate) params: Params<R>,
}

const INIT_STD: f64 = 0.02;

impl<R: Real> Model<R> {
    /// GPT-2-style initialization: normal(0, 0.02) everywhere, residual
    /// output projections scaled down by 1/sqrt(2·n_layers).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d = cfg.d_model();
        let out_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gain: Tensor::full(vec![d], R::ONE),
                ln1_bias: Tensor::zeros(vec![d]),
                attn: AttentionWeights {
                    w_q: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                    w_k: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                    w_v: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                    w_o: Tensor::randn(vec![d, d], out_std, &mut rng),
                },
                ln2_gain: Tensor::full(vec![d], R::ONE),
                ln2_bias: Tensor::zeros(vec![d]),
                ffn_w1: Tensor::randn(vec![d, cfg.d_inner], INIT_STD, &mut rng),
                ffn_b1: Tensor::zeros(vec![cfg.d_inner]),
                ffn_w2: Tensor::randn(vec![cfg.d_inner, d], out_std, &mut rng),
                ffn_b2: Tensor::zeros(vec![d]),
            })
            .collect();
        let params = Params {
            wte: Tensor::randn(vec![cfg.vocab_size, d], INIT_STD, &mut rng),
            wpe: Tensor::randn(vec![cfg.max_seq_len, d], INIT_STD, &mut rng),
            blocks,
            lnf_gain: Tensor::full(vec![d], R::ONE),
            lnf_bias: Tensor::zeros(vec![d]),
            lm_head: if cfg.tie_embeddings {
                None
            } else {
                Some(Tensor::randn(vec![cfg.vocab_size, d], INIT_STD, &mut rng))
            },
        };
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.params.for_each(|_, t| n += t.numel());
        n
    }

    pub fn for_each_param(&self, f: impl FnMut(String, &Tensor<R>)) {
        self.params.for_each(f)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.params.collect_mut()
    }

    /// Register every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape<R>) -> ModelVars {
        let wte = tape.leaf(self.params.wte.clone());
        let wpe = tape.leaf(self.params.wpe.clone());
        let blocks = self
            .params
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_gain: tape.leaf(b.ln1_gain.clone()),
                ln1_bias: tape.leaf(b.ln1_bias.clone()),
                attn: AttentionVars::register(tape, &b.attn),
                ln2_gain: tape.leaf(b.ln2_gain.clone()),
                ln2_bias: tape.leaf(b.ln2_bias.clone()),
                ffn_w1: tape.leaf(b.ffn_w1.clone()),
                ffn_b1: tape.leaf(b.ffn_b1.clone()),
                ffn_w2: tape.leaf(b.ffn_w2.clone()),
                ffn_b2: tape.leaf(b.ffn_b2.clone()),
            })
            .collect();
        ModelVars {
            wte,
            wpe,
            blocks,
            lnf_gain: tape.leaf(self.params.lnf_gain.clone()),
            lnf_bias: tape.leaf(self.params.lnf_bias.clone()),
            lm_head: self.params.lm_head.as_ref().map(|h| tape.leaf(h.clone())),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.len() > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.cfg.vocab_size });
        }
        Ok(())
    }

    /// Pre-norm residual block on the tape.
    pub(crate) fn block_graph(
        &self,
        tape: &mut Tape<R>,
        x: Var,
        vars: &BlockVars,
        layer: usize,
    ) -> Result<(Var, LayerTrace), NumError> {
        let attn_cfg = &self.cfg.attention[layer];
        let h = tape.layer_norm(x, vars.ln1_gain, vars.ln1_bias)?;
        let (attn_out, heads) = multi_head_forward(tape, h, &vars.attn, attn_cfg)?;
        let x = tape.add(x, attn_out)?;
        let h2 = tape.layer_norm(x, vars.ln2_gain, vars.ln2_bias)?;
        let up = tape.linear(h2, vars.ffn_w1, vars.ffn_b1)?;
        let act = tape.gelu(up);
        let down = tape.linear(act, vars.ffn_w2, vars.ffn_b2)?;
        let out = tape.add(x, down)?;
        Ok((out, LayerTrace { heads }))
    }

    /// Full forward on an existing tape; returns logits and per-layer
    /// attention traces.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<R>,
        vars: &ModelVars,
        tokens: &[usize],
    ) -> Result<(Var, Vec<LayerTrace>), ModelError> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let tok_emb = tape.embedding(vars.wte, tokens)?;
        let pos_emb = tape.slice_rows(vars.wpe, 0, n)?;
        let mut x = tape.add(tok_emb, pos_emb)?;
        let mut traces = Vec::with_capacity(self.cfg.n_layers);
        for (layer, bvars) in vars.blocks.clone().iter().enumerate() {
            let (nx, trace) = self.block_graph(tape, x, bvars, layer)?;
            x = nx;
            traces.push(trace);
        }
        let xf = tape.layer_norm(x, vars.lnf_gain, vars.lnf_bias)?;
        let logits = match vars.lm_head {
            Some(h) => tape.matmul_nt(xf, h)?,
            None => tape.matmul_nt(xf, vars.wte)?,
        };
        Ok((logits, traces))
    }

    /// Batched forward; returns the full logits matrix.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<R>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let (logits, _) = self.forward_graph(&mut tape, &vars, tokens)?;
        Ok(tape.value(logits).clone())
    }

    /// One residual block applied to a raw activation matrix (inspection
    /// and testing hook).
    pub fn block_forward(&self, x: &Tensor<R>, layer: usize) -> Result<Tensor<R>, ModelError> {
        if x.rows() > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: x.rows(), max: self.cfg.max_seq_len });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let (out, _) = self.block_graph(&mut tape, xv, &vars.blocks[layer], layer)?;
        Ok(tape.value(out).clone())
    }

    /// Masked-loss graph for one sample: forward plus cross entropy.
    pub fn loss_graph(
        &self,
        tape: &mut Tape<R>,
        vars: &ModelVars,
        tokens: &[usize],
        targets: &[usize],
        loss_mask: &[bool],
    ) -> Result<Var, ModelError> {
        let (logits, _) = self.forward_graph(tape, vars, tokens)?;
        Ok(tape.cross_entropy(logits, targets, loss_mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_difference_gradient, max_relative_error};

    fn tiny_cfg(kind: AttentionKind, n_layers: usize) -> ModelConfig {
        ModelConfig::uniform(kind, n_layers, 8, 2, 16, 11, 32, 0.9)
    }

    #[test]
    fn param_names_align_with_collect_mut() {
        let mut model: Model<f32> = Model::init(tiny_cfg(AttentionKind::Chacal, 2), 0).unwrap();
        let mut names = Vec::new();
        model.params.for_each(|n, _| names.push(n));
        assert_eq!(names.len(), model.params.collect_mut().len());
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        assert_eq!(vars.ordered().len(), names.len());
    }

    #[test]
    fn registered_vars_hold_the_same_values_in_order() {
        let model: Model<f32> = Model::init(tiny_cfg(AttentionKind::Chacal, 2), 1).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let ordered = vars.ordered();
        let mut idx = 0;
        model.params.for_each(|name, t| {
            assert_eq!(tape.value(ordered[idx]), t, "{name}");
            idx += 1;
        });
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let mut model: Model<f64> = Model::init(tiny_cfg(AttentionKind::Standard, 1), 2).unwrap();
        model.params.blocks[0].attn.w_o = Tensor::zeros(vec![8, 8]);
        model.params.blocks[0].ffn_w2 = Tensor::zeros(vec![16, 8]);
        model.params.blocks[0].ffn_b2 = Tensor::zeros(vec![8]);
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = Tensor::uniform(vec![5, 8], -1.0, 1.0, &mut rng);
        let y = model.block_forward(&x, 0).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn block_preserves_shape() {
        let model: Model<f32> = Model::init(tiny_cfg(AttentionKind::Chacal, 1), 4).unwrap();
        for n in [1usize, 7, 32] {
            let mut rng = Rng::new(n as u64);
            let x: Tensor<f32> = Tensor::uniform(vec![n, 8], -1.0, 1.0, &mut rng);
            assert_eq!(model.block_forward(&x, 0).unwrap().shape(), &[n, 8]);
        }
    }

    #[test]
    fn forward_single_token_and_finite_logits() {
        let model: Model<f32> = Model::init(tiny_cfg(AttentionKind::Chacal, 2), 5).unwrap();
        let logits = model.forward(&[3]).unwrap();
        assert_eq!(logits.shape(), &[1, 11]);
        let logits = model.forward(&[0, 5, 10, 2, 7]).unwrap();
        assert_eq!(logits.shape(), &[5, 11]);
        assert!(logits.all_finite());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model: Model<f32> = Model::init(tiny_cfg(AttentionKind::Standard, 1), 6).unwrap();
        assert!(matches!(
            model.forward(&[11]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        let long = vec![0usize; 33];
        assert!(matches!(
            model.forward(&long),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn one_standard_block_gradient_check() {
        // gradient through a whole standard block wrt its input
        let model: Model<f64> = Model::init(tiny_cfg(AttentionKind::Standard, 1), 7).unwrap();
        let mut rng = Rng::new(8);
        let x0: Tensor<f64> = Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng);
        let probe: Tensor<f64> = Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut rng);

        let run = |x0: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let x = tape.leaf(x0.clone());
            let p = tape.constant(probe.clone());
            let (out, _) = model.block_graph(&mut tape, x, &vars.blocks[0], 0).unwrap();
            let weighted = tape.mul(out, p).unwrap();
            let loss = tape.sum_all(weighted);
            tape.backward(loss).unwrap();
            (tape.value(loss).item(), tape.grad(x).unwrap().clone())
        };
        let (_, analytic) = run(&x0);
        let numeric = finite_difference_gradient(|v| run(v).0, &x0, 1e-6);
        assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn chacal_layer_adds_no_parameters() {
        let std: Model<f32> = Model::init(tiny_cfg(AttentionKind::Standard, 3), 9).unwrap();
        let cha: Model<f32> = Model::init(tiny_cfg(AttentionKind::Chacal, 3), 9).unwrap();
        assert_eq!(std.param_count(), cha.param_count());
    }

    #[test]
    fn table_scale_parameter_counts() {
        // 1..5 layers at d_model 512, d_inner 2048, vocab 128, seq 128:
        // reported sizes 3.3M / 6.4M / 9.6M / 12.7M / 15.9M
        let reported = [3.3e6, 6.4e6, 9.6e6, 12.7e6, 15.9e6];
        for (i, &want) in reported.iter().enumerate() {
            let cfg = ModelConfig::uniform(
                AttentionKind::Standard,
                i + 1,
                512,
                8,
                2048,
                128,
                128,
                0.0,
            );
            let model: Model<f32> = Model::init(cfg, 0).unwrap();
            let got = model.param_count() as f64;
            assert!(
                (got - want).abs() / want < 0.02,
                "L={}: {} vs {}",
                i + 1,
                got,
                want
            );
        }
    }

    #[test]
    fn mixed_stack_config_layout() {
        let cfg = ModelConfig::standard_then_chacal(2, 8, 2, 16, 11, 32, 0.9);
        assert_eq!(cfg.attention[0].kind, AttentionKind::Standard);
        assert_eq!(cfg.attention[1].kind, AttentionKind::Chacal);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_validation_rejects_mismatches() {
        let mut cfg = tiny_cfg(AttentionKind::Standard, 2);
        cfg.attention.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(AttentionKind::Chacal, 2);
        cfg.attention[1].d_model = 16;
        assert!(cfg.validate().is_err());
    }
}
