//! Causal multi-head attention, standard and chain-summing (ChaCAL).
//!
//! Both modes share one code path. A standard head outputs A·V with A the
//! row-stochastic causal attention matrix. A ChaCAL head treats A as the
//! adjacency matrix of a dependency graph and returns the geometric sum of
//! all attention paths,
//!
//! ```text
//! Y = (1-γ) · A (I - γÂ)⁻¹ V
//! ```
//!
//! computed as the lower-triangular system (I - γÂ)·Y = (1-γ)·A·V — never
//! through an explicit inverse. Â is A with the diagonal zeroed when
//! `remove_diagonal` is set (a token attending to itself adds nothing to a
//! path); the leading A factor and the right-hand side keep the full A.
//! With γ = 0 the head reduces to A·V bit for bit.

use serde::{Deserialize, Serialize};

use crate::numcore::tensor::{self, is_lower_triangular};
use crate::numcore::{NumError, Real, Tape, Tensor, Var, MASK_SENTINEL};

/// Attention flavor of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Standard,
    Chacal,
}

/// Per-layer attention hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub kind: AttentionKind,
    /// Path-decay weight in [0, 1); ignored (treated as 0) in standard mode.
    pub gamma: f64,
    /// Zero the diagonal of Â inside the inverse factor.
    pub remove_diagonal: bool,
}

impl AttentionConfig {
    pub fn standard(d_model: usize, n_heads: usize) -> Self {
        AttentionConfig {
            d_model,
            n_heads,
            kind: AttentionKind::Standard,
            gamma: 0.0,
            remove_diagonal: true,
        }
    }

    pub fn chacal(d_model: usize, n_heads: usize, gamma: f64) -> Self {
        AttentionConfig {
            d_model,
            n_heads,
            kind: AttentionKind::Chacal,
            gamma,
            remove_diagonal: true,
        }
    }

    /// d_k = d_v = d_model / n_heads.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// γ actually applied: standard mode pins it to 0.
    pub fn effective_gamma(&self) -> f64 {
        match self.kind {
            AttentionKind::Standard => 0.0,
            AttentionKind::Chacal => self.gamma,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err("d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            // gamma < 1 keeps I - γÂ invertible (diag >= 1 - γ > 0)
            return Err(format!("gamma {} outside [0, 1)", self.gamma));
        }
        Ok(())
    }
}

/// Fused projection weights of one attention layer: W_q, W_k, W_v hold all
/// heads side by side (head h owns columns h·d_k .. (h+1)·d_k), W_o mixes
/// the concatenated head outputs back to d_model.
#[derive(Debug, Clone)]
pub struct AttentionWeights<R> {
    pub w_q: Tensor<R>,
    pub w_k: Tensor<R>,
    pub w_v: Tensor<R>,
    pub w_o: Tensor<R>,
}

impl<R: Real> AttentionWeights<R> {
    pub fn init(d_model: usize, std: f64, out_std: f64, rng: &mut crate::rng::Rng) -> Self {
        AttentionWeights {
            w_q: Tensor::randn(vec![d_model, d_model], std, rng),
            w_k: Tensor::randn(vec![d_model, d_model], std, rng),
            w_v: Tensor::randn(vec![d_model, d_model], std, rng),
            w_o: Tensor::randn(vec![d_model, d_model], out_std, rng),
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        AttentionWeights {
            w_q: Tensor::zeros(vec![d_model, d_model]),
            w_k: Tensor::zeros(vec![d_model, d_model]),
            w_v: Tensor::zeros(vec![d_model, d_model]),
            w_o: Tensor::zeros(vec![d_model, d_model]),
        }
    }
}

/// Same weights registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionVars {
    pub fn register<R: Real>(tape: &mut Tape<R>, w: &AttentionWeights<R>) -> Self {
        AttentionVars {
            w_q: tape.leaf(w.w_q.clone()),
            w_k: tape.leaf(w.w_k.clone()),
            w_v: tape.leaf(w.w_v.clone()),
            w_o: tape.leaf(w.w_o.clone()),
        }
    }
}

/// Additive causal mask: strictly-upper entries carry the -inf sentinel.
pub fn causal_mask<R: Real>(n: usize) -> Tensor<R> {
    let sentinel = R::from_f64(MASK_SENTINEL);
    let mut m = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = sentinel;
        }
    }
    m
}

/// Per-head state captured during a full-sequence pass; the decoder caches
/// are read straight off these nodes.
#[derive(Debug, Clone, Copy)]
pub struct HeadTrace {
    /// Keys, t×d_k.
    pub k: Var,
    /// Values, t×d_v.
    pub v: Var,
    /// Row-stochastic attention matrix, t×t.
    pub a: Var,
    /// Head output, t×d_v (the solved Y for a ChaCAL head).
    pub y: Var,
}

/// Row-stochastic lower-triangular attention matrix of one head:
/// softmax((X·W_q)(X·W_k)ᵀ/√d_k + causal mask).
pub fn attention_matrix<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    w: &AttentionVars,
    head: usize,
    cfg: &AttentionConfig,
) -> Result<Var, NumError> {
    let d_k = cfg.head_dim();
    let wq = tape.slice_cols(w.w_q, head * d_k, d_k)?;
    let wk = tape.slice_cols(w.w_k, head * d_k, d_k)?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, R::from_f64(1.0 / (d_k as f64).sqrt()));
    let n = tape.value(x).rows();
    let mask = causal_mask::<R>(n);
    tape.softmax_rows(scaled, &mask)
}

/// Head output from an attention matrix and values.
///
/// Standard mode (or γ = 0) returns A·V. ChaCAL mode forms B = I - γÂ and
/// C = (1-γ)·A·V and solves B·Y = C. B is lower-triangular with diagonal
/// at least 1-γ > 0, so the solve cannot hit a singular row.
pub fn head_output<R: Real>(
    tape: &mut Tape<R>,
    a: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<Var, NumError> {
    let gamma = cfg.effective_gamma();
    if gamma == 0.0 {
        return tape.matmul(a, v);
    }
    let a_hat = if cfg.remove_diagonal {
        tape.zero_diagonal(a)?
    } else {
        a
    };
    let b = tape.add_scaled_identity(a_hat, R::ONE, R::from_f64(-gamma))?;
    debug_assert!(
        is_lower_triangular(tape.value(b)),
        "I - γÂ must stay lower-triangular"
    );
    let av = tape.matmul(a, v)?;
    let c = tape.scale(av, R::from_f64(1.0 - gamma));
    tape.solve_lower_triangular(b, c)
}

/// Full multi-head attention: per-head outputs concatenated on the feature
/// axis, then mixed by W_o. Also returns the per-head traces.
pub fn multi_head_forward<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<HeadTrace>), NumError> {
    let d_k = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut traces = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let a = attention_matrix(tape, x, w, h, cfg)?;
        let wv = tape.slice_cols(w.w_v, h * d_k, d_k)?;
        let v = tape.matmul(x, wv)?;
        let y = head_output(tape, a, v, cfg)?;
        let wk = tape.slice_cols(w.w_k, h * d_k, d_k)?;
        let k = tape.matmul(x, wk)?;
        traces.push(HeadTrace { k, v, a, y });
        heads.push(y);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, w.w_o)?;
    Ok((out, traces))
}

/// Relative residual of the fixed-point equation f(Z) = A(γZ + (1-γ)V) at
/// Z = y: ‖f(y) - y‖_∞ / (1 + ‖y‖_∞). The closed-form ChaCAL output with
/// `remove_diagonal = false` is exactly this fixed point.
pub fn fixed_point_residual<R: Real>(
    a: &Tensor<R>,
    v: &Tensor<R>,
    y: &Tensor<R>,
    gamma: f64,
) -> f64 {
    let g = R::from_f64(gamma);
    let one_minus = R::from_f64(1.0 - gamma);
    let inner = tensor::add(&tensor::scale(y, g), &tensor::scale(v, one_minus))
        .expect("fixed_point_residual: shape mismatch");
    let fy = tensor::matmul(a, &inner).expect("fixed_point_residual: shape mismatch");
    fy.max_abs_diff(y) / (1.0 + y.max_abs())
}
