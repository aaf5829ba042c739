//! Prompt prefill and per-token incremental decoding.
//!
//! A full-sequence pass solves the whole triangular system at once; decoding
//! appends one row at a time. For a ChaCAL head with cached solved rows
//! Y_1..Y_t, the next output row is one forward-substitution step,
//!
//! ```text
//! y_t = (C_t - Σ_{i<t} B_{t,i}·y_i) / B_{t,t}
//! ```
//!
//! with B_{t,i} = -γ·â_i and C_t = (1-γ)·a·V over the cached values, so each
//! new token costs O(t·d) per head — the same shape as ordinary KV-cache
//! attention. Standard heads keep only K/V caches.

use super::{Model, ModelError};
use crate::attention::AttentionKind;
use crate::numcore::tensor::{self, softmax_slice};
use crate::numcore::{Real, Tape, Tensor};

struct HeadCache<R> {
    /// t×d_k keys, flat row-major.
    k: Vec<R>,
    /// t×d_v values.
    v: Vec<R>,
    /// Solved output rows, ChaCAL layers only.
    y: Option<Vec<R>>,
}

struct LayerCache<R> {
    heads: Vec<HeadCache<R>>,
}

/// Incremental decoding state: per-layer per-head caches plus the shared
/// position counter. Single-owner; one decoder per state.
pub struct DecodeState<R> {
    layers: Vec<LayerCache<R>>,
    len: usize,
    /// Sequence-length-dependent multiply-accumulates spent by the most
    /// recent decode_step (per-head attention + substitution work).
    pub macs_last_step: u64,
}

impl<R: Real> DecodeState<R> {
    /// Tokens currently cached.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn head(&mut self, layer: usize, head: usize) -> &mut HeadCache<R> {
        &mut self.layers[layer].heads[head]
    }

    /// Cached solved rows of a ChaCAL head (inspection hook).
    pub fn solved_rows(&self, layer: usize, head: usize) -> Option<(usize, &[R])> {
        self.layers[layer].heads[head]
            .y
            .as_deref()
            .map(|y| (self.len, y))
    }
}

impl<R: Real> Model<R> {
    /// Encode a prompt in one batched pass, retaining the per-layer caches
    /// needed to continue token by token. Returns the logits row of the
    /// last prompt position.
    pub fn prefill(&self, tokens: &[usize]) -> Result<(Tensor<R>, DecodeState<R>), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Config("prefill needs a non-empty prompt".into()));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let (logits, traces) = self.forward_graph(&mut tape, &vars, tokens)?;
        let t = tokens.len();

        let mut layers = Vec::with_capacity(self.config().n_layers);
        for (layer, trace) in traces.iter().enumerate() {
            let cfg = &self.config().attention[layer];
            let chacal = cfg.kind == AttentionKind::Chacal && cfg.effective_gamma() != 0.0;
            let heads = trace
                .heads
                .iter()
                .map(|h| HeadCache {
                    k: tape.value(h.k).data().to_vec(),
                    v: tape.value(h.v).data().to_vec(),
                    y: chacal.then(|| tape.value(h.y).data().to_vec()),
                })
                .collect();
            layers.push(LayerCache { heads });
        }

        #[cfg(debug_assertions)]
        for (layer, trace) in traces.iter().enumerate() {
            // cached Y rows must satisfy the prefill block equation B·Y = C
            let cfg = &self.config().attention[layer];
            let gamma = cfg.effective_gamma();
            if cfg.kind != AttentionKind::Chacal || gamma == 0.0 {
                continue;
            }
            let h = &trace.heads[0];
            let a = tape.value(h.a);
            let v = tape.value(h.v);
            let y = tape.value(h.y);
            let a_hat = if cfg.remove_diagonal {
                tensor::zero_diagonal(a).unwrap()
            } else {
                a.clone()
            };
            let b = tensor::add_scaled_identity(&a_hat, R::ONE, R::from_f64(-gamma)).unwrap();
            let c = tensor::scale(&tensor::matmul(a, v).unwrap(), R::from_f64(1.0 - gamma));
            let by = tensor::matmul(&b, y).unwrap();
            debug_assert!(
                by.max_abs_diff(&c) < 1e-3,
                "prefill cache violates B·Y = C at layer {layer}"
            );
        }

        let last_row = tensor::slice_rows(tape.value(logits), t - 1, 1).map_err(ModelError::Num)?;
        Ok((
            last_row,
            DecodeState { layers, len: t, macs_last_step: 0 },
        ))
    }

    /// Append one token and return its logits row.
    pub fn decode_step(
        &self,
        state: &mut DecodeState<R>,
        token: usize,
    ) -> Result<Tensor<R>, ModelError> {
        let cfg = self.config();
        let pos = state.len;
        if pos >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: pos + 1, max: cfg.max_seq_len });
        }
        if token >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab: cfg.vocab_size });
        }
        let d = cfg.d_model();
        state.macs_last_step = 0;

        // x = wte[token] + wpe[pos]
        let mut x = Tensor::new(
            vec![1, d],
            self.params
                .wte
                .row(token)
                .iter()
                .zip(self.params.wpe.row(pos))
                .map(|(&a, &b)| a + b)
                .collect(),
        )
        .map_err(ModelError::Num)?;

        for layer in 0..cfg.n_layers {
            let attn_cfg = cfg.attention[layer];
            let p = &self.params.blocks[layer];
            let d_k = attn_cfg.head_dim();
            let gamma = attn_cfg.effective_gamma();
            let inv_sqrt = R::from_f64(1.0 / (d_k as f64).sqrt());

            let h = tensor::layer_norm(&x, &p.ln1_gain, &p.ln1_bias).map_err(ModelError::Num)?;
            let q_full = tensor::matmul(&h, &p.attn.w_q).map_err(ModelError::Num)?;
            let k_full = tensor::matmul(&h, &p.attn.w_k).map_err(ModelError::Num)?;
            let v_full = tensor::matmul(&h, &p.attn.w_v).map_err(ModelError::Num)?;

            let mut head_out = vec![R::ZERO; d];
            let mut macs = 0u64;
            for head in 0..attn_cfg.n_heads {
                let cols = head * d_k..(head + 1) * d_k;
                let cache = state.head(layer, head);
                cache.k.extend_from_slice(&q_slice(&k_full, cols.clone()));
                cache.v.extend_from_slice(&q_slice(&v_full, cols.clone()));
                let q = q_slice(&q_full, cols.clone());
                let t1 = pos + 1; // cached rows including this token

                // attention row over all visible positions
                let mut a = vec![R::ZERO; t1];
                for (i, av) in a.iter_mut().enumerate() {
                    let krow = &cache.k[i * d_k..(i + 1) * d_k];
                    let mut acc = R::ZERO;
                    for (&qv, &kv) in q.iter().zip(krow) {
                        acc += qv * kv;
                    }
                    *av = acc * inv_sqrt;
                }
                softmax_slice(&mut a);
                macs += (t1 * d_k) as u64;

                // C row (full a) over cached values
                let mut c = vec![R::ZERO; d_k];
                for (i, &ai) in a.iter().enumerate() {
                    let vrow = &cache.v[i * d_k..(i + 1) * d_k];
                    for (o, &vv) in c.iter_mut().zip(vrow) {
                        *o += ai * vv;
                    }
                }
                macs += (t1 * d_k) as u64;

                let y_row: Vec<R> = if gamma == 0.0 {
                    c
                } else {
                    let g = R::from_f64(gamma);
                    let one_minus = R::from_f64(1.0 - gamma);
                    for o in c.iter_mut() {
                        *o *= one_minus;
                    }
                    let diag_a = if attn_cfg.remove_diagonal { R::ZERO } else { a[pos] };
                    // forward substitution: B_{t,i} = -γ·â_i for i < t
                    let ys = cache.y.as_mut().expect("chacal head keeps solved rows");
                    for (i, &ai) in a.iter().enumerate().take(pos) {
                        let coeff = g * ai;
                        if coeff == R::ZERO {
                            continue;
                        }
                        let yrow = &ys[i * d_k..(i + 1) * d_k];
                        for (o, &yv) in c.iter_mut().zip(yrow) {
                            *o += coeff * yv;
                        }
                    }
                    macs += (pos * d_k) as u64;
                    let btt = R::ONE - g * diag_a;
                    let inv = R::ONE / btt;
                    for o in c.iter_mut() {
                        *o *= inv;
                    }
                    ys.extend_from_slice(&c);
                    c
                };
                head_out[head * d_k..(head + 1) * d_k].copy_from_slice(&y_row);
            }
            state.macs_last_step += macs;

            let cat = Tensor::new(vec![1, d], head_out).map_err(ModelError::Num)?;
            let attn_out = tensor::matmul(&cat, &p.attn.w_o).map_err(ModelError::Num)?;
            x = tensor::add(&x, &attn_out).map_err(ModelError::Num)?;

            let h2 = tensor::layer_norm(&x, &p.ln2_gain, &p.ln2_bias).map_err(ModelError::Num)?;
            let up = tensor::add_row_broadcast(
                &tensor::matmul(&h2, &p.ffn_w1).map_err(ModelError::Num)?,
                &p.ffn_b1,
            )
            .map_err(ModelError::Num)?;
            let act = tensor::gelu(&up);
            let down = tensor::add_row_broadcast(
                &tensor::matmul(&act, &p.ffn_w2).map_err(ModelError::Num)?,
                &p.ffn_b2,
            )
            .map_err(ModelError::Num)?;
            x = tensor::add(&x, &down).map_err(ModelError::Num)?;
        }

        let xf = tensor::layer_norm(&x, &self.params.lnf_gain, &self.params.lnf_bias)
            .map_err(ModelError::Num)?;
        let logits = match &self.params.lm_head {
            Some(hd) => tensor::matmul_nt(&xf, hd).map_err(ModelError::Num)?,
            None => tensor::matmul_nt(&xf, &self.params.wte).map_err(ModelError::Num)?,
        };
        state.len += 1;
        Ok(logits)
    }

    /// Greedy continuation: argmax next token until the stop token or
    /// `max_new` tokens. Returns the generated ids, stop token excluded.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_new: usize,
        stop_token: Option<usize>,
    ) -> Result<Vec<usize>, ModelError> {
        let (mut logits, mut state) = self.prefill(prompt)?;
        let mut out = Vec::new();
        for _ in 0..max_new {
            let next = argmax(logits.data());
            if Some(next) == stop_token {
                break;
            }
            out.push(next);
            if state.len() >= self.config().max_seq_len {
                break;
            }
            logits = self.decode_step(&mut state, next)?;
        }
        Ok(out)
    }
}

fn q_slice<R: Real>(row: &Tensor<R>, cols: std::ops::Range<usize>) -> Vec<R> {
    row.data()[cols].to_vec()
}

/// First index of the maximum entry (deterministic tie-break).
pub fn argmax<R: Real>(values: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
