//! Toy decoder-only transformer with grouped-query attention, rotary position
//! embeddings, causal masking, and incremental KV-cache decoding.
//!
//! The base weights are always frozen constants; adapters inject additive
//! deltas at the projection outputs. Value/key deltas are applied before RoPE
//! and before any cache write, so adapted values persist into decoding.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterSet, PathKind};
use crate::tensor::{causal_mask, Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid token layout: {0}")]
    Layout(String),
    #[error("layout length {layout} does not match sequence length {seq}")]
    LayoutMismatch { layout: usize, seq: usize },
    #[error("position {position} exceeds max_seq {max_seq}")]
    Capacity { position: usize, max_seq: usize },
    #[error("query head {head} out of range (h_q = {bound})")]
    HeadOutOfRange { head: usize, bound: usize },
    #[error("token id {token} out of vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Transformer geometry. `h_q` query heads share `h_kv` key/value heads in
/// groups of `g`, and the hidden width factors exactly into query heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub d_head: usize,
    pub h_q: usize,
    pub h_kv: usize,
    pub g: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Default desk-scale geometry: small enough for finite-difference
    /// checks, structurally faithful to grouped-query attention.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            d_hidden: 64,
            d_head: 8,
            h_q: 8,
            h_kv: 2,
            g: 4,
            n_layers: 4,
            vocab: 64,
            rope_base: 10000.0,
            max_seq: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_hidden", self.d_hidden),
            ("d_head", self.d_head),
            ("h_q", self.h_q),
            ("h_kv", self.h_kv),
            ("g", self.g),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.h_q != self.g * self.h_kv {
            return Err(ModelError::Config(format!(
                "h_q ({}) must equal g * h_kv ({} * {})",
                self.h_q, self.g, self.h_kv
            )));
        }
        if self.d_hidden != self.h_q * self.d_head {
            return Err(ModelError::Config(format!(
                "d_hidden ({}) must equal h_q * d_head ({} * {})",
                self.d_hidden, self.h_q, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(ModelError::Config("d_head must be even for rotary embedding".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(ModelError::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    /// KV head addressed by a query head: floor(h_q / g).
    pub fn kv_head_for(&self, query_head: usize) -> Result<usize> {
        if query_head >= self.h_q {
            return Err(ModelError::HeadOutOfRange {
                head: query_head,
                bound: self.h_q,
            });
        }
        Ok(query_head / self.g)
    }

    /// Query heads tied to one KV head.
    pub fn query_heads_of(&self, kv_head: usize) -> Range<usize> {
        kv_head * self.g..(kv_head + 1) * self.g
    }

    pub fn kv_width(&self) -> usize {
        self.h_kv * self.d_head
    }

    pub fn q_width(&self) -> usize {
        self.h_q * self.d_head
    }

    pub fn d_ff(&self) -> usize {
        2 * self.d_hidden
    }
}

/// Contiguous run of visual tokens, delimited by marker positions. The
/// visual tokens themselves sit strictly between the two markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualSpan {
    pub start_marker: usize,
    pub end_marker: usize,
}

impl VisualSpan {
    pub fn tokens(&self) -> Range<usize> {
        self.start_marker + 1..self.end_marker
    }
}

/// Positional layout of a token sequence: total length plus the optional
/// visual span. Text indices are the complement of the visual tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenLayout {
    pub len: usize,
    pub visual: Option<VisualSpan>,
}

impl TokenLayout {
    pub fn pure_text(len: usize) -> TokenLayout {
        TokenLayout { len, visual: None }
    }

    pub fn with_span(len: usize, start_marker: usize, end_marker: usize) -> Result<TokenLayout> {
        let layout = TokenLayout {
            len,
            visual: Some(VisualSpan {
                start_marker,
                end_marker,
            }),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(span) = &self.visual {
            if span.end_marker >= self.len {
                return Err(ModelError::Layout(format!(
                    "end marker {} outside sequence of length {}",
                    span.end_marker, self.len
                )));
            }
            if span.end_marker <= span.start_marker + 1 {
                return Err(ModelError::Layout(format!(
                    "visual span between markers {} and {} is empty",
                    span.start_marker, span.end_marker
                )));
            }
        }
        Ok(())
    }

    pub fn visual_range(&self) -> Option<Range<usize>> {
        self.visual.map(|s| s.tokens())
    }

    pub fn visual_len(&self) -> usize {
        self.visual_range().map_or(0, |r| r.len())
    }

    pub fn contains_visual(&self, pos: usize) -> bool {
        self.visual_range().is_some_and(|r| r.contains(&pos))
    }

    pub fn text_indices(&self) -> Vec<usize> {
        (0..self.len).filter(|p| !self.contains_visual(*p)).collect()
    }
}

/// Perturbation paths for the single-layer projection-selectivity probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbePath {
    /// Added to the query projection rows of the visual span (pre-RoPE).
    Query,
    /// Added to the value projection rows of the visual span.
    Value,
    /// Added to the per-position attention output rows (pre-output matrix).
    Output,
}

/// Additive perturbation on the visual-span rows of one attention sublayer.
pub struct SpanPerturbation<E: Element> {
    pub path: ProbePath,
    pub delta: Tensor<E>,
}

pub struct LayerWeights<E: Element> {
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
    pub w_in: Tensor<E>,
    pub w_gate: Tensor<E>,
    pub w_out: Tensor<E>,
}

const RMS_EPS: f64 = 1e-6;

/// The frozen base model.
pub struct Model<E: Element = f64> {
    pub cfg: ModelConfig,
    pub embed: Tensor<E>,
    pub unembed: Tensor<E>,
    pub layers: Vec<LayerWeights<E>>,
}

impl<E: Element> Model<E> {
    /// Scaled-Gaussian initialization; residual branches are damped by the
    /// layer count so activations stay O(1) through the stack.
    pub fn init<R: rand::Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Model<E>> {
        cfg.validate()?;
        let d = cfg.d_hidden;
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = 1.0 / ((d as f64).sqrt() * (2.0 * cfg.n_layers as f64).sqrt());
        let ff_resid_std = 1.0 / ((cfg.d_ff() as f64).sqrt() * (2.0 * cfg.n_layers as f64).sqrt());
        let embed = Tensor::randn(rng, &[cfg.vocab, d], 1.0);
        let unembed = Tensor::randn(rng, &[d, cfg.vocab], proj_std);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                w_q: Tensor::randn(rng, &[d, cfg.q_width()], proj_std),
                w_k: Tensor::randn(rng, &[d, cfg.kv_width()], proj_std),
                w_v: Tensor::randn(rng, &[d, cfg.kv_width()], proj_std),
                w_o: Tensor::randn(rng, &[cfg.q_width(), d], resid_std),
                w_in: Tensor::randn(rng, &[d, cfg.d_ff()], proj_std),
                w_gate: Tensor::randn(rng, &[d, cfg.d_ff()], proj_std),
                w_out: Tensor::randn(rng, &[cfg.d_ff(), d], ff_resid_std),
            });
        }
        Ok(Model {
            cfg,
            embed,
            unembed,
            layers,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            if t >= self.cfg.vocab {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.cfg.vocab,
                });
            }
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(ModelError::Capacity {
                position: tokens.len(),
                max_seq: self.cfg.max_seq,
            });
        }
        Ok(())
    }

    /// One attention sublayer (pre-norm included, residual excluded).
    ///
    /// `record`, when given, receives the per-query-head attention
    /// probability matrices. `perturb` adds a delta onto the visual-span rows
    /// of the chosen projection; it exists for the selectivity probes.
    fn attn_sublayer_impl(
        &self,
        layer_idx: usize,
        x: &Tensor<E>,
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
        positions: &[usize],
        perturb: Option<&SpanPerturbation<E>>,
        mut record: Option<&mut Vec<Vec<E>>>,
    ) -> Result<Tensor<E>> {
        let cfg = &self.cfg;
        let lw = &self.layers[layer_idx];
        let t = x.rows();
        let dh = cfg.d_head;
        let span = layout.visual_range().map(|r| (r.start, r.len()));

        let xn = x.rms_norm_rows(RMS_EPS)?;
        let mut q_all = xn.matmul(&lw.w_q)?;
        let mut k_all = xn.matmul(&lw.w_k)?;
        let mut v_all = xn.matmul(&lw.w_v)?;

        if let Some(ad) = adapters {
            if let Some(dq) = ad.projection_delta(layer_idx, PathKind::Q, &xn)? {
                q_all = q_all.add(&dq)?;
            }
            if let Some(dk) = ad.projection_delta(layer_idx, PathKind::K, &xn)? {
                k_all = k_all.add(&dk)?;
            }
            if let Some(dv) = ad.projection_delta(layer_idx, PathKind::V, &xn)? {
                v_all = v_all.add(&dv)?;
            }
        }

        if let Some(p) = perturb {
            let (start, _) = span.ok_or_else(|| {
                ModelError::Layout("perturbation probe requires a visual span".into())
            })?;
            match p.path {
                ProbePath::Query => q_all = q_all.add(&p.delta.pad_rows(t, start)?)?,
                ProbePath::Value => v_all = v_all.add(&p.delta.pad_rows(t, start)?)?,
                ProbePath::Output => {}
            }
        }

        // Masked per-KV-head deltas (value path, optionally key path). These
        // touch only visual-span rows and are skipped entirely when absent.
        let value_deltas = match adapters {
            Some(ad) => ad.masked_head_deltas(layer_idx, PathKind::V, &xn, span)?,
            None => None,
        };
        let key_deltas = match adapters {
            Some(ad) => ad.masked_head_deltas(layer_idx, PathKind::K, &xn, span)?,
            None => None,
        };

        let mask = causal_mask::<E>(t);
        let inv_sqrt_dh = E::from_f64(1.0 / (dh as f64).sqrt());

        // Per-KV-head keys/values, shared across their query-head group.
        let mut keys = Vec::with_capacity(cfg.h_kv);
        let mut values = Vec::with_capacity(cfg.h_kv);
        for kv in 0..cfg.h_kv {
            let mut k_h = k_all.narrow_cols(kv * dh, dh)?;
            if let Some(dk) = key_deltas.as_ref().and_then(|m| m.get(&kv)) {
                // Key deltas land before RoPE, so they do shift attention.
                k_h = k_h.add(&dk.pad_rows(t, span.expect("masked delta implies span").0)?)?;
            }
            keys.push(k_h.rope(positions, cfg.rope_base)?);
            let mut v_h = v_all.narrow_cols(kv * dh, dh)?;
            if let Some(dv) = value_deltas.as_ref().and_then(|m| m.get(&kv)) {
                v_h = v_h.add(&dv.pad_rows(t, span.expect("masked delta implies span").0)?)?;
            }
            values.push(v_h);
        }

        let mut head_outputs = Vec::with_capacity(cfg.h_q);
        for hq in 0..cfg.h_q {
            let kv = hq / cfg.g;
            let q_h = q_all.narrow_cols(hq * dh, dh)?.rope(positions, cfg.rope_base)?;
            let scores = q_h.matmul_nt(&keys[kv])?.scale(inv_sqrt_dh);
            let probs = scores.softmax_rows(&mask)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(probs.data_vec());
            }
            head_outputs.push(probs.matmul(&values[kv])?);
        }

        let mut concat = Tensor::concat_cols(&head_outputs)?;
        if let Some(p) = perturb {
            if p.path == ProbePath::Output {
                let (start, _) = span.expect("probe requires span");
                concat = concat.add(&p.delta.pad_rows(t, start)?)?;
            }
        }

        let mut out = concat.matmul(&lw.w_o)?;
        if let Some(ad) = adapters {
            if let Some(d_o) = ad.projection_delta(layer_idx, PathKind::O, &concat)? {
                out = out.add(&d_o)?;
            }
        }
        Ok(out)
    }

    /// Public single-sublayer entry point for the selectivity probes.
    pub fn attention_sublayer(
        &self,
        layer_idx: usize,
        x: &Tensor<E>,
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
        perturb: Option<&SpanPerturbation<E>>,
    ) -> Result<Tensor<E>> {
        if x.rows() != layout.len {
            return Err(ModelError::LayoutMismatch {
                layout: layout.len,
                seq: x.rows(),
            });
        }
        let positions: Vec<usize> = (0..x.rows()).collect();
        self.attn_sublayer_impl(layer_idx, x, layout, adapters, &positions, perturb, None)
    }

    fn mlp_sublayer(&self, layer_idx: usize, x: &Tensor<E>) -> Result<Tensor<E>> {
        let lw = &self.layers[layer_idx];
        let xm = x.rms_norm_rows(RMS_EPS)?;
        let gated = xm.matmul(&lw.w_in)?.silu().mul(&xm.matmul(&lw.w_gate)?)?;
        Ok(gated.matmul(&lw.w_out)?)
    }

    fn forward_impl(
        &self,
        tokens: &[usize],
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
        mut record: Option<&mut Vec<Vec<Vec<E>>>>,
    ) -> Result<Tensor<E>> {
        self.check_tokens(tokens)?;
        layout.validate()?;
        if tokens.len() != layout.len {
            return Err(ModelError::LayoutMismatch {
                layout: layout.len,
                seq: tokens.len(),
            });
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = self.embed.gather_rows(tokens)?;
        for layer_idx in 0..self.cfg.n_layers {
            let mut layer_rec = record.as_deref_mut().map(|_| Vec::new());
            let attn = self.attn_sublayer_impl(
                layer_idx,
                &x,
                layout,
                adapters,
                &positions,
                None,
                layer_rec.as_mut(),
            )?;
            x = x.add(&attn)?;
            x = x.add(&self.mlp_sublayer(layer_idx, &x)?)?;
            if let (Some(rec), Some(lr)) = (record.as_deref_mut(), layer_rec) {
                rec.push(lr);
            }
        }
        Ok(x.rms_norm_rows(RMS_EPS)?.matmul(&self.unembed)?)
    }

    /// Full-sequence forward pass; returns logits, one row per position.
    pub fn forward(
        &self,
        tokens: &[usize],
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
    ) -> Result<Tensor<E>> {
        self.forward_impl(tokens, layout, adapters, None)
    }

    /// Forward pass that also returns attention probabilities, indexed as
    /// `[layer][query_head]` with each entry a row-major `T x T` matrix.
    pub fn forward_recording(
        &self,
        tokens: &[usize],
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
    ) -> Result<(Tensor<E>, Vec<Vec<Vec<E>>>)> {
        let mut rec = Vec::new();
        let logits = self.forward_impl(tokens, layout, adapters, Some(&mut rec))?;
        Ok((logits, rec))
    }
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

/// Per-layer KV cache. Entries already include adapter deltas and (for keys)
/// the rotary embedding, so cached state persists adapted values.
pub struct LayerState<E: Element> {
    keys: Vec<Vec<E>>,
    values: Vec<Vec<E>>,
}

/// Rolling decode state across all layers.
pub struct DecodeState<E: Element> {
    layers: Vec<LayerState<E>>,
    position: usize,
}

impl<E: Element> DecodeState<E> {
    pub fn position(&self) -> usize {
        self.position
    }
}

impl<E: Element> Model<E> {
    pub fn new_decode_state(&self) -> DecodeState<E> {
        DecodeState {
            layers: (0..self.cfg.n_layers)
                .map(|_| LayerState {
                    keys: vec![Vec::new(); self.cfg.h_kv],
                    values: vec![Vec::new(); self.cfg.h_kv],
                })
                .collect(),
            position: 0,
        }
    }

    /// Advances the cache by one token and returns the logits row for it.
    ///
    /// `layout` describes the full sequence being decoded, so visual-span
    /// membership of the current position is known up front.
    pub fn decode_step(
        &self,
        state: &mut DecodeState<E>,
        token: usize,
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
    ) -> Result<Vec<E>> {
        let cfg = &self.cfg;
        let p = state.position;
        if p >= cfg.max_seq {
            return Err(ModelError::Capacity {
                position: p,
                max_seq: cfg.max_seq,
            });
        }
        self.check_tokens(&[token])?;
        let dh = cfg.d_head;
        let positions = [p];
        let row_span = if layout.contains_visual(p) { Some((0, 1)) } else { None };

        let mut x = self.embed.gather_rows(&[token])?;
        for layer_idx in 0..cfg.n_layers {
            let lw = &self.layers[layer_idx];
            let xn = x.rms_norm_rows(RMS_EPS)?;
            let mut q_all = xn.matmul(&lw.w_q)?;
            let mut k_all = xn.matmul(&lw.w_k)?;
            let mut v_all = xn.matmul(&lw.w_v)?;
            if let Some(ad) = adapters {
                if let Some(dq) = ad.projection_delta(layer_idx, PathKind::Q, &xn)? {
                    q_all = q_all.add(&dq)?;
                }
                if let Some(dk) = ad.projection_delta(layer_idx, PathKind::K, &xn)? {
                    k_all = k_all.add(&dk)?;
                }
                if let Some(dv) = ad.projection_delta(layer_idx, PathKind::V, &xn)? {
                    v_all = v_all.add(&dv)?;
                }
            }
            let value_deltas = match adapters {
                Some(ad) => ad.masked_head_deltas(layer_idx, PathKind::V, &xn, row_span)?,
                None => None,
            };
            let key_deltas = match adapters {
                Some(ad) => ad.masked_head_deltas(layer_idx, PathKind::K, &xn, row_span)?,
                None => None,
            };

            let ls = &mut state.layers[layer_idx];
            for kv in 0..cfg.h_kv {
                let mut k_h = k_all.narrow_cols(kv * dh, dh)?;
                if let Some(dk) = key_deltas.as_ref().and_then(|m| m.get(&kv)) {
                    k_h = k_h.add(dk)?;
                }
                let k_h = k_h.rope(&positions, cfg.rope_base)?;
                ls.keys[kv].extend_from_slice(&k_h.data());
                let mut v_h = v_all.narrow_cols(kv * dh, dh)?;
                if let Some(dv) = value_deltas.as_ref().and_then(|m| m.get(&kv)) {
                    v_h = v_h.add(dv)?;
                }
                ls.values[kv].extend_from_slice(&v_h.data());
            }

            let inv_sqrt_dh = E::from_f64(1.0 / (dh as f64).sqrt());
            let zero_mask = Tensor::zeros(&[1, p + 1]);
            let mut head_outputs = Vec::with_capacity(cfg.h_q);
            for hq in 0..cfg.h_q {
                let kv = hq / cfg.g;
                let q_h = q_all
                    .narrow_cols(hq * dh, dh)?
                    .rope(&positions, cfg.rope_base)?;
                let k_cache = Tensor::from_vec(&[p + 1, dh], ls.keys[kv].clone())?;
                let v_cache = Tensor::from_vec(&[p + 1, dh], ls.values[kv].clone())?;
                let scores = q_h.matmul_nt(&k_cache)?.scale(inv_sqrt_dh);
                let probs = scores.softmax_rows(&zero_mask)?;
                head_outputs.push(probs.matmul(&v_cache)?);
            }
            let concat = Tensor::concat_cols(&head_outputs)?;
            let mut attn = concat.matmul(&lw.w_o)?;
            if let Some(ad) = adapters {
                if let Some(d_o) = ad.projection_delta(layer_idx, PathKind::O, &concat)? {
                    attn = attn.add(&d_o)?;
                }
            }
            x = x.add(&attn)?;
            x = x.add(&self.mlp_sublayer(layer_idx, &x)?)?;
        }
        state.position = p + 1;
        let logits = x.rms_norm_rows(RMS_EPS)?.matmul(&self.unembed)?;
        Ok(logits.data_vec())
    }

    /// Feeds a prompt through the cache one token at a time; returns the
    /// state and the logits row of the final prompt token.
    pub fn prefill(
        &self,
        tokens: &[usize],
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
    ) -> Result<(DecodeState<E>, Vec<E>)> {
        if tokens.is_empty() {
            return Err(ModelError::Layout("cannot prefill an empty prompt".into()));
        }
        let mut state = self.new_decode_state();
        let mut last = Vec::new();
        for &tok in tokens {
            last = self.decode_step(&mut state, tok, layout, adapters)?;
        }
        Ok((state, last))
    }

    /// Greedy decoding of up to `max_new` tokens after `prompt`; stops after
    /// emitting `stop` when given. Runs without graph recording.
    pub fn greedy_decode(
        &self,
        prompt: &[usize],
        layout: &TokenLayout,
        adapters: Option<&AdapterSet<E>>,
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>> {
        crate::tensor::no_grad(|| {
            let (mut state, mut logits) = self.prefill(prompt, layout, adapters)?;
            let mut out = Vec::new();
            for _ in 0..max_new {
                let next = argmax(&logits);
                out.push(next);
                if stop == Some(next) {
                    break;
                }
                if state.position >= self.cfg.max_seq {
                    break;
                }
                logits = self.decode_step(&mut state, next, layout, adapters)?;
            }
            Ok(out)
        })
    }
}

fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (j, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = j;
        }
    }
    best
}

/// Deterministic content hash over every base weight, for frozen-base checks.
pub fn weight_fingerprint<E: Element>(model: &Model<E>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    let mut eat = |t: &Tensor<E>| {
        for v in t.data().iter() {
            mix(v.widen_f64().to_bits());
        }
    };
    eat(&model.embed);
    eat(&model.unembed);
    for lw in &model.layers {
        for t in [&lw.w_q, &lw.w_k, &lw.w_v, &lw.w_o, &lw.w_in, &lw.w_gate, &lw.w_out] {
            eat(t);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::toy().validate().is_ok());
        let mut bad = ModelConfig::toy();
        bad.h_q = 6;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::toy();
        bad.d_head = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kv_head_map_matches_floor_division() {
        // g = 1 is the identity map.
        let ident = ModelConfig {
            d_hidden: 64,
            d_head: 32,
            h_q: 2,
            h_kv: 2,
            g: 1,
            n_layers: 1,
            vocab: 8,
            rope_base: 10000.0,
            max_seq: 16,
        };
        assert!(ident.validate().is_ok());
        assert_eq!(ident.kv_head_for(0).unwrap(), 0);
        assert_eq!(ident.kv_head_for(1).unwrap(), 1);

        // 28 query heads in groups of 7: head 13 belongs to KV head 1.
        let grouped = ModelConfig {
            d_hidden: 3584,
            d_head: 128,
            h_q: 28,
            h_kv: 4,
            g: 7,
            n_layers: 28,
            vocab: 64,
            rope_base: 10000.0,
            max_seq: 512,
        };
        assert!(grouped.validate().is_ok());
        assert_eq!(grouped.kv_head_for(13).unwrap(), 1);

        // Groups of 4: query heads 4..8 all share KV head 1.
        let toy = ModelConfig::toy();
        for hq in 4..8 {
            assert_eq!(toy.kv_head_for(hq).unwrap(), 1);
        }
        assert!(toy.kv_head_for(8).is_err());
    }

    #[test]
    fn layout_validation() {
        assert!(TokenLayout::with_span(10, 2, 6).is_ok());
        // Empty inner span is rejected.
        assert!(TokenLayout::with_span(10, 2, 3).is_err());
        assert!(TokenLayout::with_span(5, 2, 6).is_err());
        let l = TokenLayout::with_span(10, 2, 6).unwrap();
        assert_eq!(l.visual_range().unwrap(), 3..6);
        assert_eq!(l.visual_len(), 3);
        assert_eq!(l.text_indices(), vec![0, 1, 2, 6, 7, 8, 9]);
        assert_eq!(TokenLayout::pure_text(4).visual_len(), 0);
    }
}
