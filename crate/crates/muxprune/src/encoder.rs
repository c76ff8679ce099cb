//! Pre-layer-norm transformer encoder with structural-mask awareness.
//!
//! The forward pass honors a [`SparsitySpec`]: a masked attention head
//! contributes nothing to its sublayer output, a masked MHA/FFN sublayer is
//! skipped entirely (the residual passes through unchanged), and masked
//! hidden/intermediate coordinates are held at zero throughout. Layer-norm
//! statistics run over live hidden coordinates only, which makes the masked
//! forward pass exactly equivalent to running the physically compacted model
//! on the live coordinates (see `pruner::compact`).
//!
//! Attention and FFN projections carry no bias terms; layer norms have scale
//! and offset, the classifier head has a bias. Inputs are continuous vectors
//! supplied by the multiplexer or the task embedding table, so there is no
//! positional-embedding machinery here.

use serde::{Deserialize, Serialize};

use crate::math::{softmax, softmax_in_place, Matrix, RngKey};
use crate::muxer::{gelu, gelu_derivative, TokenSequence};
use crate::pruner::SparsitySpec;
use crate::{Error, Result};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Dimensions of a dense (uncompacted) encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

/// Multi-head attention sublayer with its pre-layer-norm parameters.
///
/// `wq`/`wk`/`wv` are `(heads * head_dim) x d_model` with rows grouped by
/// head; `wo` is `d_model x (heads * head_dim)` with columns grouped by head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBlock {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln_scale: Vec<f64>,
    pub ln_offset: Vec<f64>,
}

/// Feed-forward sublayer (`w_up`: `d_ff x d_model`, `w_down`: `d_model x d_ff`)
/// with its pre-layer-norm parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnBlock {
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub ln_scale: Vec<f64>,
    pub ln_offset: Vec<f64>,
}

/// One encoder layer. Compaction may remove either sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn: Option<AttnBlock>,
    pub ffn: Option<FfnBlock>,
}

/// Transformer encoder with a classification head and a vocabulary projection
/// for the retrieval objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub d_model: usize,
    pub layers: Vec<EncoderLayer>,
    /// `classes x d_model`.
    pub classifier_w: Matrix,
    pub classifier_b: Vec<f64>,
    /// `vocab x d_model`.
    pub vocab_proj: Matrix,
}

/// Residual-stream states of one forward pass: the embedding-level input plus
/// the output of every layer, and the mean-pooled final state.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub states: Vec<Matrix>,
    pub pooled: Vec<f64>,
}

impl LayerTrace {
    pub fn final_state(&self) -> &Matrix {
        self.states.last().expect("trace has at least the input")
    }
}

impl EncoderModel {
    /// Random dense model. `d_model` must be divisible by `heads`.
    pub fn new(
        cfg: &EncoderConfig,
        classes: usize,
        vocab: usize,
        key: RngKey,
    ) -> Result<EncoderModel> {
        if cfg.d_model == 0 || cfg.heads == 0 {
            return Err(Error::Degenerate("zero-width encoder".into()));
        }
        if !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(Error::Shape(format!(
                "d_model {} not divisible by {} heads",
                cfg.d_model, cfg.heads
            )));
        }
        let head_dim = cfg.d_model / cfg.heads;
        let d = cfg.d_model;
        let mut stream = key.derive(0x656e63).stream();
        let proj_scale = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer {
                attn: Some(AttnBlock {
                    heads: cfg.heads,
                    head_dim,
                    wq: Matrix::gaussian(d, d, &mut stream, proj_scale),
                    wk: Matrix::gaussian(d, d, &mut stream, proj_scale),
                    wv: Matrix::gaussian(d, d, &mut stream, proj_scale),
                    wo: Matrix::gaussian(d, d, &mut stream, proj_scale),
                    ln_scale: vec![1.0; d],
                    ln_offset: vec![0.0; d],
                }),
                ffn: Some(FfnBlock {
                    w_up: Matrix::gaussian(cfg.d_ff, d, &mut stream, proj_scale),
                    w_down: Matrix::gaussian(
                        d,
                        cfg.d_ff,
                        &mut stream,
                        1.0 / (cfg.d_ff as f64).sqrt(),
                    ),
                    ln_scale: vec![1.0; d],
                    ln_offset: vec![0.0; d],
                }),
            })
            .collect();
        Ok(EncoderModel {
            d_model: d,
            layers,
            classifier_w: Matrix::gaussian(classes, d, &mut stream, proj_scale),
            classifier_b: vec![0.0; classes],
            vocab_proj: Matrix::gaussian(vocab, d, &mut stream, proj_scale),
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn classes(&self) -> usize {
        self.classifier_w.rows()
    }

    pub fn vocab(&self) -> usize {
        self.vocab_proj.rows()
    }

    /// The config of a dense-shaped model (every layer carries both sublayers
    /// with uniform dimensions); `None` for compacted models that lost units.
    pub fn dense_config(&self) -> Option<EncoderConfig> {
        let first = self.layers.first()?;
        let attn = first.attn.as_ref()?;
        let ffn = first.ffn.as_ref()?;
        let cfg = EncoderConfig {
            layers: self.layers.len(),
            heads: attn.heads,
            d_model: self.d_model,
            d_ff: ffn.w_up.rows(),
        };
        if attn.heads * attn.head_dim != self.d_model {
            return None;
        }
        for layer in &self.layers {
            match (&layer.attn, &layer.ffn) {
                (Some(a), Some(f))
                    if a.heads == cfg.heads
                        && a.head_dim * a.heads == cfg.d_model
                        && f.w_up.rows() == cfg.d_ff => {}
                _ => return None,
            }
        }
        Some(cfg)
    }

    /// Check that `spec` has the exact shape of this model. Only models where
    /// every layer still carries both sublayers can be masked.
    pub fn validate_spec(&self, spec: &SparsitySpec) -> Result<()> {
        if spec.layer_count() != self.layers.len() {
            return Err(Error::Shape(format!(
                "spec covers {} layers, model has {}",
                spec.layer_count(),
                self.layers.len()
            )));
        }
        if spec.hidden.len() != self.d_model {
            return Err(Error::Shape(format!(
                "spec hidden mask length {} vs d_model {}",
                spec.hidden.len(),
                self.d_model
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let attn = layer.attn.as_ref().ok_or_else(|| {
                Error::Shape(format!("layer {l} has no attention sublayer to mask"))
            })?;
            if spec.heads[l].len() != attn.heads {
                return Err(Error::Shape(format!(
                    "spec lists {} heads for layer {l}, model has {}",
                    spec.heads[l].len(),
                    attn.heads
                )));
            }
            let ffn = layer
                .ffn
                .as_ref()
                .ok_or_else(|| Error::Shape(format!("layer {l} has no FFN sublayer to mask")))?;
            if spec.intermediate[l].len() != ffn.w_up.rows() {
                return Err(Error::Shape(format!(
                    "spec lists {} intermediate dims for layer {l}, model has {}",
                    spec.intermediate[l].len(),
                    ffn.w_up.rows()
                )));
            }
        }
        if spec.live_hidden_count() == 0 {
            return Err(Error::Degenerate("all hidden dimensions masked".into()));
        }
        Ok(())
    }

    /// Forward pass. With `spec = None` the model runs dense; with a spec the
    /// masked units are suppressed as described in the module docs.
    pub fn encode(&self, spec: Option<&SparsitySpec>, input: &TokenSequence) -> Result<LayerTrace> {
        if input.dim() != self.d_model {
            return Err(Error::Shape(format!(
                "input dimension {} vs model d_model {}",
                input.dim(),
                self.d_model
            )));
        }
        if let Some(s) = spec {
            self.validate_spec(s)?;
        }
        let live = LiveView::build(self, spec);

        let mut x = input.as_matrix().clone();
        live.zero_masked_hidden(&mut x);
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        states.push(x.clone());

        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(attn) = &layer.attn {
                if live.attn_alive(l) {
                    let y = layer_norm(&x, &attn.ln_scale, &attn.ln_offset, &live.hidden);
                    let mut out = attn_forward(attn, &y, live.heads(l)).0;
                    live.zero_masked_hidden(&mut out);
                    x.add_scaled(&out, 1.0);
                }
            }
            if let Some(ffn) = &layer.ffn {
                if live.ffn_alive(l) {
                    let y = layer_norm(&x, &ffn.ln_scale, &ffn.ln_offset, &live.hidden);
                    let mut out = ffn_forward(ffn, &y, live.intermediate(l)).0;
                    live.zero_masked_hidden(&mut out);
                    x.add_scaled(&out, 1.0);
                }
            }
            states.push(x.clone());
        }

        let pooled = mean_pool(&x);
        Ok(LayerTrace { states, pooled })
    }

    /// Class probabilities from the trace's pooled final state.
    pub fn classify(&self, trace: &LayerTrace) -> Vec<f64> {
        self.classify_pooled(&trace.pooled)
    }

    /// Class probabilities for an explicit pooled vector (used for demuxed
    /// streams, whose pooled state does not come from a trace).
    pub fn classify_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        softmax(&self.classifier_logits(pooled))
    }

    pub(crate) fn classifier_logits(&self, pooled: &[f64]) -> Vec<f64> {
        let mut logits = self.classifier_b.clone();
        for (cls, logit) in logits.iter_mut().enumerate() {
            let row = self.classifier_w.row(cls);
            *logit += row.iter().zip(pooled).map(|(w, p)| w * p).sum::<f64>();
        }
        logits
    }

    /// Per-position vocabulary probabilities for a demuxed sequence.
    pub fn vocab_probs(&self, seq: &TokenSequence) -> Result<Matrix> {
        let mut logits = seq.as_matrix().matmul_nt(&self.vocab_proj)?;
        for r in 0..logits.rows() {
            softmax_in_place(logits.row_mut(r));
        }
        Ok(logits)
    }
}

pub(crate) fn mean_pool(x: &Matrix) -> Vec<f64> {
    let mut pooled = vec![0.0; x.cols()];
    if x.rows() == 0 {
        return pooled;
    }
    for r in 0..x.rows() {
        for (p, v) in pooled.iter_mut().zip(x.row(r)) {
            *p += v;
        }
    }
    let inv = 1.0 / x.rows() as f64;
    for p in &mut pooled {
        *p *= inv;
    }
    pooled
}

// ---------------------------------------------------------------------------
// Live view of a (model, spec) pair
// ---------------------------------------------------------------------------

struct LiveView {
    hidden: Vec<usize>,
    hidden_mask: Option<Vec<bool>>,
    /// Per layer: live head indices (None = sublayer masked or absent).
    attn_heads: Vec<Option<Vec<usize>>>,
    /// Per layer: live intermediate indices.
    ffn_dims: Vec<Option<Vec<usize>>>,
}

impl LiveView {
    fn build(model: &EncoderModel, spec: Option<&SparsitySpec>) -> LiveView {
        let d = model.d_model;
        let hidden: Vec<usize> = match spec {
            Some(s) => (0..d).filter(|&c| s.hidden[c]).collect(),
            None => (0..d).collect(),
        };
        let hidden_mask = spec.map(|s| s.hidden.clone());
        let mut attn_heads = Vec::with_capacity(model.layers.len());
        let mut ffn_dims = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            attn_heads.push(layer.attn.as_ref().and_then(|a| match spec {
                Some(s) if !s.mha[l] => None,
                Some(s) => Some((0..a.heads).filter(|&h| s.heads[l][h]).collect()),
                None => Some((0..a.heads).collect()),
            }));
            ffn_dims.push(layer.ffn.as_ref().and_then(|f| match spec {
                Some(s) if !s.ffn[l] => None,
                Some(s) => Some(
                    (0..f.w_up.rows())
                        .filter(|&i| s.intermediate[l][i])
                        .collect(),
                ),
                None => Some((0..f.w_up.rows()).collect()),
            }));
        }
        LiveView {
            hidden,
            hidden_mask,
            attn_heads,
            ffn_dims,
        }
    }

    fn attn_alive(&self, l: usize) -> bool {
        self.attn_heads[l].is_some()
    }

    fn ffn_alive(&self, l: usize) -> bool {
        self.ffn_dims[l].is_some()
    }

    fn heads(&self, l: usize) -> &[usize] {
        self.attn_heads[l].as_deref().unwrap_or(&[])
    }

    fn intermediate(&self, l: usize) -> &[usize] {
        self.ffn_dims[l].as_deref().unwrap_or(&[])
    }

    fn zero_masked_hidden(&self, x: &mut Matrix) {
        let Some(mask) = &self.hidden_mask else {
            return;
        };
        let cols = x.cols();
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            for c in 0..cols {
                if !mask[c] {
                    row[c] = 0.0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sublayer forward passes
// ---------------------------------------------------------------------------

/// Layer norm over the live coordinates of every row; masked coordinates of
/// the output are zero.
fn layer_norm(x: &Matrix, scale: &[f64], offset: &[f64], live: &[usize]) -> Matrix {
    layer_norm_with_tape(x, scale, offset, live).0
}

fn layer_norm_with_tape(
    x: &Matrix,
    scale: &[f64],
    offset: &[f64],
    live: &[usize],
) -> (Matrix, LnTape) {
    let m = live.len() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_sigma = vec![0.0; x.rows()];
    for (r, sigma_slot) in inv_sigma.iter_mut().enumerate() {
        let row = x.row(r);
        let mut mu = 0.0;
        for &c in live {
            mu += row[c];
        }
        mu /= m;
        let mut var = 0.0;
        for &c in live {
            let d = row[c] - mu;
            var += d * d;
        }
        var /= m;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        *sigma_slot = inv;
        for &c in live {
            let h = (row[c] - mu) * inv;
            xhat.set(r, c, h);
            out.set(r, c, scale[c] * h + offset[c]);
        }
    }
    (out, LnTape { xhat, inv_sigma })
}

/// Multi-head attention over the live heads.
fn attn_forward(attn: &AttnBlock, y: &Matrix, live_heads: &[usize]) -> (Matrix, AttnCache) {
    let dh = attn.head_dim;
    let q = y.matmul_nt(&attn.wq).expect("projection shapes");
    let k = y.matmul_nt(&attn.wk).expect("projection shapes");
    let v = y.matmul_nt(&attn.wv).expect("projection shapes");
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut z = Matrix::zeros(y.rows(), attn.heads * dh);
    let mut probs = Vec::with_capacity(live_heads.len());
    for &h in live_heads {
        let qh = q.col_slice(h * dh, dh);
        let kh = k.col_slice(h * dh, dh);
        let vh = v.col_slice(h * dh, dh);
        let mut scores = qh.matmul_nt(&kh).expect("score shapes");
        scores.scale(inv_sqrt);
        for r in 0..scores.rows() {
            softmax_in_place(scores.row_mut(r));
        }
        let zh = scores.matmul(&vh).expect("attention shapes");
        z.add_col_slice(h * dh, &zh);
        probs.push(scores);
    }
    let out = z.matmul_nt(&attn.wo).expect("output projection shapes");
    (out, AttnCache { q, k, v, probs, z })
}

/// GELU feed-forward over the live intermediate dims. Masked intermediate
/// coordinates never activate (their pre-activation is forced to zero).
fn ffn_forward(ffn: &FfnBlock, y: &Matrix, live_dims: &[usize]) -> (Matrix, FfnCache) {
    let full = ffn.w_up.rows();
    let mut pre = y.matmul_nt(&ffn.w_up).expect("up projection shapes");
    if live_dims.len() != full {
        let mut live_set = vec![false; full];
        for &i in live_dims {
            live_set[i] = true;
        }
        for r in 0..pre.rows() {
            let row = pre.row_mut(r);
            for c in 0..full {
                if !live_set[c] {
                    row[c] = 0.0;
                }
            }
        }
    }
    let mut act = pre.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let out = act.matmul_nt(&ffn.w_down).expect("down projection shapes");
    (out, FfnCache { pre, act })
}

struct AttnCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    z: Matrix,
}

struct FfnCache {
    pre: Matrix,
    act: Matrix,
}

// ---------------------------------------------------------------------------
// Dense forward with tape + backward (training path)
// ---------------------------------------------------------------------------

pub(crate) struct LnTape {
    xhat: Matrix,
    inv_sigma: Vec<f64>,
}

pub(crate) struct AttnTape {
    ln: LnTape,
    y: Matrix,
    cache: AttnCache,
}

pub(crate) struct FfnTape {
    ln: LnTape,
    y: Matrix,
    cache: FfnCache,
}

pub(crate) struct LayerTape {
    attn: Option<AttnTape>,
    ffn: Option<FfnTape>,
}

pub(crate) struct EncoderTape {
    layers: Vec<LayerTape>,
}

/// Gradients mirroring [`EncoderModel`]'s parameters.
#[derive(Debug, Clone)]
pub(crate) struct AttnGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln_scale: Vec<f64>,
    pub ln_offset: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnGrads {
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub ln_scale: Vec<f64>,
    pub ln_offset: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerGrads {
    pub attn: Option<AttnGrads>,
    pub ffn: Option<FfnGrads>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderGrads {
    pub layers: Vec<LayerGrads>,
    pub classifier_w: Matrix,
    pub classifier_b: Vec<f64>,
    pub vocab_proj: Matrix,
}

impl EncoderGrads {
    pub fn zeros_like(model: &EncoderModel) -> EncoderGrads {
        EncoderGrads {
            layers: model
                .layers
                .iter()
                .map(|layer| LayerGrads {
                    attn: layer.attn.as_ref().map(|a| AttnGrads {
                        wq: Matrix::zeros(a.wq.rows(), a.wq.cols()),
                        wk: Matrix::zeros(a.wk.rows(), a.wk.cols()),
                        wv: Matrix::zeros(a.wv.rows(), a.wv.cols()),
                        wo: Matrix::zeros(a.wo.rows(), a.wo.cols()),
                        ln_scale: vec![0.0; a.ln_scale.len()],
                        ln_offset: vec![0.0; a.ln_offset.len()],
                    }),
                    ffn: layer.ffn.as_ref().map(|f| FfnGrads {
                        w_up: Matrix::zeros(f.w_up.rows(), f.w_up.cols()),
                        w_down: Matrix::zeros(f.w_down.rows(), f.w_down.cols()),
                        ln_scale: vec![0.0; f.ln_scale.len()],
                        ln_offset: vec![0.0; f.ln_offset.len()],
                    }),
                })
                .collect(),
            classifier_w: Matrix::zeros(model.classifier_w.rows(), model.classifier_w.cols()),
            classifier_b: vec![0.0; model.classifier_b.len()],
            vocab_proj: Matrix::zeros(model.vocab_proj.rows(), model.vocab_proj.cols()),
        }
    }
}

impl EncoderModel {
    /// Dense forward pass retaining all intermediates needed by
    /// [`EncoderModel::backward`]. Training always runs dense (possibly on an
    /// already-compacted model), so no spec is taken here.
    pub(crate) fn encode_with_tape(
        &self,
        input: &TokenSequence,
    ) -> Result<(LayerTrace, EncoderTape)> {
        if input.dim() != self.d_model {
            return Err(Error::Shape(format!(
                "input dimension {} vs model d_model {}",
                input.dim(),
                self.d_model
            )));
        }
        let live: Vec<usize> = (0..self.d_model).collect();
        let mut x = input.as_matrix().clone();
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        states.push(x.clone());
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let attn_tape = layer.attn.as_ref().map(|attn| {
                let (y, ln) = layer_norm_with_tape(&x, &attn.ln_scale, &attn.ln_offset, &live);
                let all: Vec<usize> = (0..attn.heads).collect();
                let (out, cache) = attn_forward(attn, &y, &all);
                x.add_scaled(&out, 1.0);
                AttnTape { ln, y, cache }
            });
            let ffn_tape = layer.ffn.as_ref().map(|ffn| {
                let (y, ln) = layer_norm_with_tape(&x, &ffn.ln_scale, &ffn.ln_offset, &live);
                let all: Vec<usize> = (0..ffn.w_up.rows()).collect();
                let (out, cache) = ffn_forward(ffn, &y, &all);
                x.add_scaled(&out, 1.0);
                FfnTape { ln, y, cache }
            });
            states.push(x.clone());
            tapes.push(LayerTape {
                attn: attn_tape,
                ffn: ffn_tape,
            });
        }
        let pooled = mean_pool(&x);
        Ok((LayerTrace { states, pooled }, EncoderTape { layers: tapes }))
    }

    /// Reverse pass. `d_final` is the loss gradient at the final residual
    /// state; `d_states[l]` optionally injects an extra gradient at trace
    /// entry `l` (distillation taps intermediate states). Accumulates into
    /// `grads` and returns the gradient with respect to the encoder input.
    pub(crate) fn backward(
        &self,
        tape: &EncoderTape,
        d_final: Matrix,
        d_states: &[Option<Matrix>],
        grads: &mut EncoderGrads,
    ) -> Matrix {
        assert_eq!(d_states.len(), self.layers.len() + 1);
        let mut dx = d_final;
        if let Some(extra) = &d_states[self.layers.len()] {
            dx.add_scaled(extra, 1.0);
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let tape_l = &tape.layers[l];
            if let (Some(ffn), Some(ft)) = (&layer.ffn, &tape_l.ffn) {
                let g = grads.layers[l].ffn.as_mut().expect("grads mirror model");
                let dy = ffn_backward(ffn, ft, &dx, g);
                let d_ln =
                    ln_backward(&dy, &ft.ln, &ffn.ln_scale, &mut g.ln_scale, &mut g.ln_offset);
                dx.add_scaled(&d_ln, 1.0);
            }
            if let (Some(attn), Some(at)) = (&layer.attn, &tape_l.attn) {
                let g = grads.layers[l].attn.as_mut().expect("grads mirror model");
                let dy = attn_backward(attn, at, &dx, g);
                let d_ln = ln_backward(
                    &dy,
                    &at.ln,
                    &attn.ln_scale,
                    &mut g.ln_scale,
                    &mut g.ln_offset,
                );
                dx.add_scaled(&d_ln, 1.0);
            }
            if let Some(extra) = &d_states[l] {
                dx.add_scaled(extra, 1.0);
            }
        }
        dx
    }

    /// `param += scale * grad` across the whole parameter set.
    pub(crate) fn add_scaled_grads(&mut self, grads: &EncoderGrads, scale: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if let (Some(a), Some(ga)) = (layer.attn.as_mut(), g.attn.as_ref()) {
                a.wq.add_scaled(&ga.wq, scale);
                a.wk.add_scaled(&ga.wk, scale);
                a.wv.add_scaled(&ga.wv, scale);
                a.wo.add_scaled(&ga.wo, scale);
                axpy(&mut a.ln_scale, &ga.ln_scale, scale);
                axpy(&mut a.ln_offset, &ga.ln_offset, scale);
            }
            if let (Some(f), Some(gf)) = (layer.ffn.as_mut(), g.ffn.as_ref()) {
                f.w_up.add_scaled(&gf.w_up, scale);
                f.w_down.add_scaled(&gf.w_down, scale);
                axpy(&mut f.ln_scale, &gf.ln_scale, scale);
                axpy(&mut f.ln_offset, &gf.ln_offset, scale);
            }
        }
        self.classifier_w.add_scaled(&grads.classifier_w, scale);
        axpy(&mut self.classifier_b, &grads.classifier_b, scale);
        self.vocab_proj.add_scaled(&grads.vocab_proj, scale);
    }
}

pub(crate) fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn ffn_backward(ffn: &FfnBlock, tape: &FfnTape, d_out: &Matrix, grads: &mut FfnGrads) -> Matrix {
    // out = act * w_down^T
    let mut d_act = d_out.matmul(&ffn.w_down).expect("shapes");
    grads
        .w_down
        .add_scaled(&d_out.matmul_tn(&tape.cache.act).expect("shapes"), 1.0);
    // act = gelu(pre)
    for (d, p) in d_act.data_mut().iter_mut().zip(tape.cache.pre.data()) {
        *d *= gelu_derivative(*p);
    }
    let d_pre = d_act;
    grads
        .w_up
        .add_scaled(&d_pre.matmul_tn(&tape.y).expect("shapes"), 1.0);
    d_pre.matmul(&ffn.w_up).expect("shapes")
}

fn attn_backward(
    attn: &AttnBlock,
    tape: &AttnTape,
    d_out: &Matrix,
    grads: &mut AttnGrads,
) -> Matrix {
    let dh = attn.head_dim;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let cache = &tape.cache;
    // out = z * wo^T
    let d_z = d_out.matmul(&attn.wo).expect("shapes");
    grads
        .wo
        .add_scaled(&d_out.matmul_tn(&cache.z).expect("shapes"), 1.0);

    let rows = tape.y.rows();
    let mut d_q = Matrix::zeros(rows, attn.heads * dh);
    let mut d_k = Matrix::zeros(rows, attn.heads * dh);
    let mut d_v = Matrix::zeros(rows, attn.heads * dh);
    for h in 0..attn.heads {
        let probs = &cache.probs[h];
        let d_zh = d_z.col_slice(h * dh, dh);
        let vh = cache.v.col_slice(h * dh, dh);
        let qh = cache.q.col_slice(h * dh, dh);
        let kh = cache.k.col_slice(h * dh, dh);
        // z_h = probs * v_h
        let mut d_probs = d_zh.matmul_nt(&vh).expect("shapes");
        d_v.add_col_slice(h * dh, &probs.matmul_tn(&d_zh).expect("shapes"));
        // probs = softmax(scores) rowwise
        for r in 0..rows {
            let p = probs.row(r);
            let dp = d_probs.row_mut(r);
            let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
            for (dv, &pv) in dp.iter_mut().zip(p) {
                *dv = pv * (*dv - dot);
            }
        }
        let d_scores = d_probs; // now gradient wrt scores
        let mut d_qh = d_scores.matmul(&kh).expect("shapes");
        d_qh.scale(inv_sqrt);
        let mut d_kh = d_scores.matmul_tn(&qh).expect("shapes");
        d_kh.scale(inv_sqrt);
        d_q.add_col_slice(h * dh, &d_qh);
        d_k.add_col_slice(h * dh, &d_kh);
    }
    grads
        .wq
        .add_scaled(&d_q.matmul_tn(&tape.y).expect("shapes"), 1.0);
    grads
        .wk
        .add_scaled(&d_k.matmul_tn(&tape.y).expect("shapes"), 1.0);
    grads
        .wv
        .add_scaled(&d_v.matmul_tn(&tape.y).expect("shapes"), 1.0);

    let mut dy = d_q.matmul(&attn.wq).expect("shapes");
    dy.add_scaled(&d_k.matmul(&attn.wk).expect("shapes"), 1.0);
    dy.add_scaled(&d_v.matmul(&attn.wv).expect("shapes"), 1.0);
    dy
}

fn ln_backward(
    dy: &Matrix,
    tape: &LnTape,
    scale: &[f64],
    d_scale: &mut [f64],
    d_offset: &mut [f64],
) -> Matrix {
    let d = dy.cols();
    let m = d as f64;
    let mut dx = Matrix::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let dy_row = dy.row(r);
        let xhat_row = tape.xhat.row(r);
        let inv = tape.inv_sigma[r];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            let dxh = dy_row[c] * scale[c];
            m1 += dxh;
            m2 += dxh * xhat_row[c];
            d_scale[c] += dy_row[c] * xhat_row[c];
            d_offset[c] += dy_row[c];
        }
        m1 /= m;
        m2 /= m;
        let dx_row = dx.row_mut(r);
        for c in 0..d {
            let dxh = dy_row[c] * scale[c];
            dx_row[c] = inv * (dxh - m1 - xhat_row[c] * m2);
        }
    }
    dx
}
