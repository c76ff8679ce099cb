//! Structured sparsity: binary masks over heads, sublayers, hidden and
//! intermediate dimensions; thresholding of real-valued mask scores; physical
//! compaction of a masked model; and demultiplexer alignment to a pruned
//! hidden dimension.
//!
//! The hidden-dimension mask is global (shared by every layer). Canonical
//! form enforces the coarse-over-fine rule in both directions: a masked
//! sublayer forces all of its heads / intermediate dims to zero, and a
//! sublayer whose fine units are all masked is itself marked masked. The
//! upward rule changes nothing observable (attention and FFN sublayers are
//! bias-free, so a unit-less sublayer already contributes zero) but keeps
//! compacted models free of zero-width blocks.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderLayer, EncoderModel};
use crate::muxer::{DemuxMap, MuxKit};
use crate::{Error, Result};

mod bits {
    //! Serialize mask vectors as 0/1 integers (the on-disk spec format).
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&b| u8::from(b))
            .collect::<Vec<u8>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "mask bit must be 0 or 1, got {other}"
                ))),
            })
            .collect()
    }
}

mod bits2d {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<bool>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|row| row.iter().map(|&b| u8::from(b)).collect())
            .collect::<Vec<Vec<u8>>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<bool>>, D::Error> {
        let raw = Vec::<Vec<u8>>::deserialize(d)?;
        raw.into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(serde::de::Error::custom(format!(
                            "mask bit must be 0 or 1, got {other}"
                        ))),
                    })
                    .collect()
            })
            .collect()
    }
}

/// Binary structural masks. `true` = unit kept, `false` = unit pruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsitySpec {
    /// Per layer, per head.
    #[serde(with = "bits2d")]
    pub heads: Vec<Vec<bool>>,
    /// Per layer: whole MHA sublayer.
    #[serde(with = "bits")]
    pub mha: Vec<bool>,
    /// Per layer: whole FFN sublayer.
    #[serde(with = "bits")]
    pub ffn: Vec<bool>,
    /// Global hidden-dimension mask, shared across layers.
    #[serde(with = "bits")]
    pub hidden: Vec<bool>,
    /// Per layer, per intermediate dimension.
    #[serde(with = "bits2d")]
    pub intermediate: Vec<Vec<bool>>,
}

/// Real-valued scores mirroring [`SparsitySpec`], plus the threshold applied
/// by [`threshold_masks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub heads: Vec<Vec<f64>>,
    pub mha: Vec<f64>,
    pub ffn: Vec<f64>,
    pub hidden: Vec<f64>,
    pub intermediate: Vec<Vec<f64>>,
    pub threshold: f64,
}

impl SparsitySpec {
    /// Fully dense spec for the given dimensions.
    pub fn all_ones(layers: usize, heads: usize, d_model: usize, d_ff: usize) -> SparsitySpec {
        SparsitySpec {
            heads: vec![vec![true; heads]; layers],
            mha: vec![true; layers],
            ffn: vec![true; layers],
            hidden: vec![true; d_model],
            intermediate: vec![vec![true; d_ff]; layers],
        }
    }

    pub fn all_zeros(layers: usize, heads: usize, d_model: usize, d_ff: usize) -> SparsitySpec {
        SparsitySpec {
            heads: vec![vec![false; heads]; layers],
            mha: vec![false; layers],
            ffn: vec![false; layers],
            hidden: vec![false; d_model],
            intermediate: vec![vec![false; d_ff]; layers],
        }
    }

    /// Deterministic spec aiming at overall sparsity `s`: the first
    /// `floor(s * H)` heads and `floor(s * d_ff)` intermediate dims of every
    /// layer are masked. Because head and FFN weight counts are linear in the
    /// masked-unit counts, the achieved [`sparsity_of`] tracks `s` closely and
    /// is monotone in it.
    pub fn uniform(cfg: &EncoderConfig, s: f64) -> SparsitySpec {
        let s = s.clamp(0.0, 1.0);
        let masked_heads = (s * cfg.heads as f64).floor() as usize;
        let masked_ff = (s * cfg.d_ff as f64).floor() as usize;
        let mut spec = SparsitySpec::all_ones(cfg.layers, cfg.heads, cfg.d_model, cfg.d_ff);
        for l in 0..cfg.layers {
            for h in 0..masked_heads.min(cfg.heads) {
                spec.heads[l][h] = false;
            }
            for i in 0..masked_ff.min(cfg.d_ff) {
                spec.intermediate[l][i] = false;
            }
        }
        spec.canonicalized()
    }

    pub fn layer_count(&self) -> usize {
        self.mha.len()
    }

    pub fn live_hidden_count(&self) -> usize {
        self.hidden.iter().filter(|&&b| b).count()
    }

    pub fn live_hidden_indices(&self) -> Vec<usize> {
        (0..self.hidden.len()).filter(|&c| self.hidden[c]).collect()
    }

    /// Internal shape consistency (row counts line up across fields).
    pub fn validate(&self) -> Result<()> {
        let l = self.mha.len();
        if self.ffn.len() != l || self.heads.len() != l || self.intermediate.len() != l {
            return Err(Error::Shape(format!(
                "spec field layer counts disagree: mha {l}, ffn {}, heads {}, intermediate {}",
                self.ffn.len(),
                self.heads.len(),
                self.intermediate.len()
            )));
        }
        Ok(())
    }

    /// Canonical form: masked sublayers force their fine units to zero, and
    /// sublayers with no live fine units become masked themselves.
    pub fn canonicalized(mut self) -> SparsitySpec {
        for l in 0..self.layer_count() {
            if !self.mha[l] {
                self.heads[l].iter_mut().for_each(|b| *b = false);
            } else if self.heads[l].iter().all(|&b| !b) {
                self.mha[l] = false;
            }
            if !self.ffn[l] {
                self.intermediate[l].iter_mut().for_each(|b| *b = false);
            } else if self.intermediate[l].iter().all(|&b| !b) {
                self.ffn[l] = false;
            }
        }
        self
    }

    pub fn is_canonical(&self) -> bool {
        (0..self.layer_count()).all(|l| {
            let heads_ok = if self.mha[l] {
                self.heads[l].iter().any(|&b| b)
            } else {
                self.heads[l].iter().all(|&b| !b)
            };
            let ffn_ok = if self.ffn[l] {
                self.intermediate[l].iter().any(|&b| b)
            } else {
                self.intermediate[l].iter().all(|&b| !b)
            };
            heads_ok && ffn_ok
        })
    }
}

/// Threshold real-valued scores into a canonical binary spec: a unit is kept
/// iff its score is `>= threshold`.
pub fn threshold_masks(scores: &MaskScores) -> SparsitySpec {
    let t = scores.threshold;
    let keep = |v: &f64| *v >= t;
    SparsitySpec {
        heads: scores
            .heads
            .iter()
            .map(|row| row.iter().map(keep).collect())
            .collect(),
        mha: scores.mha.iter().map(keep).collect(),
        ffn: scores.ffn.iter().map(keep).collect(),
        hidden: scores.hidden.iter().map(keep).collect(),
        intermediate: scores
            .intermediate
            .iter()
            .map(|row| row.iter().map(keep).collect())
            .collect(),
    }
    .canonicalized()
}

/// Fraction of prunable weights removed by `spec`. Prunable weights are the
/// Q/K/V/O projections and the two FFN matrices; embeddings, biases, layer
/// norms and task heads are excluded from the count.
pub fn sparsity_of(spec: &SparsitySpec, cfg: &EncoderConfig) -> Result<f64> {
    check_spec_dims(spec, cfg)?;
    let head_dim = cfg.d_model / cfg.heads;
    let d_live = spec.live_hidden_count();
    let mut live = 0usize;
    for l in 0..cfg.layers {
        if spec.mha[l] {
            let live_heads = spec.heads[l].iter().filter(|&&b| b).count();
            // Q, K, V: rows owned by live heads x live hidden inputs;
            // O: live hidden outputs x columns owned by live heads.
            live += 4 * live_heads * head_dim * d_live;
        }
        if spec.ffn[l] {
            let live_ff = spec.intermediate[l].iter().filter(|&&b| b).count();
            live += 2 * live_ff * d_live;
        }
    }
    let total = cfg.layers * (4 * cfg.d_model * cfg.d_model + 2 * cfg.d_model * cfg.d_ff);
    if total == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - live as f64 / total as f64)
}

fn check_spec_dims(spec: &SparsitySpec, cfg: &EncoderConfig) -> Result<()> {
    spec.validate()?;
    if spec.layer_count() != cfg.layers
        || spec.hidden.len() != cfg.d_model
        || spec.heads.iter().any(|h| h.len() != cfg.heads)
        || spec.intermediate.iter().any(|i| i.len() != cfg.d_ff)
    {
        return Err(Error::Shape(format!(
            "spec does not match config {cfg:?}"
        )));
    }
    if cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
        return Err(Error::Shape(format!(
            "config d_model {} not divisible by heads {}",
            cfg.d_model, cfg.heads
        )));
    }
    Ok(())
}

/// Zero out the weights of every masked unit, leaving dimensions unchanged.
/// Idempotent. For masked hidden coordinates this also clears the layer-norm
/// parameters and the task-head columns touching those coordinates.
pub fn apply_masks(model: &EncoderModel, spec: &SparsitySpec) -> Result<EncoderModel> {
    model.validate_spec(spec)?;
    let mut out = model.clone();
    let d = model.d_model;
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let attn = layer.attn.as_mut().expect("validated dense layer");
        let dh = attn.head_dim;
        if !spec.mha[l] {
            zero(&mut attn.wq);
            zero(&mut attn.wk);
            zero(&mut attn.wv);
            zero(&mut attn.wo);
            attn.ln_scale.iter_mut().for_each(|v| *v = 0.0);
            attn.ln_offset.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for h in 0..attn.heads {
                if !spec.heads[l][h] {
                    for r in h * dh..(h + 1) * dh {
                        zero_row(&mut attn.wq, r);
                        zero_row(&mut attn.wk, r);
                        zero_row(&mut attn.wv, r);
                        zero_col(&mut attn.wo, r);
                    }
                }
            }
        }
        let ffn = layer.ffn.as_mut().expect("validated dense layer");
        if !spec.ffn[l] {
            zero(&mut ffn.w_up);
            zero(&mut ffn.w_down);
            ffn.ln_scale.iter_mut().for_each(|v| *v = 0.0);
            ffn.ln_offset.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for i in 0..ffn.w_up.rows() {
                if !spec.intermediate[l][i] {
                    zero_row(&mut ffn.w_up, i);
                    zero_col(&mut ffn.w_down, i);
                }
            }
        }
    }
    for c in 0..d {
        if spec.hidden[c] {
            continue;
        }
        for layer in out.layers.iter_mut() {
            if let Some(attn) = layer.attn.as_mut() {
                zero_col(&mut attn.wq, c);
                zero_col(&mut attn.wk, c);
                zero_col(&mut attn.wv, c);
                zero_row(&mut attn.wo, c);
                attn.ln_scale[c] = 0.0;
                attn.ln_offset[c] = 0.0;
            }
            if let Some(ffn) = layer.ffn.as_mut() {
                zero_col(&mut ffn.w_up, c);
                zero_row(&mut ffn.w_down, c);
                ffn.ln_scale[c] = 0.0;
                ffn.ln_offset[c] = 0.0;
            }
        }
        zero_col(&mut out.classifier_w, c);
        zero_col(&mut out.vocab_proj, c);
    }
    Ok(out)
}

fn zero(m: &mut crate::math::Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn zero_row(m: &mut crate::math::Matrix, r: usize) {
    m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
}

fn zero_col(m: &mut crate::math::Matrix, c: usize) {
    for r in 0..m.rows() {
        m.set(r, c, 0.0);
    }
}

/// Physically remove the masked units, producing a smaller dense model.
///
/// For any input restricted to the live hidden coordinates, running the
/// compacted model dense equals running the original under `spec` (restricted
/// to the live coordinates). Layers whose sublayers are both masked are
/// dropped entirely; the surviving layers keep their relative order.
pub fn compact(model: &EncoderModel, spec: &SparsitySpec) -> Result<EncoderModel> {
    model.validate_spec(spec)?;
    if !spec.is_canonical() {
        return Err(Error::Shape(
            "compact requires a canonical spec (see SparsitySpec::canonicalized)".into(),
        ));
    }
    let live_hidden = spec.live_hidden_indices();
    if live_hidden.is_empty() {
        return Err(Error::Degenerate("all hidden dimensions masked".into()));
    }
    let mut layers = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let attn_src = layer.attn.as_ref().expect("validated dense layer");
        let ffn_src = layer.ffn.as_ref().expect("validated dense layer");
        let dh = attn_src.head_dim;
        let attn = if spec.mha[l] {
            let live_heads: Vec<usize> = (0..attn_src.heads).filter(|&h| spec.heads[l][h]).collect();
            let head_rows: Vec<usize> = live_heads
                .iter()
                .flat_map(|&h| (h * dh..(h + 1) * dh).collect::<Vec<_>>())
                .collect();
            Some(crate::encoder::AttnBlock {
                heads: live_heads.len(),
                head_dim: dh,
                wq: attn_src.wq.select_rows(&head_rows).select_cols(&live_hidden),
                wk: attn_src.wk.select_rows(&head_rows).select_cols(&live_hidden),
                wv: attn_src.wv.select_rows(&head_rows).select_cols(&live_hidden),
                wo: attn_src.wo.select_rows(&live_hidden).select_cols(&head_rows),
                ln_scale: live_hidden.iter().map(|&c| attn_src.ln_scale[c]).collect(),
                ln_offset: live_hidden.iter().map(|&c| attn_src.ln_offset[c]).collect(),
            })
        } else {
            None
        };
        let ffn = if spec.ffn[l] {
            let live_ff: Vec<usize> = (0..ffn_src.w_up.rows())
                .filter(|&i| spec.intermediate[l][i])
                .collect();
            Some(crate::encoder::FfnBlock {
                w_up: ffn_src.w_up.select_rows(&live_ff).select_cols(&live_hidden),
                w_down: ffn_src.w_down.select_rows(&live_hidden).select_cols(&live_ff),
                ln_scale: live_hidden.iter().map(|&c| ffn_src.ln_scale[c]).collect(),
                ln_offset: live_hidden.iter().map(|&c| ffn_src.ln_offset[c]).collect(),
            })
        } else {
            None
        };
        if attn.is_some() || ffn.is_some() {
            layers.push(EncoderLayer { attn, ffn });
        }
    }
    Ok(EncoderModel {
        d_model: live_hidden.len(),
        layers,
        classifier_w: model.classifier_w.select_cols(&live_hidden),
        classifier_b: model.classifier_b.clone(),
        vocab_proj: model.vocab_proj.select_cols(&live_hidden),
    })
}

/// Original layer indices that survive compaction under `spec`.
pub fn surviving_layers(spec: &SparsitySpec) -> Vec<usize> {
    (0..spec.layer_count())
        .filter(|&l| spec.mha[l] || spec.ffn[l])
        .collect()
}

/// Restrict a kit to the live hidden coordinates: every demultiplexing map
/// loses its masked input *and* output coordinates (the demux output feeds the
/// pruned classifier), and the key vectors are restricted too so the kit feeds
/// the compacted encoder directly.
pub fn align_demux(kit: &MuxKit, hidden_mask: &[bool]) -> Result<MuxKit> {
    if hidden_mask.len() != kit.demux_in_dim() {
        return Err(Error::Shape(format!(
            "hidden mask length {} vs demux input dimension {}",
            hidden_mask.len(),
            kit.demux_in_dim()
        )));
    }
    if hidden_mask.len() != kit.key_dim() {
        return Err(Error::Shape(format!(
            "hidden mask length {} vs key dimension {}",
            hidden_mask.len(),
            kit.key_dim()
        )));
    }
    let keep: Vec<usize> = (0..hidden_mask.len()).filter(|&c| hidden_mask[c]).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate(
            "demux alignment would leave zero live coordinates".into(),
        ));
    }
    let maps: Vec<DemuxMap> = (0..kit.n())
        .map(|i| kit.demux_map(i).restrict(&keep, &keep))
        .collect();
    let keys: Vec<Vec<f64>> = (0..kit.n())
        .map(|i| keep.iter().map(|&c| kit.key(i)[c]).collect())
        .collect();
    let mut out = kit.with_keys(keys);
    out.replace_demux(maps);
    Ok(out)
}
