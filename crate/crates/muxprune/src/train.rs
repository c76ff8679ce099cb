//! Desk-scale training loop: synthetic tasks, three training phases
//! (retrieval warm-up, multiplexed classification, prune-and-distill), and
//! finite-difference verification of every analytic gradient.
//!
//! Gradients are hand-derived for the fixed architecture; there is no general
//! autodiff. The optimizer is plain SGD with an optional linear learning-rate
//! decay. Training is single-threaded and bit-reproducible from
//! `(seed, config)`: batch order, stream sampling and all initialization come
//! from seeded ChaCha streams.

use serde::{Deserialize, Serialize};

use crate::distiller::{
    build_mapping, combined_loss, layer_loss_with_grads, DistillMapping, LossWeights,
};
use crate::encoder::{mean_pool, EncoderGrads, EncoderModel, LayerTrace};
use crate::math::{softmax, DeterministicRng, Matrix, RngKey};
use crate::muxer::{DemuxTape, KitGrads, MuxKit, TokenSequence, LOG_PROB_FLOOR};
use crate::pruner::{compact, surviving_layers, SparsitySpec};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

/// How group labels are derived from the token sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// Label = argmax of a fixed random linear map applied to the mean token
    /// embedding of the sequence (learnable by the encoder).
    MeanEmbedding,
    /// Label = first token id modulo the class count (degenerate rule; with
    /// `vocab == classes` the label equals the first token).
    FirstToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub seed: u64,
    pub vocab: usize,
    pub length: usize,
    pub classes: usize,
    /// Multiplexing width: sequences (and labels) per group.
    pub width: usize,
    /// Embedding dimension.
    pub dim: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub rule: LabelRule,
    /// Minimum best-vs-runner-up gap of the labeling scores; sequences closer
    /// to the decision boundary are resampled (0 disables the filter).
    pub margin: f64,
}

/// One multiplexed example: `width` token sequences with their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

/// A reproducible synthetic classification/retrieval task with a frozen
/// random embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub vocab: usize,
    pub length: usize,
    pub classes: usize,
    pub width: usize,
    /// `vocab x dim`, frozen.
    pub embeddings: Matrix,
    pub train: Vec<Group>,
    pub eval: Vec<Group>,
    pub seed: u64,
}

/// Generate a task. Deterministic in the config.
pub fn gen_task(cfg: &TaskGenConfig) -> Result<SyntheticTask> {
    if cfg.classes < 2 || cfg.vocab < cfg.classes {
        return Err(Error::Config(format!(
            "task needs vocab >= classes >= 2, got vocab {} classes {}",
            cfg.vocab, cfg.classes
        )));
    }
    if cfg.width == 0 || cfg.length == 0 || cfg.dim == 0 {
        return Err(Error::Config("task dimensions must be positive".into()));
    }
    let key = RngKey(cfg.seed);
    let mut emb_stream = key.derive(0x656d62).stream();
    let embeddings = Matrix::gaussian(cfg.vocab, cfg.dim, &mut emb_stream, 1.0);
    // The labeling rule has its own stream so datasets of different sizes
    // share the same rule.
    let mut rule_stream = key.derive(0x72756c).stream();
    let label_proj = Matrix::gaussian(cfg.classes, cfg.dim, &mut rule_stream, 1.0);

    // Label and the best-vs-runner-up gap of the labeling scores.
    let label_and_gap = |seq: &[usize]| -> (usize, f64) {
        match cfg.rule {
            LabelRule::FirstToken => (seq[0] % cfg.classes, f64::INFINITY),
            LabelRule::MeanEmbedding => {
                let mut mean = vec![0.0; cfg.dim];
                for &t in seq {
                    for (m, e) in mean.iter_mut().zip(embeddings.row(t)) {
                        *m += e;
                    }
                }
                let inv = 1.0 / seq.len() as f64;
                let mut scores: Vec<f64> = (0..cfg.classes)
                    .map(|c| {
                        label_proj
                            .row(c)
                            .iter()
                            .zip(&mean)
                            .map(|(w, m)| w * m * inv)
                            .sum()
                    })
                    .collect();
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(c, _)| c)
                    .unwrap();
                let top = scores[best];
                scores[best] = f64::NEG_INFINITY;
                let second = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (best, top - second)
            }
        }
    };

    let gen_split = |tag: u64, count: usize| -> Result<Vec<Group>> {
        let mut stream = key.derive(tag).stream();
        let sample_sequence = |stream: &mut crate::math::DeterministicRng| -> Result<(Vec<usize>, usize)> {
            for _ in 0..10_000 {
                let seq: Vec<usize> = (0..cfg.length)
                    .map(|_| stream.uniform_index(cfg.vocab))
                    .collect();
                let (label, gap) = label_and_gap(&seq);
                if gap >= cfg.margin {
                    return Ok((seq, label));
                }
            }
            Err(Error::Config(format!(
                "margin {} rejects virtually all sequences",
                cfg.margin
            )))
        };
        (0..count)
            .map(|_| {
                let mut sequences = Vec::with_capacity(cfg.width);
                let mut labels = Vec::with_capacity(cfg.width);
                for _ in 0..cfg.width {
                    let (seq, label) = sample_sequence(&mut stream)?;
                    sequences.push(seq);
                    labels.push(label);
                }
                Ok(Group { sequences, labels })
            })
            .collect()
    };
    let train = gen_split(0x747261, cfg.train_count)?;
    let eval = gen_split(0x657661, cfg.eval_count)?;
    Ok(SyntheticTask {
        vocab: cfg.vocab,
        length: cfg.length,
        classes: cfg.classes,
        width: cfg.width,
        embeddings,
        train,
        eval,
        seed: cfg.seed,
    })
}

impl SyntheticTask {
    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Look up the frozen embeddings for a token sequence.
    pub fn embed(&self, seq: &[usize]) -> TokenSequence {
        TokenSequence::new(Matrix::from_fn(seq.len(), self.dim(), |r, c| {
            self.embeddings.get(seq[r], c)
        }))
    }

    /// Embeddings restricted to the listed coordinates (pruned pipelines).
    pub fn embed_restricted(&self, seq: &[usize], keep: &[usize]) -> TokenSequence {
        TokenSequence::new(Matrix::from_fn(seq.len(), keep.len(), |r, c| {
            self.embeddings.get(seq[r], keep[c])
        }))
    }
}

// ---------------------------------------------------------------------------
// Training configuration and outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    RetrievalWarmup,
    Task,
    PruneDistill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    Constant,
    /// lr(e) = lr * (1 - e / epochs).
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Multiplexed groups per batch (raw inputs per batch = batch * width).
    pub batch: usize,
    pub phase: Phase,
    pub seed: u64,
    pub scheduler: Scheduler,
}

impl TrainConfig {
    fn validate(&self, expected_phase: Phase) -> Result<()> {
        if self.phase != expected_phase {
            return Err(Error::Config(format!(
                "config phase {:?} does not match the requested phase {:?}",
                self.phase, expected_phase
            )));
        }
        if self.lr < 0.0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config(
                "training needs lr >= 0, epochs >= 1, batch >= 1".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.scheduler {
            Scheduler::Constant => self.lr,
            Scheduler::Linear => self.lr * (1.0 - epoch as f64 / self.epochs as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// CSV rendering of a training history (`epoch,loss,accuracy`).
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.accuracy));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub kit: MuxKit,
    pub model: EncoderModel,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub kit: MuxKit,
    pub model: EncoderModel,
    pub mapping: DistillMapping,
    pub history: Vec<HistoryRow>,
    /// Eval accuracy of the compacted model before any tuning.
    pub masked_accuracy: f64,
    /// Eval accuracy after distillation.
    pub tuned_accuracy: f64,
}

// ---------------------------------------------------------------------------
// Batch losses and gradients
// ---------------------------------------------------------------------------

struct BatchGrads {
    enc: EncoderGrads,
    kit: KitGrads,
    mapping: Vec<Matrix>,
}

impl BatchGrads {
    fn zeros(kit: &MuxKit, model: &EncoderModel, mapping: Option<&DistillMapping>) -> BatchGrads {
        BatchGrads {
            enc: EncoderGrads::zeros_like(model),
            kit: KitGrads::zeros_like(kit),
            mapping: mapping
                .map(|m| {
                    m.entries
                        .iter()
                        .map(|e| Matrix::zeros(e.transform.rows(), e.transform.cols()))
                        .collect()
                })
                .unwrap_or_default(),
        }
    }
}

fn demux_with_tape(
    kit: &MuxKit,
    final_state: &Matrix,
    stream: usize,
) -> Result<(Matrix, DemuxTape)> {
    kit.demux_map(stream).apply_with_tape(final_state)
}

/// Softmax row gradient of `-log p[target]` with the retrieval clamp: rows
/// whose target probability sits at the floor contribute no gradient.
fn retrieval_d_logits(probs: &Matrix, targets: &[usize], scale: f64) -> Matrix {
    let mut d = Matrix::zeros(probs.rows(), probs.cols());
    for (j, &t) in targets.iter().enumerate() {
        if probs.get(j, t) <= LOG_PROB_FLOOR {
            continue;
        }
        let p_row = probs.row(j);
        let d_row = d.row_mut(j);
        for (dv, &pv) in d_row.iter_mut().zip(p_row) {
            *dv = scale * pv;
        }
        d_row[t] -= scale;
    }
    d
}

/// Mean retrieval loss over `groups` for one sampled stream index, with
/// gradients for the encoder, the demux map, and the vocabulary projection.
fn warmup_batch(
    kit: &MuxKit,
    model: &EncoderModel,
    task: &SyntheticTask,
    groups: &[&Group],
    stream_idx: usize,
    grads: Option<&mut BatchGrads>,
) -> Result<f64> {
    let inv_b = 1.0 / groups.len() as f64;
    let mut total = 0.0;
    let mut acc = grads;
    for group in groups {
        let inputs: Vec<TokenSequence> = group
            .sequences
            .iter()
            .map(|s| task.embed(s))
            .collect();
        let mixed = kit.multiplex(&inputs)?;
        let targets = &group.sequences[stream_idx];
        if let Some(g) = acc.as_deref_mut() {
            let (trace, tape) = model.encode_with_tape(&mixed)?;
            let final_state = trace.final_state();
            let (h, demux_tape) = demux_with_tape(kit, final_state, stream_idx)?;
            let mut probs = h.matmul_nt(&model.vocab_proj)?;
            for r in 0..probs.rows() {
                crate::math::softmax_in_place(probs.row_mut(r));
            }
            total += crate::muxer::retrieval_loss(&probs, targets)? * inv_b;

            let d_logits = retrieval_d_logits(&probs, targets, inv_b);
            g.enc
                .vocab_proj
                .add_scaled(&d_logits.matmul_tn(&h)?, 1.0);
            let d_h = d_logits.matmul(&model.vocab_proj)?;
            let d_final = kit.demux_map(stream_idx).backward(
                final_state,
                &demux_tape,
                &d_h,
                &mut g.kit.maps[stream_idx],
            );
            let d_states = vec![None; model.layer_count() + 1];
            model.backward(&tape, d_final, &d_states, &mut g.enc);
        } else {
            let trace = model.encode(None, &mixed)?;
            let h = kit.demultiplex(&TokenSequence::new(trace.final_state().clone()), stream_idx)?;
            let probs = model.vocab_probs(&h)?;
            total += crate::muxer::retrieval_loss(&probs, targets)? * inv_b;
        }
    }
    Ok(total)
}

/// Cross-entropy gradient of mean-pooled classification for one stream.
/// Returns the per-group loss contribution and accumulates gradients.
#[allow(clippy::too_many_arguments)]
fn classify_stream_backward(
    kit: &MuxKit,
    model: &EncoderModel,
    final_state: &Matrix,
    stream: usize,
    d_logits: &[f64],
    g: &mut BatchGrads,
    demux_tape: &DemuxTape,
    h: &Matrix,
    d_final: &mut Matrix,
) -> Result<()> {
    let d = h.cols();
    let pooled = mean_pool(h);
    // classifier grads
    for (cls, &dl) in d_logits.iter().enumerate() {
        g.enc.classifier_b[cls] += dl;
        for (gw, p) in g.enc.classifier_w.row_mut(cls).iter_mut().zip(&pooled) {
            *gw += dl * p;
        }
    }
    // d pooled -> d h rows
    let mut d_pooled = vec![0.0; d];
    for (cls, &dl) in d_logits.iter().enumerate() {
        for (dp, w) in d_pooled.iter_mut().zip(model.classifier_w.row(cls)) {
            *dp += dl * w;
        }
    }
    let inv_l = 1.0 / h.rows() as f64;
    let d_h = Matrix::from_fn(h.rows(), d, |_, j| d_pooled[j] * inv_l);
    let d_mixed = kit
        .demux_map(stream)
        .backward(final_state, demux_tape, &d_h, &mut g.kit.maps[stream]);
    d_final.add_scaled(&d_mixed, 1.0);
    Ok(())
}

/// Mean (over groups and streams) classification cross-entropy.
fn task_batch(
    kit: &MuxKit,
    model: &EncoderModel,
    task: &SyntheticTask,
    groups: &[&Group],
    grads: Option<&mut BatchGrads>,
) -> Result<f64> {
    let n = kit.n();
    let inv = 1.0 / (groups.len() * n) as f64;
    let mut total = 0.0;
    let mut acc = grads;
    for group in groups {
        let inputs: Vec<TokenSequence> = group.sequences.iter().map(|s| task.embed(s)).collect();
        let mixed = kit.multiplex(&inputs)?;
        if let Some(g) = acc.as_deref_mut() {
            let (trace, tape) = model.encode_with_tape(&mixed)?;
            let final_state = trace.final_state().clone();
            let mut d_final = Matrix::zeros(final_state.rows(), final_state.cols());
            for i in 0..n {
                let (h, demux_tape) = demux_with_tape(kit, &final_state, i)?;
                let pooled = mean_pool(&h);
                let probs = softmax(&model.classifier_logits(&pooled));
                let label = group.labels[i];
                total -= probs[label].max(LOG_PROB_FLOOR).ln() * inv;
                let mut d_logits: Vec<f64> = probs.iter().map(|p| p * inv).collect();
                d_logits[label] -= inv;
                classify_stream_backward(
                    kit,
                    model,
                    &final_state,
                    i,
                    &d_logits,
                    g,
                    &demux_tape,
                    &h,
                    &mut d_final,
                )?;
            }
            let d_states = vec![None; model.layer_count() + 1];
            model.backward(&tape, d_final, &d_states, &mut g.enc);
        } else {
            let trace = model.encode(None, &mixed)?;
            let final_state = TokenSequence::new(trace.final_state().clone());
            for i in 0..n {
                let h = kit.demultiplex(&final_state, i)?;
                let probs = model.classify_pooled(&mean_pool(h.as_matrix()));
                total -= probs[group.labels[i]].max(LOG_PROB_FLOOR).ln() * inv;
            }
        }
    }
    Ok(total)
}

/// Distillation batch: teacher soft-target cross-entropy at temperature plus
/// the layer-wise loss, combined with the loss weights.
#[allow(clippy::too_many_arguments)]
fn distill_batch(
    student_kit: &MuxKit,
    student_model: &EncoderModel,
    teacher_kit: &MuxKit,
    teacher_model: &EncoderModel,
    mapping: &DistillMapping,
    weights: &LossWeights,
    task: &SyntheticTask,
    keep: &[usize],
    groups: &[&Group],
    grads: Option<&mut BatchGrads>,
) -> Result<f64> {
    let n = student_kit.n();
    let temp = weights.temperature;
    let inv_b = 1.0 / groups.len() as f64;
    let inv_ce = 1.0 / (groups.len() * n) as f64;
    let mut ce_total = 0.0;
    let mut layer_total = 0.0;
    let mut acc = grads;
    for group in groups {
        // Teacher runs dense on the full embeddings.
        let t_inputs: Vec<TokenSequence> = group.sequences.iter().map(|s| task.embed(s)).collect();
        let t_mixed = teacher_kit.multiplex(&t_inputs)?;
        let t_trace = teacher_model.encode(None, &t_mixed)?;
        let t_final = TokenSequence::new(t_trace.final_state().clone());
        let teacher_soft: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let h = teacher_kit.demultiplex(&t_final, i)?;
                let logits = teacher_model.classifier_logits(&mean_pool(h.as_matrix()));
                Ok(softmax(&logits.iter().map(|l| l / temp).collect::<Vec<_>>()))
            })
            .collect::<Result<_>>()?;

        // Student runs on the live hidden coordinates.
        let s_inputs: Vec<TokenSequence> = group
            .sequences
            .iter()
            .map(|s| task.embed_restricted(s, keep))
            .collect();
        let s_mixed = student_kit.multiplex(&s_inputs)?;
        if let Some(g) = acc.as_deref_mut() {
            let (s_trace, tape) = student_model.encode_with_tape(&s_mixed)?;
            let final_state = s_trace.final_state().clone();
            let mut d_final = Matrix::zeros(final_state.rows(), final_state.cols());
            for (i, p_t) in teacher_soft.iter().enumerate() {
                let (h, demux_tape) = demux_with_tape(student_kit, &final_state, i)?;
                let logits = student_model.classifier_logits(&mean_pool(&h));
                let p_s = softmax(&logits.iter().map(|l| l / temp).collect::<Vec<_>>());
                ce_total -= p_t
                    .iter()
                    .zip(&p_s)
                    .map(|(t, s)| t * s.max(LOG_PROB_FLOOR).ln())
                    .sum::<f64>()
                    * inv_ce;
                let w = weights.ce_alpha * inv_ce / temp;
                let d_logits: Vec<f64> = p_s
                    .iter()
                    .zip(p_t)
                    .map(|(s, t)| (s - t) * w)
                    .collect();
                classify_stream_backward(
                    student_kit,
                    student_model,
                    &final_state,
                    i,
                    &d_logits,
                    g,
                    &demux_tape,
                    &h,
                    &mut d_final,
                )?;
            }
            let (l_loss, dw_list, d_taps) = layer_loss_with_grads(&s_trace, &t_trace, mapping)?;
            layer_total += l_loss * inv_b;
            for (gw, dw) in g.mapping.iter_mut().zip(&dw_list) {
                gw.add_scaled(dw, weights.layer_alpha * inv_b);
            }
            let mut d_states: Vec<Option<Matrix>> = vec![None; student_model.layer_count() + 1];
            for (idx, mut dh) in d_taps {
                dh.scale(weights.layer_alpha * inv_b);
                match &mut d_states[idx] {
                    Some(existing) => existing.add_scaled(&dh, 1.0),
                    slot => *slot = Some(dh),
                }
            }
            student_model.backward(&tape, d_final, &d_states, &mut g.enc);
        } else {
            let s_trace = student_model.encode(None, &s_mixed)?;
            let final_state = TokenSequence::new(s_trace.final_state().clone());
            for (i, p_t) in teacher_soft.iter().enumerate() {
                let h = student_kit.demultiplex(&final_state, i)?;
                let logits = student_model.classifier_logits(&mean_pool(h.as_matrix()));
                let p_s = softmax(&logits.iter().map(|l| l / temp).collect::<Vec<_>>());
                ce_total -= p_t
                    .iter()
                    .zip(&p_s)
                    .map(|(t, s)| t * s.max(LOG_PROB_FLOOR).ln())
                    .sum::<f64>()
                    * inv_ce;
            }
            let (l_loss, _, _) = layer_loss_with_grads(&s_trace, &t_trace, mapping)?;
            layer_total += l_loss * inv_b;
        }
    }
    Ok(combined_loss(ce_total, layer_total, weights))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-token retrieval accuracy over the eval split, averaged across all
/// streams.
pub fn retrieval_accuracy(kit: &MuxKit, model: &EncoderModel, task: &SyntheticTask) -> Result<f64> {
    let mut correct = 0usize;
    let mut count = 0usize;
    for group in &task.eval {
        let inputs: Vec<TokenSequence> = group.sequences.iter().map(|s| task.embed(s)).collect();
        let mixed = kit.multiplex(&inputs)?;
        let trace = model.encode(None, &mixed)?;
        let final_state = TokenSequence::new(trace.final_state().clone());
        for i in 0..kit.n() {
            let h = kit.demultiplex(&final_state, i)?;
            let probs = model.vocab_probs(&h)?;
            for (j, &t) in group.sequences[i].iter().enumerate() {
                let row = probs.row(j);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(k, _)| k)
                    .unwrap();
                correct += usize::from(argmax == t);
                count += 1;
            }
        }
    }
    Ok(correct as f64 / count as f64)
}

/// Eval classification accuracy over all streams. `keep` restricts the input
/// embeddings to live hidden coordinates (pruned pipelines); `None` runs the
/// dense pipeline.
pub fn classification_accuracy(
    kit: &MuxKit,
    model: &EncoderModel,
    task: &SyntheticTask,
    keep: Option<&[usize]>,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut count = 0usize;
    for group in &task.eval {
        let inputs: Vec<TokenSequence> = group
            .sequences
            .iter()
            .map(|s| match keep {
                Some(k) => task.embed_restricted(s, k),
                None => task.embed(s),
            })
            .collect();
        let mixed = kit.multiplex(&inputs)?;
        let trace = model.encode(None, &mixed)?;
        let final_state = TokenSequence::new(trace.final_state().clone());
        for i in 0..kit.n() {
            let h = kit.demultiplex(&final_state, i)?;
            let probs = model.classify_pooled(&mean_pool(h.as_matrix()));
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap();
            correct += usize::from(argmax == group.labels[i]);
            count += 1;
        }
    }
    Ok(correct as f64 / count as f64)
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn check_pipeline(kit: &MuxKit, model: &EncoderModel, task: &SyntheticTask) -> Result<()> {
    if kit.n() != task.width {
        return Err(Error::Shape(format!(
            "kit width {} vs task width {}",
            kit.n(),
            task.width
        )));
    }
    if kit.key_dim() != model.d_model || kit.demux_in_dim() != model.d_model {
        return Err(Error::Shape(format!(
            "kit dims (key {}, demux in {}) vs model d_model {}",
            kit.key_dim(),
            kit.demux_in_dim(),
            model.d_model
        )));
    }
    Ok(())
}

/// One epoch of batched SGD; returns the mean batch loss.
fn run_epoch(
    order: &mut [usize],
    rng: &mut DeterministicRng,
    batch: usize,
    mut step: impl FnMut(&[usize], &mut DeterministicRng) -> Result<f64>,
) -> Result<f64> {
    rng.shuffle(order);
    let mut epoch_loss = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch) {
        epoch_loss += step(chunk, rng)?;
        batches += 1;
    }
    Ok(epoch_loss / batches as f64)
}

fn guard_divergence(loss: f64, initial: f64) -> Result<()> {
    if !loss.is_finite() || loss > 10.0 * initial {
        return Err(Error::Divergence { loss, initial });
    }
    Ok(())
}

/// Phase 1: retrieval warm-up. Trains the encoder, the demux maps and the
/// vocabulary projection; one stream index is drawn uniformly per batch.
pub fn train_phase1(
    kit: &MuxKit,
    model: &EncoderModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(Phase::RetrievalWarmup)?;
    check_pipeline(kit, model, task)?;
    let mut kit = kit.clone();
    let mut model = model.clone();
    let mut rng = RngKey(cfg.seed).derive(0x7761726d).stream();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let kit_ref = &mut kit;
        let model_ref = &mut model;
        let loss = run_epoch(&mut order, &mut rng, cfg.batch, |chunk, rng| {
            let stream_idx = rng.uniform_index(task.width);
            let groups: Vec<&Group> = chunk.iter().map(|&i| &task.train[i]).collect();
            let mut grads = BatchGrads::zeros(kit_ref, model_ref, None);
            let loss = warmup_batch(
                kit_ref,
                model_ref,
                task,
                &groups,
                stream_idx,
                Some(&mut grads),
            )?;
            model_ref.add_scaled_grads(&grads.enc, -lr);
            kit_ref.add_scaled_demux_grads(&grads.kit, -lr);
            Ok(loss)
        })?;
        if epoch == 0 {
            initial = loss;
        }
        guard_divergence(loss, initial)?;
        let accuracy = retrieval_accuracy(&kit, &model, task)?;
        history.push(HistoryRow {
            epoch,
            loss,
            accuracy,
        });
    }
    Ok(TrainOutcome {
        kit,
        model,
        history,
    })
}

/// Phase 2: joint classification fine-tuning of all demuxed streams (mean of
/// the per-stream cross-entropies). Trains encoder, demux maps, classifier.
pub fn train_task(
    kit: &MuxKit,
    model: &EncoderModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(Phase::Task)?;
    check_pipeline(kit, model, task)?;
    let mut kit = kit.clone();
    let mut model = model.clone();
    let mut rng = RngKey(cfg.seed).derive(0x7461736b).stream();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let kit_ref = &mut kit;
        let model_ref = &mut model;
        let loss = run_epoch(&mut order, &mut rng, cfg.batch, |chunk, _| {
            let groups: Vec<&Group> = chunk.iter().map(|&i| &task.train[i]).collect();
            let mut grads = BatchGrads::zeros(kit_ref, model_ref, None);
            let loss = task_batch(kit_ref, model_ref, task, &groups, Some(&mut grads))?;
            model_ref.add_scaled_grads(&grads.enc, -lr);
            kit_ref.add_scaled_demux_grads(&grads.kit, -lr);
            Ok(loss)
        })?;
        if epoch == 0 {
            initial = loss;
        }
        guard_divergence(loss, initial)?;
        let accuracy = classification_accuracy(&kit, &model, task, None)?;
        history.push(HistoryRow {
            epoch,
            loss,
            accuracy,
        });
    }
    Ok(TrainOutcome {
        kit,
        model,
        history,
    })
}

/// Phase 3: compact the teacher under `spec`, align the demultiplexer, and
/// fine-tune the student under the combined distillation loss (teacher soft
/// targets at temperature + layer-wise loss through the mapping transforms).
pub fn train_prune_distill(
    teacher_kit: &MuxKit,
    teacher_model: &EncoderModel,
    spec: &SparsitySpec,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<DistillOutcome> {
    cfg.validate(Phase::PruneDistill)?;
    check_pipeline(teacher_kit, teacher_model, task)?;
    let mut student_model = compact(teacher_model, spec)?;
    let mut student_kit = crate::pruner::align_demux(teacher_kit, &spec.hidden)?;
    let keep = spec.live_hidden_indices();
    let live_layers = surviving_layers(spec);
    let mut mapping = build_mapping(&live_layers, teacher_model.layer_count(), &spec.hidden)?;

    let masked_accuracy =
        classification_accuracy(&student_kit, &student_model, task, Some(&keep))?;

    let mut rng = RngKey(cfg.seed).derive(0x707275).stream();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let kit_ref = &mut student_kit;
        let model_ref = &mut student_model;
        let mapping_ref = &mut mapping;
        let loss = run_epoch(&mut order, &mut rng, cfg.batch, |chunk, _| {
            let groups: Vec<&Group> = chunk.iter().map(|&i| &task.train[i]).collect();
            let mut grads = BatchGrads::zeros(kit_ref, model_ref, Some(mapping_ref));
            let loss = distill_batch(
                kit_ref,
                model_ref,
                teacher_kit,
                teacher_model,
                mapping_ref,
                weights,
                task,
                &keep,
                &groups,
                Some(&mut grads),
            )?;
            model_ref.add_scaled_grads(&grads.enc, -lr);
            kit_ref.add_scaled_demux_grads(&grads.kit, -lr);
            for (entry, g) in mapping_ref.entries.iter_mut().zip(&grads.mapping) {
                entry.transform.add_scaled(g, -lr);
            }
            Ok(loss)
        })?;
        if epoch == 0 {
            initial = loss;
        }
        guard_divergence(loss, initial)?;
        let accuracy =
            classification_accuracy(&student_kit, &student_model, task, Some(&keep))?;
        history.push(HistoryRow {
            epoch,
            loss,
            accuracy,
        });
    }
    let tuned_accuracy =
        classification_accuracy(&student_kit, &student_model, task, Some(&keep))?;
    Ok(DistillOutcome {
        kit: student_kit,
        model: student_model,
        mapping,
        history,
        masked_accuracy,
        tuned_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare an analytic gradient against central finite differences of `f` at
/// `point`. Returns the maximum relative error over coordinates, with the
/// denominator floored at 1e-2 so near-zero coordinates are judged on
/// absolute error.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "grad_check eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries vs {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut p = point.to_vec();
    let mut max_err: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let fp = f(&p);
        p[i] = orig - eps;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-2);
        max_err = max_err.max((fd - analytic[i]).abs() / denom);
    }
    Ok(max_err)
}

/// A tiny random training instance with flattened-parameter access, used to
/// verify every analytic gradient against finite differences.
#[derive(Clone)]
pub struct GradProbe {
    phase: Phase,
    kit: MuxKit,
    model: EncoderModel,
    mapping: Option<DistillMapping>,
    teacher: Option<(MuxKit, EncoderModel)>,
    weights: LossWeights,
    task: SyntheticTask,
    keep: Vec<usize>,
    stream_idx: usize,
}

impl GradProbe {
    /// Build a small random instance for the phase (2 layers, d=6, 2 heads,
    /// batch of 2 groups). Deterministic in `seed`.
    pub fn tiny(phase: Phase, seed: u64) -> Result<GradProbe> {
        use crate::encoder::EncoderConfig;
        use crate::muxer::{DemuxInit, DemuxKind, MuxKitConfig};
        let key = RngKey(seed);
        let task = gen_task(&TaskGenConfig {
            seed: key.derive(1).0,
            vocab: 6,
            length: 3,
            classes: 3,
            width: 2,
            dim: 6,
            train_count: 2,
            eval_count: 1,
            rule: LabelRule::MeanEmbedding,
            margin: 0.0,
        })?;
        let cfg = EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 6,
            d_ff: 8,
        };
        let model = EncoderModel::new(&cfg, 3, 6, key.derive(2))?;
        let kit = MuxKit::new(&MuxKitConfig {
            n: 2,
            dim: 6,
            seed: key.derive(3),
            demux: if seed.is_multiple_of(2) {
                DemuxKind::Affine
            } else {
                DemuxKind::Mlp { hidden: 5 }
            },
            init: DemuxInit::NoisyIdentity { scale: 0.1 },
        })?;
        let stream_idx = (seed % 2) as usize;
        let mut probe = GradProbe {
            phase,
            kit,
            model,
            mapping: None,
            teacher: None,
            weights: LossWeights::default(),
            task,
            keep: (0..6).collect(),
            stream_idx,
        };
        if phase == Phase::PruneDistill {
            // Prune one head, two intermediate dims and one hidden coordinate
            // so every transform path is exercised.
            let mut spec = SparsitySpec::all_ones(cfg.layers, cfg.heads, cfg.d_model, cfg.d_ff);
            spec.heads[0][(seed % 2) as usize] = false;
            spec.intermediate[1][2] = false;
            spec.intermediate[1][5] = false;
            spec.hidden[(seed % 6) as usize] = false;
            let spec = spec.canonicalized();
            let teacher_kit = probe.kit.clone();
            let teacher_model = probe.model.clone();
            probe.keep = spec.live_hidden_indices();
            probe.kit = crate::pruner::align_demux(&teacher_kit, &spec.hidden)?;
            probe.model = compact(&teacher_model, &spec)?;
            probe.mapping = Some(build_mapping(
                &surviving_layers(&spec),
                teacher_model.layer_count(),
                &spec.hidden,
            )?);
            probe.teacher = Some((teacher_kit, teacher_model));
        }
        Ok(probe)
    }

    fn groups(&self) -> Vec<&Group> {
        self.task.train.iter().collect()
    }

    /// Batch loss at the current parameters.
    pub fn loss(&self) -> Result<f64> {
        match self.phase {
            Phase::RetrievalWarmup => warmup_batch(
                &self.kit,
                &self.model,
                &self.task,
                &self.groups(),
                self.stream_idx,
                None,
            ),
            Phase::Task => task_batch(&self.kit, &self.model, &self.task, &self.groups(), None),
            Phase::PruneDistill => {
                let (tk, tm) = self.teacher.as_ref().expect("distill probe has teacher");
                distill_batch(
                    &self.kit,
                    &self.model,
                    tk,
                    tm,
                    self.mapping.as_ref().unwrap(),
                    &self.weights,
                    &self.task,
                    &self.keep,
                    &self.groups(),
                    None,
                )
            }
        }
    }

    /// Batch loss and the flat analytic gradient (same layout as
    /// [`GradProbe::params`]).
    pub fn loss_and_grads(&self) -> Result<(f64, Vec<f64>)> {
        let mut grads = BatchGrads::zeros(&self.kit, &self.model, self.mapping.as_ref());
        let loss = match self.phase {
            Phase::RetrievalWarmup => warmup_batch(
                &self.kit,
                &self.model,
                &self.task,
                &self.groups(),
                self.stream_idx,
                Some(&mut grads),
            )?,
            Phase::Task => task_batch(
                &self.kit,
                &self.model,
                &self.task,
                &self.groups(),
                Some(&mut grads),
            )?,
            Phase::PruneDistill => {
                let (tk, tm) = self.teacher.as_ref().expect("distill probe has teacher");
                distill_batch(
                    &self.kit,
                    &self.model,
                    tk,
                    tm,
                    self.mapping.as_ref().unwrap(),
                    &self.weights,
                    &self.task,
                    &self.keep,
                    &self.groups(),
                    Some(&mut grads),
                )?
            }
        };
        Ok((loss, self.flatten_grads(&grads)))
    }

    /// Flat view of the phase's trainable parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        visit_model_params(&self.model, self.phase, &mut |v| out.push(v));
        visit_kit_params(&self.kit, &mut |v| out.push(v));
        if let Some(m) = &self.mapping {
            for e in &m.entries {
                out.extend_from_slice(e.transform.data());
            }
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        assign_model_params(&mut self.model, self.phase, &mut it);
        assign_kit_params(&mut self.kit, &mut it);
        if let Some(m) = &mut self.mapping {
            for e in &mut m.entries {
                for v in e.transform.data_mut() {
                    *v = it.next().expect("parameter count");
                }
            }
        }
        assert!(it.next().is_none(), "parameter count mismatch");
    }

    fn flatten_grads(&self, grads: &BatchGrads) -> Vec<f64> {
        let mut out = Vec::new();
        visit_enc_grads(&grads.enc, self.phase, &mut |v| out.push(v));
        for g in &grads.kit.maps {
            match g {
                crate::muxer::DemuxGrads::Affine { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias);
                }
                crate::muxer::DemuxGrads::Mlp { w1, b1, w2, b2 } => {
                    out.extend_from_slice(w1.data());
                    out.extend_from_slice(b1);
                    out.extend_from_slice(w2.data());
                    out.extend_from_slice(b2);
                }
            }
        }
        for g in &grads.mapping {
            out.extend_from_slice(g.data());
        }
        out
    }
}

fn visit_model_params(model: &EncoderModel, phase: Phase, f: &mut impl FnMut(f64)) {
    for layer in &model.layers {
        if let Some(a) = &layer.attn {
            for m in [&a.wq, &a.wk, &a.wv, &a.wo] {
                m.data().iter().for_each(|&v| f(v));
            }
            a.ln_scale.iter().for_each(|&v| f(v));
            a.ln_offset.iter().for_each(|&v| f(v));
        }
        if let Some(ffn) = &layer.ffn {
            ffn.w_up.data().iter().for_each(|&v| f(v));
            ffn.w_down.data().iter().for_each(|&v| f(v));
            ffn.ln_scale.iter().for_each(|&v| f(v));
            ffn.ln_offset.iter().for_each(|&v| f(v));
        }
    }
    match phase {
        Phase::RetrievalWarmup => model.vocab_proj.data().iter().for_each(|&v| f(v)),
        Phase::Task | Phase::PruneDistill => {
            model.classifier_w.data().iter().for_each(|&v| f(v));
            model.classifier_b.iter().for_each(|&v| f(v));
        }
    }
}

fn pull_matrix(m: &mut Matrix, it: &mut impl Iterator<Item = f64>) {
    for v in m.data_mut() {
        *v = it.next().expect("parameter count");
    }
}

fn assign_model_params(model: &mut EncoderModel, phase: Phase, it: &mut impl Iterator<Item = f64>) {
    for layer in &mut model.layers {
        if let Some(a) = &mut layer.attn {
            pull_matrix(&mut a.wq, it);
            pull_matrix(&mut a.wk, it);
            pull_matrix(&mut a.wv, it);
            pull_matrix(&mut a.wo, it);
            for v in a.ln_scale.iter_mut().chain(a.ln_offset.iter_mut()) {
                *v = it.next().expect("parameter count");
            }
        }
        if let Some(ffn) = &mut layer.ffn {
            pull_matrix(&mut ffn.w_up, it);
            pull_matrix(&mut ffn.w_down, it);
            for v in ffn.ln_scale.iter_mut().chain(ffn.ln_offset.iter_mut()) {
                *v = it.next().expect("parameter count");
            }
        }
    }
    match phase {
        Phase::RetrievalWarmup => pull_matrix(&mut model.vocab_proj, it),
        Phase::Task | Phase::PruneDistill => {
            pull_matrix(&mut model.classifier_w, it);
            for v in model.classifier_b.iter_mut() {
                *v = it.next().expect("parameter count");
            }
        }
    }
}

fn visit_enc_grads(grads: &EncoderGrads, phase: Phase, f: &mut impl FnMut(f64)) {
    for layer in &grads.layers {
        if let Some(a) = &layer.attn {
            for m in [&a.wq, &a.wk, &a.wv, &a.wo] {
                m.data().iter().for_each(|&v| f(v));
            }
            a.ln_scale.iter().for_each(|&v| f(v));
            a.ln_offset.iter().for_each(|&v| f(v));
        }
        if let Some(ffn) = &layer.ffn {
            ffn.w_up.data().iter().for_each(|&v| f(v));
            ffn.w_down.data().iter().for_each(|&v| f(v));
            ffn.ln_scale.iter().for_each(|&v| f(v));
            ffn.ln_offset.iter().for_each(|&v| f(v));
        }
    }
    match phase {
        Phase::RetrievalWarmup => grads.vocab_proj.data().iter().for_each(|&v| f(v)),
        Phase::Task | Phase::PruneDistill => {
            grads.classifier_w.data().iter().for_each(|&v| f(v));
            grads.classifier_b.iter().for_each(|&v| f(v));
        }
    }
}

fn visit_kit_params(kit: &MuxKit, f: &mut impl FnMut(f64)) {
    for i in 0..kit.n() {
        match kit.demux_map(i) {
            crate::muxer::DemuxMap::Affine { weight, bias } => {
                weight.data().iter().for_each(|&v| f(v));
                bias.iter().for_each(|&v| f(v));
            }
            crate::muxer::DemuxMap::Mlp { w1, b1, w2, b2 } => {
                w1.data().iter().for_each(|&v| f(v));
                b1.iter().for_each(|&v| f(v));
                w2.data().iter().for_each(|&v| f(v));
                b2.iter().for_each(|&v| f(v));
            }
        }
    }
}

fn assign_kit_params(kit: &mut MuxKit, it: &mut impl Iterator<Item = f64>) {
    for i in 0..kit.n() {
        match kit.demux_map_mut(i) {
            crate::muxer::DemuxMap::Affine { weight, bias } => {
                for v in weight.data_mut() {
                    *v = it.next().expect("parameter count");
                }
                for v in bias.iter_mut() {
                    *v = it.next().expect("parameter count");
                }
            }
            crate::muxer::DemuxMap::Mlp { w1, b1, w2, b2 } => {
                for v in w1.data_mut() {
                    *v = it.next().expect("parameter count");
                }
                for v in b1.iter_mut() {
                    *v = it.next().expect("parameter count");
                }
                for v in w2.data_mut() {
                    *v = it.next().expect("parameter count");
                }
                for v in b2.iter_mut() {
                    *v = it.next().expect("parameter count");
                }
            }
        }
    }
}

/// Max relative error of the analytic gradient of one tiny phase instance
/// against central finite differences.
pub fn check_phase_gradients(phase: Phase, seed: u64, eps: f64) -> Result<f64> {
    let probe = GradProbe::tiny(phase, seed)?;
    let (_, analytic) = probe.loss_and_grads()?;
    let point = probe.params();
    let mut scratch = probe.clone();
    grad_check(
        |v| {
            scratch.set_params(v);
            scratch.loss().expect("probe loss")
        },
        &analytic,
        &point,
        eps,
    )
}

/// Gradient of the warm-up loss with respect to the raw stream embeddings —
/// this drives the loss backwards through the multiplexer itself.
pub fn check_input_gradients(seed: u64, eps: f64) -> Result<f64> {
    let probe = GradProbe::tiny(Phase::RetrievalWarmup, seed)?;
    let kit = probe.kit.clone();
    let model = probe.model.clone();
    let task = probe.task.clone();
    let group = task.train[0].clone();
    let stream_idx = probe.stream_idx;
    let n = kit.n();
    let len = task.length;
    let dim = task.dim();

    let loss_of = |flat: &[f64]| -> f64 {
        let inputs: Vec<TokenSequence> = (0..n)
            .map(|i| {
                TokenSequence::new(Matrix::from_fn(len, dim, |r, c| {
                    flat[i * len * dim + r * dim + c]
                }))
            })
            .collect();
        let mixed = kit.multiplex(&inputs).unwrap();
        let trace = model.encode(None, &mixed).unwrap();
        let h = kit
            .demultiplex(&TokenSequence::new(trace.final_state().clone()), stream_idx)
            .unwrap();
        let probs = model.vocab_probs(&h).unwrap();
        crate::muxer::retrieval_loss(&probs, &group.sequences[stream_idx]).unwrap()
    };

    // Analytic input gradient: encoder backward, then multiplex backward.
    let inputs: Vec<TokenSequence> = group.sequences.iter().map(|s| task.embed(s)).collect();
    let point: Vec<f64> = inputs
        .iter()
        .flat_map(|s| s.as_matrix().data().to_vec())
        .collect();
    let mixed = kit.multiplex(&inputs)?;
    let (trace, tape) = model.encode_with_tape(&mixed)?;
    let final_state = trace.final_state();
    let (h, demux_tape) = kit.demux_map(stream_idx).apply_with_tape(final_state)?;
    let mut probs = h.matmul_nt(&model.vocab_proj)?;
    for r in 0..probs.rows() {
        crate::math::softmax_in_place(probs.row_mut(r));
    }
    let d_logits = retrieval_d_logits(&probs, &group.sequences[stream_idx], 1.0);
    let d_h = d_logits.matmul(&model.vocab_proj)?;
    let mut grads = BatchGrads::zeros(&kit, &model, None);
    let d_final = kit.demux_map(stream_idx).backward(
        final_state,
        &demux_tape,
        &d_h,
        &mut grads.kit.maps[stream_idx],
    );
    let d_states = vec![None; model.layer_count() + 1];
    let d_mixed = model.backward(&tape, d_final, &d_states, &mut grads.enc);
    let analytic: Vec<f64> = (0..n)
        .flat_map(|i| kit.multiplex_backward(&d_mixed, i).data().to_vec())
        .collect();

    grad_check(loss_of, &analytic, &point, eps)
}

/// Gradient of the layer-wise distillation loss with respect to the mapping
/// transforms alone, on random traces.
pub fn check_transform_gradient(seed: u64, eps: f64) -> Result<f64> {
    let key = RngKey(seed);
    let mut s = key.derive(0x77).stream();
    let positions = 3;
    let d_student = 4;
    let d_teacher = 5;
    let layers = 2;
    let student = LayerTrace {
        states: (0..=layers)
            .map(|_| Matrix::gaussian(positions, d_student, &mut s, 1.0))
            .collect(),
        pooled: vec![0.0; d_student],
    };
    let teacher = LayerTrace {
        states: (0..=layers)
            .map(|_| Matrix::gaussian(positions, d_teacher, &mut s, 1.0))
            .collect(),
        pooled: vec![0.0; d_teacher],
    };
    let mut mapping = DistillMapping {
        entries: (0..layers)
            .map(|l| crate::distiller::MapEntry {
                student_layer: l,
                teacher_layer: l,
                transform: Matrix::gaussian(d_student, d_teacher, &mut s, 1.0),
            })
            .collect(),
    };
    let (_, dw, _) = layer_loss_with_grads(&student, &teacher, &mapping)?;
    let analytic: Vec<f64> = dw.iter().flat_map(|m| m.data().to_vec()).collect();
    let point: Vec<f64> = mapping
        .entries
        .iter()
        .flat_map(|e| e.transform.data().to_vec())
        .collect();
    grad_check(
        |v| {
            let mut offset = 0;
            for e in &mut mapping.entries {
                for t in e.transform.data_mut() {
                    *t = v[offset];
                    offset += 1;
                }
            }
            crate::distiller::layer_loss(&student, &teacher, &mapping).unwrap()
        },
        &analytic,
        &point,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::muxer::{DemuxInit, DemuxKind, MuxKitConfig};

    fn tiny_task(seed: u64, width: usize) -> SyntheticTask {
        gen_task(&TaskGenConfig {
            seed,
            vocab: 8,
            length: 4,
            classes: 2,
            width,
            dim: 8,
            train_count: 8,
            eval_count: 4,
            rule: LabelRule::MeanEmbedding,
            margin: 0.0,
        })
        .unwrap()
    }

    fn tiny_pipeline(seed: u64, width: usize) -> (MuxKit, EncoderModel) {
        let model = EncoderModel::new(
            &crate::encoder::EncoderConfig {
                layers: 2,
                heads: 2,
                d_model: 8,
                d_ff: 12,
            },
            2,
            8,
            RngKey(seed),
        )
        .unwrap();
        let kit = MuxKit::new(&MuxKitConfig {
            n: width,
            dim: 8,
            seed: RngKey(seed ^ 0xabc),
            demux: DemuxKind::Affine,
            init: DemuxInit::Identity,
        })
        .unwrap();
        (kit, model)
    }

    #[test]
    fn gen_task_is_deterministic() {
        let cfg = TaskGenConfig {
            seed: 5,
            vocab: 16,
            length: 6,
            classes: 3,
            width: 2,
            dim: 8,
            train_count: 10,
            eval_count: 5,
            rule: LabelRule::MeanEmbedding,
            margin: 0.0,
        };
        assert_eq!(gen_task(&cfg).unwrap(), gen_task(&cfg).unwrap());
    }

    #[test]
    fn gen_task_binary_labels_are_balanced() {
        let task = gen_task(&TaskGenConfig {
            seed: 11,
            vocab: 16,
            length: 6,
            classes: 2,
            width: 1,
            dim: 8,
            train_count: 1000,
            eval_count: 1,
            rule: LabelRule::MeanEmbedding,
            margin: 0.0,
        })
        .unwrap();
        let ones: usize = task.train.iter().map(|g| g.labels[0]).sum();
        let frac = ones as f64 / 1000.0;
        assert!((0.4..=0.6).contains(&frac), "class balance {frac}");
    }

    #[test]
    fn gen_task_first_token_rule() {
        let task = gen_task(&TaskGenConfig {
            seed: 3,
            vocab: 4,
            length: 5,
            classes: 4,
            width: 2,
            dim: 6,
            train_count: 20,
            eval_count: 5,
            rule: LabelRule::FirstToken,
            margin: 0.0,
        })
        .unwrap();
        for g in task.train.iter().chain(&task.eval) {
            for (seq, &label) in g.sequences.iter().zip(&g.labels) {
                assert_eq!(label, seq[0]);
            }
        }
    }

    #[test]
    fn gen_task_rejects_vocab_below_classes() {
        let mut cfg = TaskGenConfig {
            seed: 1,
            vocab: 2,
            length: 3,
            classes: 3,
            width: 1,
            dim: 4,
            train_count: 2,
            eval_count: 1,
            rule: LabelRule::MeanEmbedding,
            margin: 0.0,
        };
        assert!(gen_task(&cfg).is_err());
        cfg.vocab = 3;
        cfg.classes = 1;
        assert!(gen_task(&cfg).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let task = tiny_task(21, 2);
        let (kit, model) = tiny_pipeline(22, 2);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch: 4,
            phase: Phase::RetrievalWarmup,
            seed: 1,
            scheduler: Scheduler::Constant,
        };
        let out = train_phase1(&kit, &model, &task, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.kit, kit);

        let cfg = TrainConfig {
            phase: Phase::Task,
            ..cfg
        };
        let out = train_task(&kit, &model, &task, &cfg).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let task = tiny_task(31, 2);
        let (kit, model) = tiny_pipeline(32, 2);
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 3,
            batch: 4,
            phase: Phase::Task,
            seed: 7,
            scheduler: Scheduler::Linear,
        };
        let a = train_task(&kit, &model, &task, &cfg).unwrap();
        let b = train_task(&kit, &model, &task, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.kit, b.kit);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn single_step_with_small_lr_descends() {
        // One batch step at lr = 1e-5 must not increase the batch loss.
        for trial in 0..20 {
            let phase = match trial % 3 {
                0 => Phase::RetrievalWarmup,
                1 => Phase::Task,
                _ => Phase::PruneDistill,
            };
            let probe = GradProbe::tiny(phase, 300 + trial).unwrap();
            let (loss_before, grads) = probe.loss_and_grads().unwrap();
            let mut stepped = probe.clone();
            let params = probe.params();
            let new_params: Vec<f64> = params
                .iter()
                .zip(&grads)
                .map(|(p, g)| p - 1e-5 * g)
                .collect();
            stepped.set_params(&new_params);
            let loss_after = stepped.loss().unwrap();
            assert!(
                loss_after <= loss_before + 1e-12,
                "trial {trial}: {loss_before} -> {loss_after}"
            );
        }
    }

    #[test]
    fn divergence_is_detected() {
        let task = tiny_task(41, 2);
        let (kit, model) = tiny_pipeline(42, 2);
        let cfg = TrainConfig {
            lr: 500.0,
            epochs: 30,
            batch: 8,
            phase: Phase::RetrievalWarmup,
            seed: 3,
            scheduler: Scheduler::Constant,
        };
        match train_phase1(&kit, &model, &task, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        // ||p||^2 at p = (1, 2): central differences are exact on quadratics.
        let f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let point = [1.0, 2.0];
        let analytic = [2.0, 4.0];
        let err = grad_check(f, &analytic, &point, 1e-5).unwrap();
        assert!(err <= 1e-8, "error {err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        assert!(grad_check(|_| 0.0, &[], &[], 0.0).is_err());
        assert!(grad_check(|_| 0.0, &[], &[], 0.1).is_err());
    }

    #[test]
    fn warmup_gradients_match_finite_differences() {
        for seed in 0..2 {
            let err = check_phase_gradients(Phase::RetrievalWarmup, seed, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn task_gradients_match_finite_differences() {
        for seed in 0..2 {
            let err = check_phase_gradients(Phase::Task, seed, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn distill_gradients_match_finite_differences() {
        for seed in 0..2 {
            let err = check_phase_gradients(Phase::PruneDistill, seed, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn input_gradients_flow_through_multiplexer() {
        let err = check_input_gradients(5, 1e-5).unwrap();
        assert!(err <= 1e-4, "error {err}");
    }

    #[test]
    fn transform_gradient_is_tight() {
        let err = check_transform_gradient(9, 1e-5).unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn distill_with_all_ones_spec_starts_at_zero_layer_loss() {
        let task = tiny_task(51, 2);
        let (kit, model) = tiny_pipeline(52, 2);
        let spec = SparsitySpec::all_ones(2, 2, 8, 12);
        let mapping = build_mapping(&[0, 1], 2, &[true; 8]).unwrap();
        let group_refs: Vec<&Group> = task.train.iter().take(2).collect();
        // Student == teacher: the layer term is exactly zero and the CE term is
        // the teacher's own soft-target entropy.
        let loss = distill_batch(
            &kit,
            &model,
            &kit,
            &model,
            &mapping,
            &LossWeights::default(),
            &task,
            &spec.live_hidden_indices(),
            &group_refs,
            None,
        )
        .unwrap();
        // Compute the expected self-entropy term.
        let temp = 2.0;
        let mut entropy = 0.0;
        let n = kit.n();
        for group in task.train.iter().take(2) {
            let inputs: Vec<TokenSequence> =
                group.sequences.iter().map(|s| task.embed(s)).collect();
            let mixed = kit.multiplex(&inputs).unwrap();
            let trace = model.encode(None, &mixed).unwrap();
            let final_state = TokenSequence::new(trace.final_state().clone());
            for i in 0..n {
                let h = kit.demultiplex(&final_state, i).unwrap();
                let logits = model.classifier_logits(&mean_pool(h.as_matrix()));
                let p = softmax(&logits.iter().map(|l| l / temp).collect::<Vec<_>>());
                entropy -= p.iter().map(|v| v * v.ln()).sum::<f64>();
            }
        }
        entropy /= (2 * n) as f64;
        let expected = combined_loss(entropy, 0.0, &LossWeights::default());
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn history_csv_format() {
        let rows = vec![
            HistoryRow {
                epoch: 0,
                loss: 1.5,
                accuracy: 0.25,
            },
            HistoryRow {
                epoch: 1,
                loss: 0.75,
                accuracy: 0.5,
            },
        ];
        assert_eq!(
            history_csv(&rows),
            "epoch,loss,accuracy\n0,1.5,0.25\n1,0.75,0.5\n"
        );
    }
}
