//! Layer-wise distillation between a dense teacher trace and a pruned
//! student trace.
//!
//! Each surviving student layer is matched to the teacher layer with the same
//! original index (static matching, deterministic by construction), and a
//! trainable transform carries the student's hidden space back to the
//! teacher's: the loss is `sum_{i in tau} MSE(H_s^{m(i)} * W_i, H_t^i)` with
//! the MSE averaged over positions and coordinates. `W_i` starts as the
//! row-selection of the identity picking the live hidden coordinates.

use serde::{Deserialize, Serialize};

use crate::encoder::LayerTrace;
use crate::math::Matrix;
use crate::{Error, Result};

/// One matched (student layer, teacher layer) pair and its transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    /// Index into the student trace's layer outputs (position among surviving
    /// layers).
    pub student_layer: usize,
    /// Original index in the teacher.
    pub teacher_layer: usize,
    /// `student_hidden x teacher_hidden`; prediction is `H_s * transform`.
    pub transform: Matrix,
}

/// The matched set and transforms for [`layer_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillMapping {
    pub entries: Vec<MapEntry>,
}

/// Mixing weights for the combined pruning loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub layer_alpha: f64,
    pub ce_alpha: f64,
    pub temperature: f64,
}

impl LossWeights {
    pub fn new(layer_alpha: f64, ce_alpha: f64, temperature: f64) -> Result<LossWeights> {
        if !(0.0..=1.0).contains(&layer_alpha) || !(0.0..=1.0).contains(&ce_alpha) {
            return Err(Error::Config(format!(
                "loss alphas must lie in [0, 1], got layer {layer_alpha} / ce {ce_alpha}"
            )));
        }
        if (layer_alpha + ce_alpha - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "layer_alpha + ce_alpha must equal 1, got {}",
                layer_alpha + ce_alpha
            )));
        }
        if temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(LossWeights {
            layer_alpha,
            ce_alpha,
            temperature,
        })
    }
}

impl Default for LossWeights {
    /// The usual pruning-distillation mix: layer 0.9 / ce 0.1, temperature 2.
    fn default() -> LossWeights {
        LossWeights {
            layer_alpha: 0.9,
            ce_alpha: 0.1,
            temperature: 2.0,
        }
    }
}

/// Build the mapping for a student whose surviving layers are
/// `student_live_layers` (original indices, strictly increasing) and whose
/// hidden mask is `hidden_mask` over the teacher's hidden dimension. Each
/// transform starts as the live-row selection of the identity.
pub fn build_mapping(
    student_live_layers: &[usize],
    teacher_layers: usize,
    hidden_mask: &[bool],
) -> Result<DistillMapping> {
    if student_live_layers.is_empty() {
        return Err(Error::Degenerate("student has no surviving layers".into()));
    }
    if student_live_layers
        .windows(2)
        .any(|w| w[0] >= w[1])
    {
        return Err(Error::Shape(
            "student layer indices must be strictly increasing".into(),
        ));
    }
    if *student_live_layers.last().unwrap() >= teacher_layers {
        return Err(Error::IndexOutOfRange {
            what: "teacher layer",
            index: *student_live_layers.last().unwrap(),
            len: teacher_layers,
        });
    }
    let live: Vec<usize> = (0..hidden_mask.len()).filter(|&c| hidden_mask[c]).collect();
    if live.is_empty() {
        return Err(Error::Degenerate("hidden mask keeps no coordinates".into()));
    }
    let d_teacher = hidden_mask.len();
    let selection = {
        let mut m = Matrix::zeros(live.len(), d_teacher);
        for (r, &c) in live.iter().enumerate() {
            m.set(r, c, 1.0);
        }
        m
    };
    let entries = student_live_layers
        .iter()
        .enumerate()
        .map(|(pos, &orig)| MapEntry {
            student_layer: pos,
            teacher_layer: orig,
            transform: selection.clone(),
        })
        .collect();
    Ok(DistillMapping { entries })
}

/// `sum_{i in tau} MSE(H_s^{m(i)} * W_i, H_t^i)`, MSE averaged over positions
/// and teacher-hidden coordinates.
pub fn layer_loss(
    student: &LayerTrace,
    teacher: &LayerTrace,
    mapping: &DistillMapping,
) -> Result<f64> {
    Ok(layer_loss_impl(student, teacher, mapping, None)?.0)
}

/// As [`layer_loss`], additionally producing per-entry transform gradients and
/// gradients with respect to the tapped student states.
#[allow(clippy::type_complexity)]
pub(crate) fn layer_loss_with_grads(
    student: &LayerTrace,
    teacher: &LayerTrace,
    mapping: &DistillMapping,
) -> Result<(f64, Vec<Matrix>, Vec<(usize, Matrix)>)> {
    let mut grads = Vec::with_capacity(mapping.entries.len());
    let (loss, d_states) = layer_loss_impl(student, teacher, mapping, Some(&mut grads))?;
    Ok((loss, grads, d_states))
}

fn layer_loss_impl(
    student: &LayerTrace,
    teacher: &LayerTrace,
    mapping: &DistillMapping,
    mut transform_grads: Option<&mut Vec<Matrix>>,
) -> Result<(f64, Vec<(usize, Matrix)>)> {
    let mut total = 0.0;
    let mut d_states = Vec::new();
    for entry in &mapping.entries {
        let s_state = student
            .states
            .get(entry.student_layer + 1)
            .ok_or(Error::IndexOutOfRange {
                what: "student trace entry",
                index: entry.student_layer + 1,
                len: student.states.len(),
            })?;
        let t_state = teacher
            .states
            .get(entry.teacher_layer + 1)
            .ok_or(Error::IndexOutOfRange {
                what: "teacher trace entry",
                index: entry.teacher_layer + 1,
                len: teacher.states.len(),
            })?;
        if s_state.cols() != entry.transform.rows() {
            return Err(Error::Shape(format!(
                "student hidden {} vs transform rows {}",
                s_state.cols(),
                entry.transform.rows()
            )));
        }
        if t_state.cols() != entry.transform.cols() || t_state.rows() != s_state.rows() {
            return Err(Error::Shape(format!(
                "teacher state {}x{} incompatible with transform {}x{} over {} positions",
                t_state.rows(),
                t_state.cols(),
                entry.transform.rows(),
                entry.transform.cols(),
                s_state.rows()
            )));
        }
        let mut diff = s_state.matmul(&entry.transform)?;
        diff.add_scaled(t_state, -1.0);
        let count = (t_state.rows() * t_state.cols()) as f64;
        total += diff.data().iter().map(|v| v * v).sum::<f64>() / count;
        if let Some(grads) = transform_grads.as_deref_mut() {
            // d/dW of mean(diff^2) = (2/count) * H_s^T diff;
            // d/dH_s = (2/count) * diff W^T.
            let mut dw = s_state.matmul_tn(&diff)?;
            dw.scale(2.0 / count);
            grads.push(dw);
            let mut dh = diff.matmul_nt(&entry.transform)?;
            dh.scale(2.0 / count);
            d_states.push((entry.student_layer + 1, dh));
        }
    }
    Ok((total, d_states))
}

/// `ce_alpha * ce + layer_alpha * layer`.
pub fn combined_loss(ce: f64, layer: f64, w: &LossWeights) -> f64 {
    w.ce_alpha * ce + w.layer_alpha * layer
}
