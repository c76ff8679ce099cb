//! File formats and persistence: model bundles (JSON), measurement tables
//! (CSV), fitted planner models (JSON), sparsity specs / mask scores (JSON),
//! and the TOML training settings consumed by the `train` command.
//!
//! Every structured format carries a `format_version` field. JSON floats are
//! written in shortest round-trip form, so saving and reloading a bundle
//! reproduces the exact same numbers (and therefore identical forward
//! outputs).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::muxer::{DemuxInit, DemuxKind, MuxKit};
use crate::planner::{MeasurementRecord, PlannerModel};
use crate::pruner::{MaskScores, SparsitySpec};
use crate::train::{LabelRule, Phase, Scheduler, TaskGenConfig, TrainConfig};
use crate::{Error, Result};

/// On-disk format version for model bundles.
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Exact header required of measurement CSV files.
pub const MEASUREMENTS_HEADER: &str = "task,n,sparsity,accuracy,throughput";

// ---------------------------------------------------------------------------
// Model bundles
// ---------------------------------------------------------------------------

/// Where a bundle came from: seeds, phase history, applied sparsity, and the
/// pre-compaction dimensions (the dense baseline used for multipliers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: String,
    pub seed: u64,
    pub phases: Vec<String>,
    /// Fraction of prunable weights removed so far (0 for dense bundles).
    pub sparsity: f64,
    /// Dimensions of the original dense model.
    pub original: EncoderConfig,
}

/// Encoder + mux kit + sparsity spec + provenance, the unit of persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub provenance: Provenance,
    pub kit: MuxKit,
    pub model: EncoderModel,
    pub spec: SparsitySpec,
}

impl ModelBundle {
    pub fn new(
        provenance: Provenance,
        kit: MuxKit,
        model: EncoderModel,
        spec: SparsitySpec,
    ) -> ModelBundle {
        ModelBundle {
            format_version: BUNDLE_FORMAT_VERSION,
            provenance,
            kit,
            model,
            spec,
        }
    }

    /// Internal dimension consistency across kit, model and spec.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: BUNDLE_FORMAT_VERSION,
            });
        }
        let d = self.model.d_model;
        if self.kit.key_dim() != d || self.kit.demux_in_dim() != d {
            return Err(Error::Shape(format!(
                "kit dims (key {}, demux in {}) vs model d_model {d}",
                self.kit.key_dim(),
                self.kit.demux_in_dim()
            )));
        }
        let out = self.kit.demux_out_dim();
        if self.model.classifier_w.cols() != out || self.model.vocab_proj.cols() != out {
            return Err(Error::Shape(format!(
                "demux output dim {out} vs classifier input {} / vocab projection input {}",
                self.model.classifier_w.cols(),
                self.model.vocab_proj.cols()
            )));
        }
        self.spec.validate()?;
        if self.spec.layer_count() != self.model.layers.len()
            || self.spec.hidden.len() != d
        {
            return Err(Error::Shape(format!(
                "spec shape ({} layers, {} hidden) vs model ({} layers, {d} hidden)",
                self.spec.layer_count(),
                self.spec.hidden.len(),
                self.model.layers.len()
            )));
        }
        for (l, layer) in self.model.layers.iter().enumerate() {
            let heads = layer.attn.as_ref().map_or(0, |a| a.heads);
            if self.spec.heads[l].len() != heads {
                return Err(Error::Shape(format!(
                    "spec lists {} heads for layer {l}, model has {heads}",
                    self.spec.heads[l].len()
                )));
            }
            let ff = layer.ffn.as_ref().map_or(0, |f| f.w_up.rows());
            if self.spec.intermediate[l].len() != ff {
                return Err(Error::Shape(format!(
                    "spec lists {} intermediate dims for layer {l}, model has {ff}",
                    self.spec.intermediate[l].len()
                )));
            }
        }
        Ok(())
    }
}

/// All-ones spec matching the shape of a possibly compacted model (absent
/// sublayers get empty rows with their coarse bit cleared).
pub fn dense_spec_for(model: &EncoderModel) -> SparsitySpec {
    SparsitySpec {
        heads: model
            .layers
            .iter()
            .map(|l| vec![true; l.attn.as_ref().map_or(0, |a| a.heads)])
            .collect(),
        mha: model.layers.iter().map(|l| l.attn.is_some()).collect(),
        ffn: model.layers.iter().map(|l| l.ffn.is_some()).collect(),
        hidden: vec![true; model.d_model],
        intermediate: model
            .layers
            .iter()
            .map(|l| vec![true; l.ffn.as_ref().map_or(0, |f| f.w_up.rows())])
            .collect(),
    }
}

pub fn save_bundle(path: impl AsRef<Path>, bundle: &ModelBundle) -> Result<()> {
    bundle.validate()?;
    fs::write(path, serde_json::to_string_pretty(bundle)?)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let text = fs::read_to_string(path)?;
    let bundle: ModelBundle = serde_json::from_str(&text)?;
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Measurement CSV
// ---------------------------------------------------------------------------

/// Parse a measurement CSV with the exact [`MEASUREMENTS_HEADER`]. Rows are
/// validated (ranges, widths, duplicates) and errors name the offending line.
pub fn load_measurements(path: impl AsRef<Path>) -> Result<Vec<MeasurementRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_measurements(&text, &path.display().to_string())
}

pub fn parse_measurements(text: &str, origin: &str) -> Result<Vec<MeasurementRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MEASUREMENTS_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: origin.to_string(),
                row: 1,
                msg: format!(
                    "header must be exactly {MEASUREMENTS_HEADER:?}, got {:?}",
                    other.unwrap_or_default()
                ),
            })
        }
    }
    let mut records: Vec<MeasurementRecord> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: origin.to_string(),
                row,
                msg: format!("expected 5 comma-separated fields, got {}", fields.len()),
            });
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: origin.to_string(),
                row,
                msg: format!("bad {what} {s:?}: {e}"),
            })
        };
        let record = MeasurementRecord {
            task: fields[0].trim().to_string(),
            n: parse_f64(fields[1], "width")?,
            sparsity: parse_f64(fields[2], "sparsity")?,
            accuracy: parse_f64(fields[3], "accuracy")?,
            throughput: parse_f64(fields[4], "throughput")?,
        };
        record.validate().map_err(|e| Error::Parse {
            path: origin.to_string(),
            row,
            msg: e.to_string(),
        })?;
        if records
            .iter()
            .any(|r| r.task == record.task && r.n == record.n && r.sparsity == record.sparsity)
        {
            return Err(Error::Parse {
                path: origin.to_string(),
                row,
                msg: format!(
                    "duplicate measurement for ({}, {}, {})",
                    record.task, record.n, record.sparsity
                ),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn measurements_to_string(records: &[MeasurementRecord]) -> String {
    let mut out = String::from(MEASUREMENTS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task, r.n, r.sparsity, r.accuracy, r.throughput
        ));
    }
    out
}

pub fn save_measurements(path: impl AsRef<Path>, records: &[MeasurementRecord]) -> Result<()> {
    fs::write(path, measurements_to_string(records))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Planner model JSON
// ---------------------------------------------------------------------------

pub fn save_planner_model(path: impl AsRef<Path>, model: &PlannerModel) -> Result<()> {
    model.check_version()?;
    fs::write(path, serde_json::to_string_pretty(model)?)?;
    Ok(())
}

pub fn load_planner_model(path: impl AsRef<Path>) -> Result<PlannerModel> {
    let model: PlannerModel = serde_json::from_str(&fs::read_to_string(path)?)?;
    model.check_version()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Sparsity spec / mask score files
// ---------------------------------------------------------------------------

/// Contents of a `--spec` file: either binary masks, or real-valued scores
/// (recognized by the presence of a `threshold` field) that the prune
/// pipeline thresholds first.
#[derive(Debug, Clone, PartialEq)]
pub enum PruneInput {
    Spec(SparsitySpec),
    Scores(MaskScores),
}

pub fn load_prune_input(path: impl AsRef<Path>) -> Result<PruneInput> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("threshold").is_some() {
        Ok(PruneInput::Scores(serde_json::from_value(value)?))
    } else {
        Ok(PruneInput::Spec(serde_json::from_value(value)?))
    }
}

pub fn save_spec(path: impl AsRef<Path>, spec: &SparsitySpec) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training settings (TOML)
// ---------------------------------------------------------------------------

/// The `train --config` file. Epoch counts here are toy-scale; large-model
/// pruning recipes run 20-40 epochs over far larger corpora, which this
/// harness does not attempt.
#[derive(Debug, Clone, Deserialize)]
pub struct TrainSettings {
    pub task: TaskSection,
    pub model: EncoderConfig,
    #[serde(default)]
    pub mux: MuxSection,
    pub train: TrainSection,
    pub distill: Option<DistillSection>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TaskSection {
    /// Task name carried into bundle provenance and bench CSV rows.
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub vocab: usize,
    pub length: usize,
    pub classes: usize,
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    #[serde(default = "default_rule")]
    pub rule: LabelRule,
    #[serde(default)]
    pub margin: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MuxSection {
    #[serde(default = "default_demux")]
    pub demux: DemuxKind,
    #[serde(default = "default_init")]
    pub init: DemuxInit,
}

impl Default for MuxSection {
    fn default() -> MuxSection {
        MuxSection {
            demux: default_demux(),
            init: default_init(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    /// Multiplexed groups per batch; raw inputs per batch = batch * width.
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_scheduler")]
    pub scheduler: Scheduler,
    /// Optional bundle to continue from (task phase after warm-up).
    pub init_bundle: Option<String>,
}

/// Distillation mix: `layer_alpha`/`ce_alpha` follow the usual pruning
/// recipes (0.9/0.1, 0.7/0.3 or 0.5/0.5) with soft targets at temperature 2.
#[derive(Debug, Clone, Deserialize)]
pub struct DistillSection {
    #[serde(default = "default_layer_alpha")]
    pub layer_alpha: f64,
    #[serde(default = "default_ce_alpha")]
    pub ce_alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub teacher: String,
    pub spec: String,
}

fn default_name() -> String {
    "toy".into()
}
fn default_train_count() -> usize {
    256
}
fn default_eval_count() -> usize {
    64
}
fn default_rule() -> LabelRule {
    LabelRule::MeanEmbedding
}
fn default_demux() -> DemuxKind {
    DemuxKind::Affine
}
fn default_init() -> DemuxInit {
    DemuxInit::Identity
}
fn default_batch() -> usize {
    32
}
fn default_scheduler() -> Scheduler {
    Scheduler::Linear
}
fn default_layer_alpha() -> f64 {
    0.9
}
fn default_ce_alpha() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    2.0
}

impl TrainSettings {
    pub fn load(path: impl AsRef<Path>) -> Result<TrainSettings> {
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn task_config(&self, width: usize) -> TaskGenConfig {
        TaskGenConfig {
            seed: self.task.seed,
            vocab: self.task.vocab,
            length: self.task.length,
            classes: self.task.classes,
            width,
            dim: self.model.d_model,
            train_count: self.task.train_count,
            eval_count: self.task.eval_count,
            rule: self.task.rule,
            margin: self.task.margin,
        }
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch: self.train.batch,
            phase,
            seed: self.train.seed,
            scheduler: self.train.scheduler,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RngKey;
    use crate::muxer::{MuxKitConfig, TokenSequence};
    use crate::Matrix;

    fn toy_bundle(seed: u64) -> ModelBundle {
        let cfg = EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 12,
        };
        let model = EncoderModel::new(&cfg, 3, 6, RngKey(seed)).unwrap();
        let kit = MuxKit::new(&MuxKitConfig {
            n: 2,
            dim: 8,
            seed: RngKey(seed ^ 1),
            demux: DemuxKind::Affine,
            init: DemuxInit::NoisyIdentity { scale: 0.1 },
        })
        .unwrap();
        let spec = SparsitySpec::all_ones(2, 2, 8, 12);
        ModelBundle::new(
            Provenance {
                task: "toy".into(),
                seed,
                phases: vec!["warmup".into()],
                sparsity: 0.0,
                original: cfg,
            },
            kit,
            model,
            spec,
        )
    }

    #[test]
    fn bundle_round_trip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bundle.json");
        let bundle = toy_bundle(3);
        save_bundle(&path, &bundle).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded, bundle);

        let probe = TokenSequence::new(Matrix::gaussian(4, 8, &mut RngKey(9).stream(), 1.0));
        let a = bundle.model.encode(None, &probe).unwrap();
        let b = loaded.model.encode(None, &probe).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_bundle_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bundle.json");
        save_bundle(&path, &toy_bundle(4)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Json(_))));
    }

    #[test]
    fn bundle_version_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.bundle.json");
        let mut bundle = toy_bundle(5);
        bundle.format_version = 2;
        assert!(matches!(
            save_bundle(&path, &bundle),
            Err(Error::Version { .. })
        ));
        bundle.format_version = 1;
        save_bundle(&path, &bundle).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Version { .. })));
    }

    #[test]
    fn measurements_parse_and_round_trip() {
        let text = "task,n,sparsity,accuracy,throughput\nqqp,2,0.9,0.889,12.4\nqqp,1,0,0.912,1\nqqp,5,0.65,0.887,10.6\n";
        let records = parse_measurements(text, "test").unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].n, 2.0);
        assert_eq!(records[0].throughput, 12.4);
        // Byte-identical round trip through the writer.
        assert_eq!(measurements_to_string(&records), text);
    }

    #[test]
    fn measurements_reject_bad_header_and_ranges() {
        let bad_header = "task,n,s,accuracy,throughput\nqqp,2,0.9,0.889,12.4\n";
        match parse_measurements(bad_header, "test") {
            Err(Error::Parse { row: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let bad_range = "task,n,sparsity,accuracy,throughput\nqqp,2,1.5,0.889,12.4\n";
        match parse_measurements(bad_range, "test") {
            Err(Error::Parse { row: 2, msg, .. }) => assert!(msg.contains("sparsity")),
            other => panic!("{other:?}"),
        }
        let dup = "task,n,sparsity,accuracy,throughput\nqqp,2,0.9,0.889,12.4\nqqp,2,0.9,0.889,12.4\n";
        match parse_measurements(dup, "test") {
            Err(Error::Parse { row: 3, msg, .. }) => assert!(msg.contains("duplicate")),
            other => panic!("{other:?}"),
        }
        let short = "task,n,sparsity,accuracy,throughput\nqqp,2,0.9,0.889\n";
        assert!(matches!(
            parse_measurements(short, "test"),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn prune_input_distinguishes_specs_from_scores() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = dir.path().join("spec.json");
        let spec = SparsitySpec::all_ones(1, 2, 4, 4);
        save_spec(&spec_path, &spec).unwrap();
        match load_prune_input(&spec_path).unwrap() {
            PruneInput::Spec(s) => assert_eq!(s, spec),
            PruneInput::Scores(_) => panic!("expected spec"),
        }

        let scores = MaskScores {
            heads: vec![vec![1.0, 0.2]],
            mha: vec![1.0],
            ffn: vec![1.0],
            hidden: vec![1.0; 4],
            intermediate: vec![vec![0.9; 4]],
            threshold: 0.5,
        };
        let scores_path = dir.path().join("scores.json");
        fs::write(&scores_path, serde_json::to_string(&scores).unwrap()).unwrap();
        match load_prune_input(&scores_path).unwrap() {
            PruneInput::Scores(s) => assert_eq!(s.threshold, 0.5),
            PruneInput::Spec(_) => panic!("expected scores"),
        }
    }

    #[test]
    fn train_settings_parse_with_defaults() {
        let text = r#"
[task]
seed = 7
vocab = 32
length = 8
classes = 2

[model]
layers = 2
heads = 4
d_model = 32
d_ff = 128

[train]
lr = 0.25
epochs = 200
seed = 1
"#;
        let settings: TrainSettings = toml::from_str(text).unwrap();
        assert_eq!(settings.task.train_count, 256);
        assert_eq!(settings.train.batch, 32);
        assert_eq!(settings.train.scheduler, Scheduler::Linear);
        assert_eq!(settings.mux.demux, DemuxKind::Affine);
        assert!(settings.distill.is_none());
        let tc = settings.train_config(Phase::RetrievalWarmup);
        assert_eq!(tc.epochs, 200);
        let task = settings.task_config(2);
        assert_eq!(task.width, 2);
        assert_eq!(task.dim, 32);
    }

    #[test]
    fn train_settings_distill_section() {
        let text = r#"
[task]
seed = 7
vocab = 16
length = 4
classes = 2

[model]
layers = 2
heads = 2
d_model = 16
d_ff = 32

[mux]
demux = { mlp = { hidden = 24 } }
init = { noisy_identity = { scale = 0.05 } }

[train]
lr = 0.1
epochs = 50
seed = 2

[distill]
teacher = "teacher.bundle.json"
spec = "spec.json"
layer_alpha = 0.7
ce_alpha = 0.3
"#;
        let settings: TrainSettings = toml::from_str(text).unwrap();
        let d = settings.distill.unwrap();
        assert_eq!(d.layer_alpha, 0.7);
        assert_eq!(d.temperature, 2.0);
        assert_eq!(settings.mux.demux, DemuxKind::Mlp { hidden: 24 });
    }
}


