//! Phase 3: compact a trained multiplexed model under a structural sparsity
//! spec, align the demultiplexer to the pruned hidden dimension, and recover
//! accuracy with layer-wise distillation from the dense teacher.
//!
//! Run with: `cargo run -p muxprune --example prune_and_distill`

use muxprune::distiller::LossWeights;
use muxprune::encoder::EncoderConfig;
use muxprune::muxer::{DemuxInit, DemuxKind, MuxKitConfig};
use muxprune::pruner::{sparsity_of, SparsitySpec};
use muxprune::train::{
    classification_accuracy, gen_task, train_phase1, train_prune_distill, train_task, LabelRule,
    Phase, Scheduler, TaskGenConfig, TrainConfig,
};
use muxprune::{EncoderModel, MuxKit, RngKey};

fn main() -> muxprune::Result<()> {
    let cfg = EncoderConfig {
        layers: 2,
        heads: 4,
        d_model: 32,
        d_ff: 128,
    };
    let task = gen_task(&TaskGenConfig {
        seed: 7,
        vocab: 32,
        length: 8,
        classes: 2,
        width: 2,
        dim: 32,
        train_count: 512,
        eval_count: 128,
        rule: LabelRule::MeanEmbedding,
        margin: 0.5,
    })?;
    let model = EncoderModel::new(&cfg, task.classes, task.vocab, RngKey(61))?;
    let kit = MuxKit::new(&MuxKitConfig {
        n: 2,
        dim: 32,
        seed: RngKey(62),
        demux: DemuxKind::Affine,
        init: DemuxInit::Identity,
    })?;

    // Teacher: warm-up then task fine-tuning.
    let warm = train_phase1(
        &kit,
        &model,
        &task,
        &TrainConfig {
            lr: 0.03,
            epochs: 40,
            batch: 32,
            phase: Phase::RetrievalWarmup,
            seed: 1,
            scheduler: Scheduler::Linear,
        },
    )?;
    let teacher = train_task(
        &warm.kit,
        &warm.model,
        &task,
        &TrainConfig {
            lr: 0.05,
            epochs: 30,
            batch: 32,
            phase: Phase::Task,
            seed: 2,
            scheduler: Scheduler::Linear,
        },
    )?;
    let teacher_acc = classification_accuracy(&teacher.kit, &teacher.model, &task, None)?;

    // Mask half the FFN width, one head per layer, and a quarter of the
    // hidden dimensions.
    let mut spec = SparsitySpec::all_ones(cfg.layers, cfg.heads, cfg.d_model, cfg.d_ff);
    for l in 0..cfg.layers {
        spec.heads[l][0] = false;
        for i in 0..cfg.d_ff / 2 {
            spec.intermediate[l][2 * i] = false;
        }
    }
    for c in 0..cfg.d_model / 4 {
        spec.hidden[4 * c] = false;
    }
    let spec = spec.canonicalized();
    println!(
        "spec prunes {:.1}% of the prunable weights",
        100.0 * sparsity_of(&spec, &cfg)?
    );

    let out = train_prune_distill(
        &teacher.kit,
        &teacher.model,
        &spec,
        &task,
        &TrainConfig {
            lr: 0.05,
            epochs: 30,
            batch: 32,
            phase: Phase::PruneDistill,
            seed: 3,
            scheduler: Scheduler::Linear,
        },
        &LossWeights::default(),
    )?;
    println!("teacher eval accuracy:        {teacher_acc:.4}");
    println!("compacted, untuned accuracy:  {:.4}", out.masked_accuracy);
    println!("after distillation:           {:.4}", out.tuned_accuracy);
    println!(
        "student dims: d_model {}, layers {}",
        out.model.d_model,
        out.model.layer_count()
    );
    Ok(())
}
