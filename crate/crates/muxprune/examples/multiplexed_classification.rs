//! Phase 2: fine-tune a warmed-up multiplexed model so every stream is
//! classified jointly (mean of the per-stream cross-entropies).
//!
//! Run with: `cargo run -p muxprune --example multiplexed_classification`

use muxprune::encoder::EncoderConfig;
use muxprune::muxer::{DemuxInit, DemuxKind, MuxKitConfig};
use muxprune::train::{
    classification_accuracy, gen_task, train_phase1, train_task, LabelRule, Phase, Scheduler,
    TaskGenConfig, TrainConfig,
};
use muxprune::{EncoderModel, MuxKit, RngKey};

fn main() -> muxprune::Result<()> {
    let width = 2;
    let task = gen_task(&TaskGenConfig {
        seed: 7,
        vocab: 32,
        length: 8,
        classes: 2,
        width,
        dim: 32,
        train_count: 512,
        eval_count: 128,
        rule: LabelRule::MeanEmbedding,
        margin: 0.5,
    })?;
    let model = EncoderModel::new(
        &EncoderConfig {
            layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 128,
        },
        task.classes,
        task.vocab,
        RngKey(51),
    )?;
    let kit = MuxKit::new(&MuxKitConfig {
        n: width,
        dim: 32,
        seed: RngKey(52),
        demux: DemuxKind::Affine,
        init: DemuxInit::Identity,
    })?;

    // Retrieval warm-up first: it disentangles the streams before any labels
    // are involved.
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
    println!(
        "warm-up eval classification accuracy (untrained head): {:.4}",
        classification_accuracy(&warm.kit, &warm.model, &task, None)?
    );

    let tuned = train_task(
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
    for row in tuned.history.iter().step_by(5) {
        println!(
            "epoch {:>3}  loss {:>8.4}  eval accuracy {:.4}",
            row.epoch, row.loss, row.accuracy
        );
    }
    println!(
        "final eval accuracy over {width} multiplexed streams: {:.4}",
        classification_accuracy(&tuned.kit, &tuned.model, &task, None)?
    );
    Ok(())
}
