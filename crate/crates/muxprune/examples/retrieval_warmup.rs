//! Phase 1: prime a multiplexed encoder with the token-retrieval objective.
//!
//! Two token sequences are mixed into one input; the model learns to recover
//! the tokens of a randomly chosen stream from the shared hidden sequence.
//!
//! Run with: `cargo run -p muxprune --example retrieval_warmup`

use muxprune::encoder::EncoderConfig;
use muxprune::muxer::{DemuxInit, DemuxKind, MuxKitConfig};
use muxprune::train::{
    gen_task, retrieval_accuracy, train_phase1, LabelRule, Phase, Scheduler, TaskGenConfig,
    TrainConfig,
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
        train_count: 256,
        eval_count: 64,
        rule: LabelRule::MeanEmbedding,
        margin: 0.0,
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
        RngKey(41),
    )?;
    let kit = MuxKit::new(&MuxKitConfig {
        n: width,
        dim: 32,
        seed: RngKey(42),
        demux: DemuxKind::Affine,
        init: DemuxInit::Identity,
    })?;

    println!("before training: per-token retrieval accuracy {:.4}", {
        retrieval_accuracy(&kit, &model, &task)?
    });
    let cfg = TrainConfig {
        lr: 0.03,
        epochs: 60,
        batch: 32,
        phase: Phase::RetrievalWarmup,
        seed: 1,
        scheduler: Scheduler::Linear,
    };
    let out = train_phase1(&kit, &model, &task, &cfg)?;
    for row in out.history.iter().step_by(10) {
        println!(
            "epoch {:>3}  loss {:>8.4}  retrieval accuracy {:.4}",
            row.epoch, row.loss, row.accuracy
        );
    }
    println!(
        "after {} epochs: per-token retrieval accuracy {:.4} (width {width})",
        cfg.epochs,
        retrieval_accuracy(&out.kit, &out.model, &task)?
    );
    Ok(())
}
