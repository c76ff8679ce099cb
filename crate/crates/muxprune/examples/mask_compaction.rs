//! Structured sparsity plumbing: threshold real-valued mask scores into a
//! canonical binary spec, count the pruned weight fraction, and verify that
//! the masked forward pass equals the physically compacted model.
//!
//! Run with: `cargo run -p muxprune --example mask_compaction`

use muxprune::encoder::EncoderConfig;
use muxprune::muxer::TokenSequence;
use muxprune::pruner::{compact, sparsity_of, threshold_masks, MaskScores};
use muxprune::{EncoderModel, Matrix, RngKey};

fn main() -> muxprune::Result<()> {
    let cfg = EncoderConfig {
        layers: 2,
        heads: 4,
        d_model: 16,
        d_ff: 32,
    };

    // Score every prunable unit; anything below 0.5 is pruned. The second
    // layer's MHA score falls below the threshold, so its per-head scores are
    // irrelevant (coarse masks dominate fine ones).
    let mut stream = RngKey(9).stream();
    let mut unit = |bias: f64| (stream.next_f64() + bias).clamp(0.0, 1.0);
    let scores = MaskScores {
        heads: (0..2).map(|_| (0..4).map(|_| unit(0.1)).collect()).collect(),
        mha: vec![unit(0.4), 0.2],
        ffn: vec![unit(0.4), unit(0.4)],
        hidden: (0..16).map(|_| unit(0.3)).collect(),
        intermediate: (0..2).map(|_| (0..32).map(|_| unit(0.0)).collect()).collect(),
        threshold: 0.5,
    };
    let spec = threshold_masks(&scores);
    println!("canonical: {}", spec.is_canonical());
    println!(
        "live heads per layer: {:?}",
        spec.heads
            .iter()
            .map(|h| h.iter().filter(|&&b| b).count())
            .collect::<Vec<_>>()
    );
    println!(
        "live hidden dims: {}/{}",
        spec.live_hidden_count(),
        cfg.d_model
    );
    println!("sparsity: {:.3}", sparsity_of(&spec, &cfg)?);

    // Masked forward == compacted forward on the live coordinates.
    let model = EncoderModel::new(&cfg, 3, 8, RngKey(10))?;
    let small = compact(&model, &spec)?;
    let input = TokenSequence::new(Matrix::gaussian(5, 16, &mut RngKey(11).stream(), 1.0));
    let masked = model.encode(Some(&spec), &input)?;
    let live = spec.live_hidden_indices();
    let restricted = TokenSequence::new(input.as_matrix().select_cols(&live));
    let direct = small.encode(None, &restricted)?;
    let deviation = masked
        .final_state()
        .select_cols(&live)
        .max_abs_diff(direct.final_state());
    println!("masked-vs-compacted deviation: {deviation:.3e}");
    println!(
        "compacted model: d_model {} -> {}, layers {} -> {}",
        cfg.d_model,
        small.d_model,
        cfg.layers,
        small.layer_count()
    );
    Ok(())
}
