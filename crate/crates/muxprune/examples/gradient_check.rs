//! Verify the hand-derived gradients against central finite differences:
//! every training phase, the input path through the multiplexer, and the
//! distillation transform.
//!
//! Run with: `cargo run -p muxprune --example gradient_check`

use muxprune::train::{
    check_input_gradients, check_phase_gradients, check_transform_gradient, grad_check, Phase,
};

fn main() -> muxprune::Result<()> {
    // Warm-up on the generic checker: central differences are exact for
    // quadratics.
    let err = grad_check(
        |p| p.iter().map(|v| v * v).sum::<f64>(),
        &[2.0, 4.0],
        &[1.0, 2.0],
        1e-5,
    )?;
    println!("quadratic probe: max relative error {err:.2e}");

    for (phase, name) in [
        (Phase::RetrievalWarmup, "retrieval warm-up"),
        (Phase::Task, "classification"),
        (Phase::PruneDistill, "prune + distill"),
    ] {
        let mut worst: f64 = 0.0;
        for seed in 0..4 {
            worst = worst.max(check_phase_gradients(phase, seed, 1e-5)?);
        }
        println!("{name:<18} max relative error {worst:.2e}");
    }

    let mux = check_input_gradients(1, 1e-5)?;
    println!("mux input path     max relative error {mux:.2e}");
    let transform = check_transform_gradient(1, 1e-5)?;
    println!("distill transform  max relative error {transform:.2e}");
    Ok(())
}
