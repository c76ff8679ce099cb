//! Sweep (N, s) configurations in FLOP-proxy mode and print the measurement
//! table that the planner consumes, plus one wall-clock sanity point.
//!
//! Run with: `cargo run -p muxprune --example throughput_sweep`

use muxprune::bench::{csv_row, measure, multiplier, BenchRun, CSV_HEADER};
use muxprune::encoder::EncoderConfig;
use muxprune::muxer::{DemuxInit, DemuxKind, MuxKitConfig};
use muxprune::pruner::{align_demux, compact, sparsity_of, SparsitySpec};
use muxprune::{EncoderModel, MuxKit, RngKey};

fn main() -> muxprune::Result<()> {
    let cfg = EncoderConfig {
        layers: 12,
        heads: 8,
        d_model: 32,
        d_ff: 128,
    };
    let model = EncoderModel::new(&cfg, 2, 8, RngKey(3))?;
    let baseline = measure(&model, None, &BenchRun::proxy(1, 0.0, 128)?)?;

    println!("{CSV_HEADER}");
    for &n in &[1usize, 2, 5, 10] {
        let kit = MuxKit::new(&MuxKitConfig {
            n,
            dim: cfg.d_model,
            seed: RngKey(4),
            demux: DemuxKind::Affine,
            init: DemuxInit::Identity,
        })?;
        for &s in &[0.0, 0.6, 0.9, 0.95] {
            let spec = SparsitySpec::uniform(&cfg, s);
            let achieved = sparsity_of(&spec, &cfg)?;
            let small = compact(&model, &spec)?;
            let aligned = align_demux(&kit, &spec.hidden)?;
            let out = measure(&small, Some(&aligned), &BenchRun::proxy(n, achieved, 128)?)?;
            let m = multiplier(out.throughput, baseline.throughput)?;
            println!("{}", csv_row("sweep", &out, m));
        }
    }

    // One wall-clock measurement for scale; numbers depend on this machine.
    let spec = SparsitySpec::uniform(&cfg, 0.9);
    let small = compact(&model, &spec)?;
    let dense_wall = measure(&model, None, &BenchRun::wall(1, 0.0, 32, 5, 0)?)?;
    let small_wall = measure(&small, None, &BenchRun::wall(1, 0.9, 32, 5, 0)?)?;
    eprintln!(
        "wall: dense {:.0} inputs/s, 90%-sparse {:.0} inputs/s ({:.1}x), dispersion {:.3}",
        dense_wall.throughput,
        small_wall.throughput,
        multiplier(small_wall.throughput, dense_wall.throughput)?,
        small_wall.dispersion.unwrap_or(1.0),
    );
    Ok(())
}
