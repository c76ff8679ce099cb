//! Throughput measurement in two modes: wall-clock (the real protocol, noisy
//! and hardware-dependent) and a deterministic FLOP proxy suitable for tests.
//!
//! The FLOP model counts matrix-multiply work only, in multiply-add pairs
//! times two. Per live layer and token:
//!
//! * attention: `8 * d * (live_heads * head_dim)` for the Q/K/V/O projections
//!   plus `4 * T * (live_heads * head_dim)` for scores and weighted sums,
//! * feed-forward: `4 * d * live_d_ff`,
//!
//! and per token for the multiplexing stages, when present:
//!
//! * multiplexer: `2 * N * d`,
//! * demultiplexer: `N` maps at `2 * d_in * d_out`
//!   (`+ 2 * d_in * hidden + 2 * hidden * d_out` for the MLP variant).
//!
//! Layer norms, softmaxes, activations and bias adds are not counted. Raw
//! inputs are the unit of throughput: one multiplexed pass carries `N` of
//! them, and the evaluation batch always holds `128 * N` raw inputs.

use std::time::Instant;

use rayon::prelude::*;

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::math::{Matrix, RngKey};
use crate::muxer::{DemuxMap, MuxKit, TokenSequence};
use crate::pruner::SparsitySpec;
use crate::{Error, Result};

/// Raw inputs per multiplexed sequence times this constant = batch size.
pub const BATCH_PER_WIDTH: usize = 128;

/// Default sequence length for throughput runs.
pub const DEFAULT_SEQ_LEN: usize = 128;

/// Shortest acceptable timed repetition; anything faster cannot be resolved
/// reliably against scheduler noise.
pub const MIN_ELAPSED_SECS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Wall,
    FlopProxy,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Wall => "wall",
            BenchMode::FlopProxy => "flops",
        }
    }
}

/// One throughput run configuration. The batch size is always `128 * n` raw
/// inputs (`128` multiplexed passes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRun {
    pub mode: BenchMode,
    pub n: usize,
    /// Sparsity label carried into the output record.
    pub sparsity: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchRun {
    pub fn proxy(n: usize, sparsity: f64, seq_len: usize) -> Result<BenchRun> {
        if n == 0 {
            return Err(Error::Empty("bench width must be >= 1"));
        }
        Ok(BenchRun {
            mode: BenchMode::FlopProxy,
            n,
            sparsity,
            batch: BATCH_PER_WIDTH * n,
            seq_len,
            reps: 1,
            warmup: 0,
            seed: 0,
        })
    }

    pub fn wall(n: usize, sparsity: f64, seq_len: usize, reps: usize, seed: u64) -> Result<BenchRun> {
        if n == 0 {
            return Err(Error::Empty("bench width must be >= 1"));
        }
        if reps < 3 {
            return Err(Error::Config(format!(
                "wall mode needs at least 3 repetitions, got {reps}"
            )));
        }
        Ok(BenchRun {
            mode: BenchMode::Wall,
            n,
            sparsity,
            batch: BATCH_PER_WIDTH * n,
            seq_len,
            reps,
            warmup: 1,
            seed,
        })
    }
}

/// Result record. Wall-mode runs carry their repetition count and dispersion
/// (max/median ratio over repetitions).
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub mode: BenchMode,
    pub n: usize,
    pub sparsity: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub reps: usize,
    /// Inputs per second (wall) or inputs per gigaflop (proxy).
    pub throughput: f64,
    pub dispersion: Option<f64>,
}

/// FLOP count of one forward pass of `seq_len` tokens through the encoder
/// described by `cfg` under `spec`, plus the mux/demux stages when a kit is
/// given.
pub fn flop_count(
    cfg: &EncoderConfig,
    spec: Option<&SparsitySpec>,
    kit: Option<&MuxKit>,
    seq_len: usize,
) -> Result<u64> {
    if cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
        return Err(Error::Shape(format!(
            "config d_model {} not divisible by heads {}",
            cfg.d_model, cfg.heads
        )));
    }
    let head_dim = cfg.d_model / cfg.heads;
    let d_live = match spec {
        Some(s) => {
            if s.layer_count() != cfg.layers || s.hidden.len() != cfg.d_model {
                return Err(Error::Shape("spec does not match config".into()));
            }
            s.live_hidden_count()
        }
        None => cfg.d_model,
    };
    if d_live == 0 {
        return Err(Error::Degenerate("no live hidden dimensions".into()));
    }
    let mut per_token = 0u64;
    for l in 0..cfg.layers {
        let (attn_live, live_heads) = match spec {
            Some(s) => (s.mha[l], s.heads[l].iter().filter(|&&b| b).count()),
            None => (true, cfg.heads),
        };
        if attn_live {
            let hd = (live_heads * head_dim) as u64;
            per_token += 8 * d_live as u64 * hd + 4 * seq_len as u64 * hd;
        }
        let (ffn_live, live_ff) = match spec {
            Some(s) => (s.ffn[l], s.intermediate[l].iter().filter(|&&b| b).count()),
            None => (true, cfg.d_ff),
        };
        if ffn_live {
            per_token += 4 * d_live as u64 * live_ff as u64;
        }
    }
    if let Some(kit) = kit {
        per_token += mux_demux_flops_per_token(kit);
    }
    Ok(per_token * seq_len as u64)
}

/// FLOP count derived from an actual model's shapes (compacted models carry
/// their live dimensions directly), plus the kit stages when given.
pub fn flop_count_model(model: &EncoderModel, kit: Option<&MuxKit>, seq_len: usize) -> u64 {
    let d = model.d_model as u64;
    let mut per_token = 0u64;
    for layer in &model.layers {
        if let Some(a) = &layer.attn {
            let hd = (a.heads * a.head_dim) as u64;
            per_token += 8 * d * hd + 4 * seq_len as u64 * hd;
        }
        if let Some(f) = &layer.ffn {
            per_token += 4 * d * f.w_up.rows() as u64;
        }
    }
    if let Some(kit) = kit {
        per_token += mux_demux_flops_per_token(kit);
    }
    per_token * seq_len as u64
}

fn mux_demux_flops_per_token(kit: &MuxKit) -> u64 {
    let n = kit.n() as u64;
    let mux = 2 * n * kit.key_dim() as u64;
    let demux: u64 = (0..kit.n())
        .map(|i| match kit.demux_map(i) {
            DemuxMap::Affine { weight, .. } => 2 * (weight.rows() * weight.cols()) as u64,
            DemuxMap::Mlp { w1, w2, .. } => {
                2 * (w1.rows() * w1.cols()) as u64 + 2 * (w2.rows() * w2.cols()) as u64
            }
        })
        .sum();
    mux + demux
}

/// Measure the throughput of a model (optionally behind a mux kit).
///
/// Proxy mode is deterministic: `n * 1e9 / flop_count`. Wall mode runs
/// `warmup + reps` passes over a seeded random batch, takes the median
/// inputs-per-second over the timed repetitions, and processes the batch's
/// multiplexed groups on a worker pool (the model is read-only).
pub fn measure(model: &EncoderModel, kit: Option<&MuxKit>, run: &BenchRun) -> Result<BenchOutcome> {
    if let Some(k) = kit {
        if k.n() != run.n {
            return Err(Error::Shape(format!(
                "kit width {} vs run width {}",
                k.n(),
                run.n
            )));
        }
        if k.key_dim() != model.d_model {
            return Err(Error::Shape(format!(
                "kit key dimension {} vs model d_model {}",
                k.key_dim(),
                model.d_model
            )));
        }
    } else if run.n != 1 {
        return Err(Error::Shape(format!(
            "width {} requires a mux kit",
            run.n
        )));
    }
    match run.mode {
        BenchMode::FlopProxy => {
            let flops = flop_count_model(model, kit, run.seq_len);
            Ok(BenchOutcome {
                mode: run.mode,
                n: run.n,
                sparsity: run.sparsity,
                batch: run.batch,
                seq_len: run.seq_len,
                reps: run.reps,
                throughput: run.n as f64 * 1e9 / flops as f64,
                dispersion: None,
            })
        }
        BenchMode::Wall => measure_wall(model, kit, run),
    }
}

fn measure_wall(model: &EncoderModel, kit: Option<&MuxKit>, run: &BenchRun) -> Result<BenchOutcome> {
    let groups = run.batch / run.n;
    let mut stream = RngKey(run.seed).derive(0x62656e).stream();
    let batch_inputs: Vec<Vec<TokenSequence>> = (0..groups)
        .map(|_| {
            (0..run.n)
                .map(|_| {
                    TokenSequence::new(Matrix::gaussian(
                        run.seq_len,
                        model.d_model,
                        &mut stream,
                        1.0,
                    ))
                })
                .collect()
        })
        .collect();

    let run_batch = || -> Result<()> {
        batch_inputs
            .par_iter()
            .try_for_each(|group| -> Result<()> {
                let mixed = match kit {
                    Some(k) => k.multiplex(group)?,
                    None => group[0].clone(),
                };
                let trace = model.encode(None, &mixed)?;
                let final_state = TokenSequence::new(trace.final_state().clone());
                match kit {
                    Some(k) => {
                        for i in 0..k.n() {
                            let h = k.demultiplex(&final_state, i)?;
                            std::hint::black_box(
                                model.classify_pooled(&crate::encoder::mean_pool(h.as_matrix())),
                            );
                        }
                    }
                    None => {
                        std::hint::black_box(model.classify(&trace));
                    }
                }
                Ok(())
            })
    };

    for _ in 0..run.warmup {
        run_batch()?;
    }
    let mut rates = Vec::with_capacity(run.reps);
    for _ in 0..run.reps {
        let start = Instant::now();
        run_batch()?;
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed < MIN_ELAPSED_SECS {
            return Err(Error::InsufficientWork {
                elapsed_ms: elapsed * 1e3,
                floor_ms: MIN_ELAPSED_SECS * 1e3,
            });
        }
        rates.push(run.batch as f64 / elapsed);
    }
    rates.sort_by(f64::total_cmp);
    let median = rates[rates.len() / 2];
    let max = *rates.last().unwrap();
    Ok(BenchOutcome {
        mode: run.mode,
        n: run.n,
        sparsity: run.sparsity,
        batch: run.batch,
        seq_len: run.seq_len,
        reps: run.reps,
        throughput: median,
        dispersion: Some(max / median),
    })
}

/// Throughput multiplier of a candidate over a baseline.
pub fn multiplier(candidate: f64, baseline: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::InvalidBaseline(baseline));
    }
    Ok(candidate / baseline)
}

pub const CSV_HEADER: &str = "task,n,sparsity,mode,batch,seqlen,throughput,multiplier";

/// One output row matching [`CSV_HEADER`].
pub fn csv_row(task: &str, outcome: &BenchOutcome, multiplier: f64) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        task,
        outcome.n,
        outcome.sparsity,
        outcome.mode.as_str(),
        outcome.batch,
        outcome.seq_len,
        outcome.throughput,
        multiplier
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::muxer::{DemuxInit, DemuxKind, MuxKitConfig};

    fn cfg(layers: usize, heads: usize, d: usize, d_ff: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            heads,
            d_model: d,
            d_ff,
        }
    }

    #[test]
    fn flop_count_hand_example() {
        // L=1, T=2, d=2, d_ff=4, one head: per token 8*4 + 4*2*2 + 4*2*4 = 80,
        // total 160.
        let flops = flop_count(&cfg(1, 1, 2, 4), None, None, 2).unwrap();
        assert_eq!(flops, 160);
    }

    #[test]
    fn flop_count_all_sublayers_masked_leaves_mux_cost_only() {
        let c = cfg(2, 2, 4, 8);
        let mut spec = SparsitySpec::all_ones(2, 2, 4, 8);
        for l in 0..2 {
            spec.mha[l] = false;
            spec.ffn[l] = false;
        }
        let spec = spec.canonicalized();
        let kit = MuxKit::new(&MuxKitConfig {
            n: 3,
            dim: 4,
            seed: RngKey(1),
            demux: DemuxKind::Affine,
            init: DemuxInit::Identity,
        })
        .unwrap();
        let t = 5;
        let flops = flop_count(&c, Some(&spec), Some(&kit), t).unwrap();
        // mux 2*3*4 = 24, demux 3 * 2*16 = 96; per token 120.
        assert_eq!(flops, 120 * t as u64);
    }

    #[test]
    fn flop_count_ffn_term_is_linear_in_width() {
        let c = cfg(1, 1, 4, 8);
        let full = flop_count(&c, None, None, 3).unwrap();
        let mut spec = SparsitySpec::all_ones(1, 1, 4, 8);
        for i in 0..4 {
            spec.intermediate[0][i] = false;
        }
        let half = flop_count(&c, Some(&spec), None, 3).unwrap();
        // Halving d_ff halves the FFN term exactly: difference is 2*T*d*d_ff.
        assert_eq!(full - half, 2 * 3 * 4 * 8);
    }

    #[test]
    fn flop_count_matches_model_shapes_after_compaction() {
        let c = cfg(2, 2, 8, 16);
        let model = EncoderModel::new(&c, 3, 5, RngKey(2)).unwrap();
        let mut spec = SparsitySpec::all_ones(2, 2, 8, 16);
        spec.heads[0][1] = false;
        for i in 0..6 {
            spec.intermediate[1][i] = false;
        }
        spec.hidden[3] = false;
        let spec = spec.canonicalized();
        let via_cfg = flop_count(&c, Some(&spec), None, 7).unwrap();
        let compacted = crate::pruner::compact(&model, &spec).unwrap();
        let via_model = flop_count_model(&compacted, None, 7);
        assert_eq!(via_cfg, via_model);
    }

    #[test]
    fn proxy_mode_is_deterministic() {
        let c = cfg(2, 2, 8, 16);
        let model = EncoderModel::new(&c, 3, 5, RngKey(3)).unwrap();
        let run = BenchRun::proxy(1, 0.0, 16).unwrap();
        let a = measure(&model, None, &run).unwrap();
        let b = measure(&model, None, &run).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn proxy_multiplier_near_width_for_unpruned_mux() {
        // Depth-12 toy model: the mux/demux share of the FLOPs stays below 5%,
        // so the width-10 multiplier lands in [9.5, 10.0].
        let c = cfg(12, 4, 32, 128);
        let model = EncoderModel::new(&c, 2, 4, RngKey(4)).unwrap();
        let kit = MuxKit::new(&MuxKitConfig {
            n: 10,
            dim: 32,
            seed: RngKey(5),
            demux: DemuxKind::Affine,
            init: DemuxInit::Identity,
        })
        .unwrap();
        let baseline = measure(&model, None, &BenchRun::proxy(1, 0.0, 128).unwrap()).unwrap();
        let muxed = measure(&model, Some(&kit), &BenchRun::proxy(10, 0.0, 128).unwrap()).unwrap();
        let m = multiplier(muxed.throughput, baseline.throughput).unwrap();
        assert!((9.5..=10.0).contains(&m), "multiplier {m}");

        // Invariant: N(1 - overhead) <= multiplier <= N where overhead is the
        // mux/demux share of the total pipeline FLOPs.
        let enc = flop_count(&c, None, None, 128).unwrap() as f64;
        let total = flop_count(&c, None, Some(&kit), 128).unwrap() as f64;
        let overhead = (total - enc) / total;
        assert!(m <= 10.0 + 1e-9);
        assert!(m >= 10.0 * (1.0 - overhead) - 1e-9);
    }

    #[test]
    fn proxy_multiplier_monotone_in_sparsity() {
        let c = cfg(4, 4, 32, 64);
        let model = EncoderModel::new(&c, 2, 4, RngKey(6)).unwrap();
        let baseline = measure(&model, None, &BenchRun::proxy(1, 0.0, 64).unwrap()).unwrap();
        let mut last = 0.0;
        for &s in &[0.0, 0.6, 0.9, 0.95] {
            let spec = SparsitySpec::uniform(&c, s);
            let compacted = crate::pruner::compact(&model, &spec).unwrap();
            let out = measure(&compacted, None, &BenchRun::proxy(1, s, 64).unwrap()).unwrap();
            let m = multiplier(out.throughput, baseline.throughput).unwrap();
            assert!(m >= last, "multiplier not monotone at s={s}: {m} < {last}");
            last = m;
        }
        assert!(last > 1.0);
    }

    #[test]
    fn multiplier_contract() {
        assert_eq!(multiplier(12.4, 12.4).unwrap(), 1.0);
        assert_eq!(multiplier(24.8, 12.4).unwrap(), 2.0);
        // Ratios compose.
        let (a, b, c) = (7.5, 2.5, 1.25);
        let left = multiplier(a, b).unwrap() * multiplier(b, c).unwrap();
        assert!((left - multiplier(a, c).unwrap()).abs() < 1e-12);
        assert!(matches!(
            multiplier(1.0, 0.0),
            Err(Error::InvalidBaseline(_))
        ));
    }

    #[test]
    fn wall_run_validates_reps() {
        assert!(BenchRun::wall(1, 0.0, 16, 2, 0).is_err());
        assert!(BenchRun::wall(1, 0.0, 16, 3, 0).is_ok());
        assert_eq!(BenchRun::wall(2, 0.0, 16, 3, 0).unwrap().batch, 256);
    }

    #[test]
    fn csv_row_shape() {
        let out = BenchOutcome {
            mode: BenchMode::FlopProxy,
            n: 2,
            sparsity: 0.9,
            batch: 256,
            seq_len: 128,
            reps: 1,
            throughput: 123.5,
            dispersion: None,
        };
        assert_eq!(
            csv_row("toy", &out, 2.5),
            "toy,2,0.9,flops,256,128,123.5,2.5"
        );
        assert_eq!(CSV_HEADER.split(',').count(), 8);
    }
}
