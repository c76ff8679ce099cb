//! Command-line front end: training phases, the prune pipeline, throughput
//! benchmarks, and the planner (fit / predict / eval). All results go to
//! stdout, diagnostics to stderr; the exit code is nonzero on any failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use muxprune::bench::{self, BenchRun};
use muxprune::io::{
    dense_spec_for, load_bundle, load_measurements, load_planner_model, load_prune_input,
    save_bundle, save_planner_model, ModelBundle, Provenance, PruneInput, TrainSettings,
};
use muxprune::muxer::MuxKitConfig;
use muxprune::planner::{
    self, budget_grid, MeasurementRecord, PlannerModel, PlannerQuery, Surrogates,
};
use muxprune::pruner::{align_demux, compact, sparsity_of, threshold_masks};
use muxprune::train::{
    gen_task, history_csv, train_phase1, train_prune_distill, train_task, Phase,
};
use muxprune::{EncoderModel, Error, MuxKit, Result, RngKey};

#[derive(Parser)]
#[command(
    name = "muxprune",
    version,
    about = "Multiplexed transformer inference with structured pruning: train, prune, bench, plan"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training phase on a synthetic task and save the result bundle.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Multiplexing width N.
        #[arg(long)]
        n: usize,
        /// TOML settings file (task, model, mux, train, distill sections).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV training history (epoch,loss,accuracy).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Threshold / compact / align: apply a sparsity spec (or mask scores) to
    /// a bundle and save the physically smaller bundle.
    Prune {
        #[arg(long)]
        bundle: PathBuf,
        /// JSON sparsity spec, or mask scores with a "threshold" field.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure throughput and print one CSV row (candidate vs dense baseline).
    Bench {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = bench::DEFAULT_SEQ_LEN)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit, query, or evaluate the (N, s) planning models.
    Plan {
        #[command(subcommand)]
        cmd: PlanCmd,
    },
}

#[derive(Subcommand)]
enum PlanCmd {
    /// Fit the accuracy interpolant and the reference-task throughput table.
    Fit {
        #[arg(long)]
        measurements: PathBuf,
        /// Task whose throughput numbers estimate every task.
        #[arg(long)]
        reference_task: String,
        /// Task to fit the accuracy model on (defaults to the only task).
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank (N, s) candidates under an accuracy-loss budget. Without --model,
    /// predictions fall back to the measured rows themselves.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        measurements: PathBuf,
        /// Accuracy-loss budget as a fraction (0.03 = 3%).
        #[arg(long)]
        budget: f64,
        #[arg(long, default_value_t = 3)]
        top: usize,
        #[arg(long)]
        task: Option<String>,
    },
    /// Surrogate quality per task: leave-one-out accuracy fraction (M_A),
    /// throughput band fraction (M_T), and budget-sweep hit rate.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Warmup,
    Task,
    Prune,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Wall,
    Flops,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            phase,
            n,
            config,
            out,
            history,
        } => cmd_train(phase, n, &config, &out, history.as_deref()),
        Cmd::Prune { bundle, spec, out } => cmd_prune(&bundle, &spec, &out),
        Cmd::Bench {
            bundle,
            mode,
            reps,
            seq_len,
            seed,
        } => cmd_bench(&bundle, mode, reps, seq_len, seed),
        Cmd::Plan { cmd } => match cmd {
            PlanCmd::Fit {
                measurements,
                reference_task,
                task,
                out,
            } => cmd_plan_fit(&measurements, &reference_task, task.as_deref(), &out),
            PlanCmd::Predict {
                model,
                measurements,
                budget,
                top,
                task,
            } => cmd_plan_predict(model.as_deref(), &measurements, budget, top, task.as_deref()),
            PlanCmd::Eval {
                model,
                measurements,
            } => cmd_plan_eval(&model, &measurements),
        },
    }
}

fn cmd_train(
    phase: PhaseArg,
    n: usize,
    config: &std::path::Path,
    out: &std::path::Path,
    history_path: Option<&std::path::Path>,
) -> Result<()> {
    let settings = TrainSettings::load(config)?;
    let task = gen_task(&settings.task_config(n))?;
    let (bundle, history) = match phase {
        PhaseArg::Warmup => {
            let (kit, model) = fresh_pipeline(&settings, n)?;
            let cfg = settings.train_config(Phase::RetrievalWarmup);
            let outc = train_phase1(&kit, &model, &task, &cfg)?;
            let bundle = ModelBundle::new(
                provenance(&settings, vec!["warmup".into()]),
                outc.kit,
                outc.model,
                dense_spec_from_settings(&settings),
            );
            (bundle, outc.history)
        }
        PhaseArg::Task => {
            let (kit, model, mut phases) = match &settings.train.init_bundle {
                Some(path) => {
                    let b = load_bundle(path)?;
                    (b.kit, b.model, b.provenance.phases)
                }
                None => {
                    let (kit, model) = fresh_pipeline(&settings, n)?;
                    (kit, model, Vec::new())
                }
            };
            let cfg = settings.train_config(Phase::Task);
            let outc = train_task(&kit, &model, &task, &cfg)?;
            phases.push("task".into());
            let bundle = ModelBundle::new(
                provenance(&settings, phases),
                outc.kit,
                outc.model,
                dense_spec_from_settings(&settings),
            );
            (bundle, outc.history)
        }
        PhaseArg::Prune => {
            let distill = settings.distill.as_ref().ok_or_else(|| {
                Error::Config("prune phase needs a [distill] section in the config".into())
            })?;
            let teacher = load_bundle(&distill.teacher)?;
            let spec = load_spec_canonical(std::path::Path::new(&distill.spec))?;
            let weights = muxprune::distiller::LossWeights::new(
                distill.layer_alpha,
                distill.ce_alpha,
                distill.temperature,
            )?;
            let cfg = settings.train_config(Phase::PruneDistill);
            let outc =
                train_prune_distill(&teacher.kit, &teacher.model, &spec, &task, &cfg, &weights)?;
            eprintln!(
                "masked accuracy {:.4} -> tuned accuracy {:.4}",
                outc.masked_accuracy, outc.tuned_accuracy
            );
            let teacher_cfg = teacher.model.dense_config().ok_or_else(|| {
                Error::Degenerate("prune phase needs a dense-shaped teacher".into())
            })?;
            let mut prov = teacher.provenance.clone();
            prov.phases.push("prune".into());
            prov.sparsity = sparsity_of(&spec, &teacher_cfg)?;
            let spec_now = dense_spec_for(&outc.model);
            let bundle = ModelBundle::new(prov, outc.kit, outc.model, spec_now);
            (bundle, outc.history)
        }
    };
    save_bundle(out, &bundle)?;
    if let Some(p) = history_path {
        std::fs::write(p, history_csv(&history))?;
    }
    let last = history.last().expect("at least one epoch");
    println!(
        "{},{},{},{},{}",
        bundle.provenance.task,
        n,
        history.len(),
        last.loss,
        last.accuracy
    );
    Ok(())
}

fn fresh_pipeline(settings: &TrainSettings, n: usize) -> Result<(MuxKit, EncoderModel)> {
    let seed = RngKey(settings.train.seed);
    let model = EncoderModel::new(
        &settings.model,
        settings.task.classes,
        settings.task.vocab,
        seed.derive(0x6d6f64),
    )?;
    let kit = MuxKit::new(&MuxKitConfig {
        n,
        dim: settings.model.d_model,
        seed: seed.derive(0x6b6974),
        demux: settings.mux.demux,
        init: settings.mux.init,
    })?;
    Ok((kit, model))
}

fn provenance(settings: &TrainSettings, phases: Vec<String>) -> Provenance {
    Provenance {
        task: settings.task.name.clone(),
        seed: settings.train.seed,
        phases,
        sparsity: 0.0,
        original: settings.model,
    }
}

fn dense_spec_from_settings(settings: &TrainSettings) -> muxprune::SparsitySpec {
    muxprune::SparsitySpec::all_ones(
        settings.model.layers,
        settings.model.heads,
        settings.model.d_model,
        settings.model.d_ff,
    )
}

fn load_spec_canonical(path: &std::path::Path) -> Result<muxprune::SparsitySpec> {
    Ok(match load_prune_input(path)? {
        PruneInput::Spec(s) => s.canonicalized(),
        PruneInput::Scores(scores) => threshold_masks(&scores),
    })
}

fn cmd_prune(
    bundle_path: &std::path::Path,
    spec_path: &std::path::Path,
    out: &std::path::Path,
) -> Result<()> {
    let bundle = load_bundle(bundle_path)?;
    let spec = load_spec_canonical(spec_path)?;
    let cfg = bundle.model.dense_config().ok_or_else(|| {
        Error::Degenerate("bundle model is already compacted; prune a dense bundle".into())
    })?;
    let sparsity = sparsity_of(&spec, &cfg)?;
    let model = compact(&bundle.model, &spec)?;
    let kit = align_demux(&bundle.kit, &spec.hidden)?;
    let mut prov = bundle.provenance.clone();
    prov.phases.push("compact".into());
    prov.sparsity = sparsity;
    let spec_now = dense_spec_for(&model);
    save_bundle(out, &ModelBundle::new(prov, kit, model, spec_now))?;
    println!("{sparsity}");
    Ok(())
}

fn cmd_bench(
    bundle_path: &std::path::Path,
    mode: ModeArg,
    reps: usize,
    seq_len: usize,
    seed: u64,
) -> Result<()> {
    let bundle = load_bundle(bundle_path)?;
    let n = bundle.kit.n();
    let sparsity = bundle.provenance.sparsity;
    let (candidate_run, baseline_run) = match mode {
        ModeArg::Flops => (
            BenchRun::proxy(n, sparsity, seq_len)?,
            BenchRun::proxy(1, 0.0, seq_len)?,
        ),
        ModeArg::Wall => (
            BenchRun::wall(n, sparsity, seq_len, reps, seed)?,
            BenchRun::wall(1, 0.0, seq_len, reps, seed)?,
        ),
    };
    let outcome = bench::measure(&bundle.model, Some(&bundle.kit), &candidate_run)?;
    // Dense unmultiplexed baseline reconstructed at the original dimensions.
    let baseline_model = EncoderModel::new(
        &bundle.provenance.original,
        bundle.model.classes(),
        bundle.model.vocab(),
        RngKey(bundle.provenance.seed).derive(0x62617365),
    )?;
    let baseline = bench::measure(&baseline_model, None, &baseline_run)?;
    let multiplier = bench::multiplier(outcome.throughput, baseline.throughput)?;
    if let Some(d) = outcome.dispersion {
        eprintln!("reps={} dispersion={:.4}", outcome.reps, d);
    }
    println!("{}", bench::CSV_HEADER);
    println!(
        "{}",
        bench::csv_row(&bundle.provenance.task, &outcome, multiplier)
    );
    Ok(())
}

fn task_records<'a>(
    records: &'a [MeasurementRecord],
    requested: Option<&str>,
) -> Result<(String, Vec<&'a MeasurementRecord>)> {
    let task = match requested {
        Some(t) => t.to_string(),
        None => {
            let mut tasks: Vec<&str> = records.iter().map(|r| r.task.as_str()).collect();
            tasks.sort_unstable();
            tasks.dedup();
            match tasks.as_slice() {
                [one] => one.to_string(),
                many => {
                    return Err(Error::Config(format!(
                        "measurements contain {} tasks ({}); pass --task",
                        many.len(),
                        many.join(", ")
                    )))
                }
            }
        }
    };
    let subset: Vec<&MeasurementRecord> = records.iter().filter(|r| r.task == task).collect();
    if subset.is_empty() {
        return Err(Error::Config(format!("no measurements for task {task}")));
    }
    Ok((task, subset))
}

fn cmd_plan_fit(
    measurements: &std::path::Path,
    reference_task: &str,
    task: Option<&str>,
    out: &std::path::Path,
) -> Result<()> {
    let records = load_measurements(measurements)?;
    let (task, subset) = task_records(&records, task)?;
    let owned: Vec<MeasurementRecord> = subset.into_iter().cloned().collect();
    let accuracy = planner::fit_accuracy(&owned)?;
    let throughput = planner::fit_throughput(&records, reference_task)?;
    let model = PlannerModel::new(accuracy, throughput);
    save_planner_model(out, &model)?;
    println!(
        "{task},{}x{},{}",
        model.accuracy.knots_n.len(),
        model.accuracy.knots_s.len(),
        model.throughput.entries.len()
    );
    Ok(())
}

fn cmd_plan_predict(
    model_path: Option<&std::path::Path>,
    measurements: &std::path::Path,
    budget: f64,
    top: usize,
    task: Option<&str>,
) -> Result<()> {
    let records = load_measurements(measurements)?;
    let model = model_path.map(load_planner_model).transpose()?;
    let requested = task.or(model.as_ref().map(|m| m.accuracy.task.as_str()));
    let (_, subset) = task_records(&records, requested)?;
    let owned: Vec<MeasurementRecord> = subset.into_iter().cloned().collect();
    let mut candidates: Vec<(f64, f64)> = owned.iter().map(|r| (r.n, r.sparsity)).collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    candidates.dedup();
    let surrogates = match &model {
        Some(m) => m.surrogates(),
        None => Surrogates::default(),
    };
    let predictions = planner::predict_topk(
        &surrogates,
        &owned,
        &PlannerQuery {
            budget,
            candidates,
            k: top,
        },
    )?;
    println!("rank,n,sparsity,predicted_accuracy,predicted_multiplier,score");
    for (rank, p) in predictions.iter().enumerate() {
        println!(
            "{},{},{},{},{},{}",
            rank + 1,
            p.n,
            p.sparsity,
            p.accuracy,
            p.multiplier,
            p.score
        );
    }
    Ok(())
}

fn cmd_plan_eval(model_path: &std::path::Path, measurements: &std::path::Path) -> Result<()> {
    let records = load_measurements(measurements)?;
    let model = load_planner_model(model_path)?;
    let mut tasks: Vec<&str> = records.iter().map(|r| r.task.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    println!("task,metric,value");
    for task in tasks {
        let subset: Vec<MeasurementRecord> = records
            .iter()
            .filter(|r| r.task == task)
            .cloned()
            .collect();
        let m_a = planner::loocv_accuracy(&subset, planner::LOOCV_BAND)?;
        let m_t =
            planner::eval_throughput_model(&model.throughput, &subset, planner::THROUGHPUT_BAND)?;
        // Sweep with a per-task accuracy fit and the shared throughput table,
        // against the task's own measured candidates.
        let acc = planner::fit_accuracy(&subset)?;
        let surrogates = Surrogates {
            accuracy: Some(&acc),
            throughput: Some(&model.throughput),
        };
        let mut candidates: Vec<(f64, f64)> = subset.iter().map(|r| (r.n, r.sparsity)).collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        candidates.dedup();
        let sweep = planner::budget_sweep(&surrogates, &subset, &candidates, &budget_grid())?;
        println!("{task},m_a,{m_a}");
        println!("{task},m_t,{m_t}");
        println!("{task},hit_rate,{}", sweep.hit_rate);
    }
    Ok(())
}
