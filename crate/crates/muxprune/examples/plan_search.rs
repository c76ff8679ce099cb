//! Planner walkthrough on a synthetic accuracy/throughput surface: fit the
//! bilinear accuracy model and the throughput lookup, rank candidates under
//! accuracy-loss budgets, and score the surrogates (leave-one-out band
//! fraction, throughput band fraction, sweep hit rate).
//!
//! Run with: `cargo run -p muxprune --example plan_search`

use muxprune::planner::{
    budget_grid, budget_sweep, eval_throughput_model, fit_accuracy, fit_throughput,
    loocv_accuracy, predict_topk, MeasurementRecord, PlannerQuery, Surrogates, LOOCV_BAND,
    THROUGHPUT_BAND,
};

fn acc(n: f64, s: f64) -> f64 {
    0.9 - 0.02 * n.log2() - 0.05 * s
}

fn thru(n: f64, s: f64) -> f64 {
    (n * (1.0 + 4.0 * s)).max(1.0)
}

fn main() -> muxprune::Result<()> {
    // "Measure" a fine grid of configurations on the synthetic surface.
    let widths = [1.0, 2.0, 5.0, 10.0];
    let sparsities: Vec<f64> = std::iter::once(0.0)
        .chain((0..8).map(|k| 0.6 + 0.05 * k as f64))
        .collect();
    let mut records = Vec::new();
    for &n in &widths {
        for &s in &sparsities {
            records.push(MeasurementRecord {
                task: "surface".into(),
                n,
                sparsity: s,
                accuracy: acc(n, s),
                throughput: thru(n, s),
            });
        }
    }

    // Fit on the coarse subset only; the rest of the grid is held out.
    let coarse = [0.6, 0.7, 0.8, 0.9, 0.95];
    let fit_rows: Vec<MeasurementRecord> = records
        .iter()
        .filter(|r| r.n > 1.0 && coarse.contains(&r.sparsity))
        .cloned()
        .collect();
    let acc_model = fit_accuracy(&fit_rows)?;
    let thr_model = fit_throughput(&records, "surface")?;
    let surrogates = Surrogates {
        accuracy: Some(&acc_model),
        throughput: Some(&thr_model),
    };
    println!(
        "accuracy knots: {:?} x {:?}",
        acc_model.knots_n, acc_model.knots_s
    );

    let candidates: Vec<(f64, f64)> = records.iter().map(|r| (r.n, r.sparsity)).collect();
    for budget in [0.02, 0.05, 0.10] {
        let top = predict_topk(
            &surrogates,
            &records,
            &PlannerQuery {
                budget,
                candidates: candidates.clone(),
                k: 3,
            },
        )?;
        println!("budget {:>4.1}%:", budget * 100.0);
        for (i, p) in top.iter().enumerate() {
            println!(
                "  {}. (N={}, s={:.2})  acc {:.4}  x{:.1}",
                i + 1,
                p.n,
                p.sparsity,
                p.accuracy,
                p.multiplier
            );
        }
    }

    let m_a = loocv_accuracy(&fit_rows, LOOCV_BAND)?;
    let m_t = eval_throughput_model(&thr_model, &records, THROUGHPUT_BAND)?;
    let sweep = budget_sweep(&surrogates, &records, &candidates, &budget_grid())?;
    println!("surrogate quality: M_A {m_a:.3}, M_T {m_t:.3}");
    println!(
        "budget sweep: top-3 contains the true best for {:.1}% of budgets",
        100.0 * sweep.hit_rate
    );
    Ok(())
}
