//! Width/sparsity planning: fit surrogate models over measured `(N, s)`
//! points, score candidate pairs under an accuracy-loss budget, rank the
//! best, and evaluate surrogate quality.
//!
//! The accuracy surrogate is a piecewise-bilinear interpolant over a
//! rectangular knot grid of measured points with `N > 1, s > 0`; each cell
//! carries coefficients `k00 + k10*N + k01*s + k11*N*s` solving the four
//! corner collocation equations exactly. Rows with `N = 1` or `s = 0` are
//! baselines and always answered from the measured records directly. The
//! throughput surrogate is an exact lookup table of one reference task's
//! multipliers, used for every task.
//!
//! A candidate's score is `throughput * g(accuracy)` where `g` is the hard
//! threshold at `xi = Acc(1, 0) - budget`: models that miss the accuracy bar
//! score zero and are never ranked.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// On-disk format version for fitted-model JSON.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Accuracy band for leave-one-out cross-validation (1.5%).
pub const LOOCV_BAND: f64 = 0.015;

/// Relative band for throughput-model evaluation (20%).
pub const THROUGHPUT_BAND: f64 = 0.20;

/// One measured configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub task: String,
    pub n: f64,
    pub sparsity: f64,
    pub accuracy: f64,
    pub throughput: f64,
}

impl MeasurementRecord {
    pub fn validate(&self) -> Result<()> {
        if self.task.is_empty() || self.task.contains(',') {
            return Err(Error::Config(format!(
                "task name {:?} must be nonempty and comma-free",
                self.task
            )));
        }
        if self.n < 1.0 || !self.n.is_finite() {
            return Err(Error::Config(format!("width must be >= 1, got {}", self.n)));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!(
                "sparsity must lie in [0, 1], got {}",
                self.sparsity
            )));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Config(format!(
                "accuracy must lie in [0, 1], got {}",
                self.accuracy
            )));
        }
        if self.throughput <= 0.0 || !self.throughput.is_finite() {
            return Err(Error::Config(format!(
                "throughput multiplier must be positive, got {}",
                self.throughput
            )));
        }
        Ok(())
    }
}

fn single_task(records: &[MeasurementRecord]) -> Result<&str> {
    let first = records
        .first()
        .ok_or(Error::Empty("no measurement records"))?;
    if records.iter().any(|r| r.task != first.task) {
        return Err(Error::Config(
            "records span multiple tasks; filter to one task first".into(),
        ));
    }
    Ok(&first.task)
}

// ---------------------------------------------------------------------------
// Accuracy model
// ---------------------------------------------------------------------------

/// Piecewise-bilinear accuracy surrogate over a `p x q` knot grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyModel {
    pub task: String,
    pub knots_n: Vec<f64>,
    pub knots_s: Vec<f64>,
    /// `grid[i][j]` = measured accuracy at `(knots_n[i], knots_s[j])`.
    pub grid: Vec<Vec<f64>>,
    /// `coeffs[i][j]` = `[k00, k10, k01, k11]` for the cell spanning
    /// `[knots_n[i], knots_n[i+1]] x [knots_s[j], knots_s[j+1]]`.
    pub coeffs: Vec<Vec<[f64; 4]>>,
}

fn cell_coeffs(n0: f64, n1: f64, s0: f64, s1: f64, f: [f64; 4]) -> [f64; 4] {
    let [f00, f10, f01, f11] = f; // f(n_a, s_b) indexed ab
    let d = (n1 - n0) * (s1 - s0);
    [
        (f00 * n1 * s1 - f10 * n0 * s1 - f01 * n1 * s0 + f11 * n0 * s0) / d,
        (s1 * (f10 - f00) + s0 * (f01 - f11)) / d,
        (n1 * (f01 - f00) + n0 * (f10 - f11)) / d,
        (f00 - f10 - f01 + f11) / d,
    ]
}

/// Fit the accuracy surrogate on the records' `N > 1, s > 0` subset, which
/// must form a complete rectangular grid with at least two knots per axis.
pub fn fit_accuracy(records: &[MeasurementRecord]) -> Result<AccuracyModel> {
    let task = single_task(records)?.to_string();
    let interior: Vec<&MeasurementRecord> = records
        .iter()
        .filter(|r| r.n > 1.0 && r.sparsity > 0.0)
        .collect();
    let mut knots_n: Vec<f64> = interior.iter().map(|r| r.n).collect();
    knots_n.sort_by(f64::total_cmp);
    knots_n.dedup();
    let mut knots_s: Vec<f64> = interior.iter().map(|r| r.sparsity).collect();
    knots_s.sort_by(f64::total_cmp);
    knots_s.dedup();
    let (p, q) = (knots_n.len(), knots_s.len());
    if p < 2 || q < 2 {
        return Err(Error::DegenerateGrid(format!(
            "need at least a 2x2 grid of N > 1, s > 0 measurements, got {p}x{q}"
        )));
    }
    let mut grid = vec![vec![f64::NAN; q]; p];
    let mut seen = vec![vec![false; q]; p];
    for r in &interior {
        let i = knots_n.iter().position(|&v| v == r.n).unwrap();
        let j = knots_s.iter().position(|&v| v == r.sparsity).unwrap();
        if seen[i][j] {
            return Err(Error::DuplicateMeasurement {
                task: r.task.clone(),
                n: r.n,
                s: r.sparsity,
            });
        }
        seen[i][j] = true;
        grid[i][j] = r.accuracy;
    }
    for i in 0..p {
        for j in 0..q {
            if !seen[i][j] {
                return Err(Error::IncompleteGrid(format!(
                    "missing measurement at (N={}, s={})",
                    knots_n[i], knots_s[j]
                )));
            }
        }
    }
    let coeffs = (0..p - 1)
        .map(|i| {
            (0..q - 1)
                .map(|j| {
                    cell_coeffs(
                        knots_n[i],
                        knots_n[i + 1],
                        knots_s[j],
                        knots_s[j + 1],
                        [
                            grid[i][j],
                            grid[i + 1][j],
                            grid[i][j + 1],
                            grid[i + 1][j + 1],
                        ],
                    )
                })
                .collect()
        })
        .collect();
    Ok(AccuracyModel {
        task,
        knots_n,
        knots_s,
        grid,
        coeffs,
    })
}

fn locate(knots: &[f64], v: f64) -> usize {
    // Largest cell index i with knots[i] <= v, clamped to the last cell.
    let mut i = match knots.binary_search_by(|k| k.total_cmp(&v)) {
        Ok(exact) => exact,
        Err(ins) => ins.saturating_sub(1),
    };
    if i >= knots.len() - 1 {
        i = knots.len() - 2;
    }
    i
}

impl AccuracyModel {
    pub fn in_hull(&self, n: f64, s: f64) -> bool {
        n >= self.knots_n[0]
            && n <= *self.knots_n.last().unwrap()
            && s >= self.knots_s[0]
            && s <= *self.knots_s.last().unwrap()
    }

    /// Bilinear evaluation inside the hull; knots answer with their stored
    /// grid value so collocation is exact.
    pub fn interpolate(&self, n: f64, s: f64) -> Result<f64> {
        if !self.in_hull(n, s) {
            return Err(Error::OutOfDomain { n, s });
        }
        if let (Some(i), Some(j)) = (
            self.knots_n.iter().position(|&v| v == n),
            self.knots_s.iter().position(|&v| v == s),
        ) {
            return Ok(self.grid[i][j]);
        }
        let i = locate(&self.knots_n, n);
        let j = locate(&self.knots_s, s);
        let [k00, k10, k01, k11] = self.coeffs[i][j];
        Ok(k00 + k10 * n + k01 * s + k11 * n * s)
    }
}

/// Predicted accuracy for `(n, s)`: measured passthrough for baseline rows
/// (`n = 1` or `s = 0`), bilinear interpolation inside the knot hull, and a
/// measured record as a last resort outside it. No silent extrapolation.
pub fn eval_accuracy(
    model: &AccuracyModel,
    records: &[MeasurementRecord],
    n: f64,
    s: f64,
) -> Result<f64> {
    let lookup = || {
        records
            .iter()
            .find(|r| r.task == model.task && r.n == n && r.sparsity == s)
            .map(|r| r.accuracy)
    };
    if n == 1.0 || s == 0.0 {
        return lookup().ok_or(Error::OutOfDomain { n, s });
    }
    if model.in_hull(n, s) {
        return model.interpolate(n, s);
    }
    lookup().ok_or(Error::OutOfDomain { n, s })
}

// ---------------------------------------------------------------------------
// Throughput model
// ---------------------------------------------------------------------------

/// Exact lookup table of one reference task's throughput multipliers, used as
/// the throughput estimate for every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputModel {
    pub task: String,
    /// `(n, sparsity, multiplier)` sorted by `(n, sparsity)`.
    pub entries: Vec<(f64, f64, f64)>,
}

pub fn fit_throughput(records: &[MeasurementRecord], reference_task: &str) -> Result<ThroughputModel> {
    let mut entries: Vec<(f64, f64, f64)> = records
        .iter()
        .filter(|r| r.task == reference_task)
        .map(|r| (r.n, r.sparsity, r.throughput))
        .collect();
    if entries.is_empty() {
        return Err(Error::Empty("no records for the reference task"));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for w in entries.windows(2) {
        if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
            return Err(Error::DuplicateMeasurement {
                task: reference_task.to_string(),
                n: w[0].0,
                s: w[0].1,
            });
        }
    }
    Ok(ThroughputModel {
        task: reference_task.to_string(),
        entries,
    })
}

/// Exact lookup, regardless of which task is being planned.
pub fn eval_throughput(model: &ThroughputModel, n: f64, s: f64) -> Result<f64> {
    model
        .entries
        .binary_search_by(|e| e.0.total_cmp(&n).then(e.1.total_cmp(&s)))
        .map(|i| model.entries[i].2)
        .map_err(|_| Error::MissingMeasurement {
            task: model.task.clone(),
            n,
            s,
        })
}

// ---------------------------------------------------------------------------
// Scoring and ranking
// ---------------------------------------------------------------------------

/// `throughput * g(accuracy)` with the inclusive hard threshold
/// `g(x) = 1 if x >= xi else 0`.
pub fn zeta(pred_acc: f64, pred_throughput: f64, xi: f64) -> f64 {
    if pred_acc >= xi {
        pred_throughput
    } else {
        0.0
    }
}

/// A candidate search: accuracy-loss budget, candidate pairs, result count.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerQuery {
    pub budget: f64,
    pub candidates: Vec<(f64, f64)>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub n: f64,
    pub sparsity: f64,
    pub accuracy: f64,
    pub multiplier: f64,
    pub score: f64,
}

/// Surrogates to predict with. A missing accuracy or throughput model falls
/// back to measured records (every candidate must then be measured).
#[derive(Debug, Clone, Copy, Default)]
pub struct Surrogates<'a> {
    pub accuracy: Option<&'a AccuracyModel>,
    pub throughput: Option<&'a ThroughputModel>,
}

fn predict_candidate(
    surrogates: &Surrogates<'_>,
    records: &[MeasurementRecord],
    task: &str,
    n: f64,
    s: f64,
) -> Result<(f64, f64)> {
    let acc = match surrogates.accuracy {
        Some(model) => eval_accuracy(model, records, n, s)?,
        None => records
            .iter()
            .find(|r| r.task == task && r.n == n && r.sparsity == s)
            .map(|r| r.accuracy)
            .ok_or(Error::OutOfDomain { n, s })?,
    };
    let thr = match surrogates.throughput {
        Some(model) => eval_throughput(model, n, s)?,
        None => records
            .iter()
            .find(|r| r.task == task && r.n == n && r.sparsity == s)
            .map(|r| r.throughput)
            .ok_or(Error::MissingMeasurement {
                task: task.to_string(),
                n,
                s,
            })?,
    };
    Ok((acc, thr))
}

fn baseline_accuracy(records: &[MeasurementRecord], task: &str) -> Result<f64> {
    records
        .iter()
        .find(|r| r.task == task && r.n == 1.0 && r.sparsity == 0.0)
        .map(|r| r.accuracy)
        .ok_or_else(|| {
            Error::Config(format!(
                "no baseline (N=1, s=0) measurement for task {task}"
            ))
        })
}

/// Rank the feasible candidates by score. Zero-score candidates are dropped;
/// ties break toward smaller `N`, then smaller `s`. At most `k` results.
pub fn predict_topk(
    surrogates: &Surrogates<'_>,
    records: &[MeasurementRecord],
    query: &PlannerQuery,
) -> Result<Vec<Prediction>> {
    if query.candidates.is_empty() {
        return Err(Error::Empty("candidate set is empty"));
    }
    if query.budget < 0.0 {
        return Err(Error::Config(format!(
            "budget must be nonnegative, got {}",
            query.budget
        )));
    }
    let task = match surrogates.accuracy {
        Some(m) => m.task.clone(),
        None => single_task(records)?.to_string(),
    };
    let xi = baseline_accuracy(records, &task)? - query.budget;
    let mut out = Vec::new();
    for &(n, s) in &query.candidates {
        let (acc, thr) = predict_candidate(surrogates, records, &task, n, s)?;
        let score = zeta(acc, thr, xi);
        if score > 0.0 {
            out.push(Prediction {
                n,
                sparsity: s,
                accuracy: acc,
                multiplier: thr,
                score,
            });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.n.total_cmp(&b.n))
            .then(a.sparsity.total_cmp(&b.sparsity))
    });
    out.truncate(query.k);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Surrogate quality metrics
// ---------------------------------------------------------------------------

/// Leave-one-out cross-validation of the accuracy grid: every knot is
/// predicted from the remaining knots and `M_A` is the fraction of
/// predictions within `delta` of the measurement.
///
/// Held-out interior knots are predicted bilinearly from the four diagonal
/// neighbors forming the enclosing rectangle; edge and corner knots are
/// predicted linearly along each axis from the two nearest remaining knots on
/// that axis, averaged over the axes. Needs at least a 3x3 grid.
pub fn loocv_accuracy(records: &[MeasurementRecord], delta: f64) -> Result<f64> {
    let model = fit_accuracy(records)?;
    let (p, q) = (model.knots_n.len(), model.knots_s.len());
    if p < 3 || q < 3 {
        return Err(Error::DegenerateGrid(format!(
            "leave-one-out needs at least a 3x3 grid, got {p}x{q}"
        )));
    }
    let kn = &model.knots_n;
    let ks = &model.knots_s;
    let g = &model.grid;
    let mut hits = 0usize;
    for i in 0..p {
        for j in 0..q {
            let predicted = if (1..p - 1).contains(&i) && (1..q - 1).contains(&j) {
                let cell = cell_coeffs(
                    kn[i - 1],
                    kn[i + 1],
                    ks[j - 1],
                    ks[j + 1],
                    [
                        g[i - 1][j - 1],
                        g[i + 1][j - 1],
                        g[i - 1][j + 1],
                        g[i + 1][j + 1],
                    ],
                );
                cell[0] + cell[1] * kn[i] + cell[2] * ks[j] + cell[3] * kn[i] * ks[j]
            } else {
                let along_n = {
                    let (a, b) = nearest_two(i, p);
                    line_at(kn[a], g[a][j], kn[b], g[b][j], kn[i])
                };
                let along_s = {
                    let (a, b) = nearest_two(j, q);
                    line_at(ks[a], g[i][a], ks[b], g[i][b], ks[j])
                };
                0.5 * (along_n + along_s)
            };
            if (predicted - g[i][j]).abs() <= delta {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (p * q) as f64)
}

/// Indices of the two nearest remaining knots along one axis when `held` is
/// left out (axis length `len`).
fn nearest_two(held: usize, len: usize) -> (usize, usize) {
    if held == 0 {
        (1, 2)
    } else if held == len - 1 {
        (len - 2, len - 3)
    } else {
        (held - 1, held + 1)
    }
}

fn line_at(x0: f64, y0: f64, x1: f64, y1: f64, x: f64) -> f64 {
    y0 + (x - x0) * (y1 - y0) / (x1 - x0)
}

/// Fraction of one task's measured pairs whose reference-task prediction
/// falls within the relative `band` (`M_T`). Errors if no pairs overlap.
pub fn eval_throughput_model(
    model: &ThroughputModel,
    records: &[MeasurementRecord],
    band: f64,
) -> Result<f64> {
    single_task(records)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in records {
        if let Ok(pred) = eval_throughput(model, r.n, r.sparsity) {
            total += 1;
            if (pred / r.throughput - 1.0).abs() <= band {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::DegenerateGrid(
            "no overlapping (N, s) pairs between model and records".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Budget sweep
// ---------------------------------------------------------------------------

/// The usual sweep: budgets 0%, 0.5%, ..., 10%.
pub fn budget_grid() -> Vec<f64> {
    (0..=20).map(|k| k as f64 * 0.005).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub budget: f64,
    pub top: Vec<Prediction>,
    /// Best feasible candidate by measured values, if any is feasible.
    pub oracle: Option<(f64, f64)>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Fraction of budgets whose oracle-best candidate appears in the
    /// predicted top list.
    pub hit_rate: f64,
}

/// For each budget, predict the top 3 candidates and compare against an
/// exhaustive-search oracle over the measured records (which must contain
/// every candidate). A budget with no feasible candidate counts as a hit iff
/// the prediction list is empty too.
pub fn budget_sweep(
    surrogates: &Surrogates<'_>,
    records: &[MeasurementRecord],
    candidates: &[(f64, f64)],
    budgets: &[f64],
) -> Result<SweepReport> {
    let task = match surrogates.accuracy {
        Some(m) => m.task.clone(),
        None => single_task(records)?.to_string(),
    };
    let truth: Vec<(f64, f64, f64, f64)> = candidates
        .iter()
        .map(|&(n, s)| {
            records
                .iter()
                .find(|r| r.task == task && r.n == n && r.sparsity == s)
                .map(|r| (n, s, r.accuracy, r.throughput))
                .ok_or(Error::MissingMeasurement {
                    task: task.clone(),
                    n,
                    s,
                })
        })
        .collect::<Result<_>>()?;
    let base = baseline_accuracy(records, &task)?;
    let mut rows = Vec::with_capacity(budgets.len());
    let mut hits = 0usize;
    for &budget in budgets {
        let xi = base - budget;
        let top = predict_topk(
            surrogates,
            records,
            &PlannerQuery {
                budget,
                candidates: candidates.to_vec(),
                k: 3,
            },
        )?;
        let oracle = truth
            .iter()
            .filter(|&&(_, _, acc, _)| acc >= xi)
            .max_by(|a, b| {
                a.3.total_cmp(&b.3)
                    .then(b.0.total_cmp(&a.0))
                    .then(b.1.total_cmp(&a.1))
            })
            .map(|&(n, s, _, _)| (n, s));
        let hit = match oracle {
            Some((n, s)) => top.iter().any(|p| p.n == n && p.sparsity == s),
            None => top.is_empty(),
        };
        hits += usize::from(hit);
        rows.push(SweepRow {
            budget,
            top,
            oracle,
            hit,
        });
    }
    let hit_rate = hits as f64 / budgets.len() as f64;
    Ok(SweepReport { rows, hit_rate })
}

// ---------------------------------------------------------------------------
// Persisted model pair
// ---------------------------------------------------------------------------

/// The fitted models as stored in model JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerModel {
    pub format_version: u32,
    pub accuracy: AccuracyModel,
    pub throughput: ThroughputModel,
}

impl PlannerModel {
    pub fn new(accuracy: AccuracyModel, throughput: ThroughputModel) -> PlannerModel {
        PlannerModel {
            format_version: MODEL_FORMAT_VERSION,
            accuracy,
            throughput,
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        Ok(())
    }

    pub fn surrogates(&self) -> Surrogates<'_> {
        Surrogates {
            accuracy: Some(&self.accuracy),
            throughput: Some(&self.throughput),
        }
    }
}
