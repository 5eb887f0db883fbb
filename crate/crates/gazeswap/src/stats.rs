//! Evaluation protocol: per-frame angular gaze error, per-individual
//! log-error aggregation, a random-intercept mixed model for significance,
//! and percent-improvement reporting.
//!
//! The aggregation order is fixed: frames → log of error → mean per
//! (individual, method). The mixed model is
//! `mean_log_error ~ method + (1 | individual)` fit by REML, with the
//! variance ratio profiled out and maximized by golden-section search.
//! Wald t statistics per method contrast use residual degrees of freedom
//! `n − p − q + 1` (an approximation; see the report footnotes).

use crate::dataset::{load_identity, DatasetError};
use crate::faces::{FaceImage, GazeAngles};
use crate::gaze::{angular_error, GazeEstimator};
use crate::losses::ConditionId;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("records csv {path} line {line}: {detail}")]
    BadRecord { path: String, line: usize, detail: String },
    #[error("error_rad {0} outside [0, pi]")]
    ErrorOutOfRange(f64),
    #[error("need at least two methods, got {0}")]
    TooFewMethods(usize),
    #[error("need at least two individuals, got {0}")]
    TooFewIndividuals(usize),
    #[error("design matrix is singular; collinear columns: {0:?}")]
    SingularDesign(Vec<String>),
    #[error("baseline mean error must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("no records")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StatsError + '_ {
    move |source| StatsError::Io { path: path.display().to_string(), source }
}

/// One evaluated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub individual: String,
    pub method: ConditionId,
    pub frame_index: u32,
    pub error_rad: f64,
}

impl ExperimentRecord {
    pub fn new(
        individual: &str,
        method: ConditionId,
        frame_index: u32,
        error_rad: f64,
    ) -> Result<Self, StatsError> {
        if !(0.0..=std::f64::consts::PI).contains(&error_rad) {
            return Err(StatsError::ErrorOutOfRange(error_rad));
        }
        Ok(Self { individual: individual.to_string(), method, frame_index, error_rad })
    }
}

pub const RECORDS_CSV_HEADER: &str = "individual,method,frame_index,error_rad";

pub fn write_records_csv(path: &Path, records: &[ExperimentRecord]) -> Result<(), StatsError> {
    let mut text = String::from(RECORDS_CSV_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&format!("{},{},{},{}\n", r.individual, r.method, r.frame_index, r.error_rad));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ExperimentRecord>, StatsError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| StatsError::BadRecord {
            path: path.display().to_string(),
            line: i + 1,
            detail,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", f.len())));
        }
        let method =
            ConditionId::parse(f[1]).ok_or_else(|| bad(format!("unknown method {:?}", f[1])))?;
        let frame_index: u32 = f[2].parse().map_err(|e| bad(format!("frame_index: {e}")))?;
        let error_rad: f64 = f[3].parse().map_err(|e| bad(format!("error_rad: {e}")))?;
        out.push(
            ExperimentRecord::new(f[0], method, frame_index, error_rad)
                .map_err(|e| bad(e.to_string()))?,
        );
    }
    Ok(out)
}

/// How the per-frame reference gaze is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum GroundTruth {
    /// The dataset's true rendering gaze.
    #[clap(name = "true")]
    TrueGaze,
    /// The estimator applied to the source frame.
    #[clap(name = "estimated")]
    EstimatorOnSource,
}

/// Output of `frame_errors`: records plus the per-frame gaze estimates
/// (useful for scatter plots) and the dropped-frame count.
#[derive(Debug, Clone)]
pub struct FrameErrors {
    pub records: Vec<ExperimentRecord>,
    pub swap_gazes: Vec<(u32, GazeAngles)>,
    pub source_gazes: Vec<(u32, GazeAngles)>,
    pub dropped: u64,
}

/// Evaluates swapped frames against their source frames. Frames whose swap
/// image is missing/corrupt or where the estimator fails are dropped and
/// counted rather than aborting the evaluation.
pub fn frame_errors(
    swaps_dir: &Path,
    dataset_root: &Path,
    identity: &str,
    estimator: &dyn GazeEstimator,
    ground_truth: GroundTruth,
    method: ConditionId,
    individual: &str,
) -> Result<FrameErrors, StatsError> {
    let source = load_identity(dataset_root, identity)?;

    struct FrameOutcome {
        record: Option<(u32, f64, GazeAngles, GazeAngles)>,
    }

    let outcomes: Vec<FrameOutcome> = source
        .par_iter()
        .map(|frame| {
            let path = swaps_dir.join(format!("{:04}.png", frame.frame_index));
            let Ok(swap) = FaceImage::load_png(&path) else {
                return FrameOutcome { record: None };
            };
            let Ok(est_swap) = estimator.estimate(&swap, Some(&frame.masks)) else {
                return FrameOutcome { record: None };
            };
            let reference = match ground_truth {
                GroundTruth::TrueGaze => frame.true_gaze,
                GroundTruth::EstimatorOnSource => {
                    match estimator.estimate(&frame.image, Some(&frame.masks)) {
                        Ok(g) => g,
                        Err(_) => return FrameOutcome { record: None },
                    }
                }
            };
            let err = angular_error(est_swap, reference);
            FrameOutcome { record: Some((frame.frame_index, err, est_swap, reference)) }
        })
        .collect();

    let mut records = Vec::new();
    let mut swap_gazes = Vec::new();
    let mut source_gazes = Vec::new();
    let mut dropped = 0;
    for o in outcomes {
        match o.record {
            Some((idx, err, est_swap, reference)) => {
                records.push(ExperimentRecord::new(individual, method, idx, err)?);
                swap_gazes.push((idx, est_swap));
                source_gazes.push((idx, reference));
            }
            None => dropped += 1,
        }
    }
    Ok(FrameErrors { records, swap_gazes, source_gazes, dropped })
}

/// Floor applied to per-frame errors before the log transform.
pub const LOG_FLOOR_RAD: f64 = 1e-4;

/// Per-(individual, method) aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub individual: String,
    pub method: ConditionId,
    /// Mean of log error (radians, floored at `LOG_FLOOR_RAD`).
    pub mean_log_error: f64,
    /// Mean error in degrees (plain arithmetic mean, for reporting).
    pub mean_error_deg: f64,
    pub n_frames: usize,
}

/// Frames → log(error) → mean per (individual, method). The order is
/// load-bearing: the mean of logs is the log of the geometric mean, not
/// the log of the arithmetic mean.
pub fn aggregate_individual(records: &[ExperimentRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, ConditionId), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.individual.clone(), r.method)).or_default().push(r.error_rad);
    }
    groups
        .into_iter()
        .map(|((individual, method), mut errors)| {
            // Canonical order inside the group: results are invariant to
            // any permutation of the input records.
            errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = errors.len() as f64;
            let mean_log =
                errors.iter().map(|e| e.max(LOG_FLOOR_RAD).ln()).sum::<f64>() / n;
            let mean_deg = errors.iter().sum::<f64>() / n * 180.0 / std::f64::consts::PI;
            AggregateRow {
                individual,
                method,
                mean_log_error: mean_log,
                mean_error_deg: mean_deg,
                n_frames: errors.len(),
            }
        })
        .collect()
}

/// One method-vs-reference Wald contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub method: ConditionId,
    pub estimate: f64,
    pub std_error: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Random-intercept mixed model fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedModelFit {
    /// Methods in model order; the first is the reference level.
    pub methods: Vec<ConditionId>,
    pub individuals: Vec<String>,
    pub intercept: f64,
    /// Fixed-effect coefficients per non-reference method (log-error scale).
    pub coefficients: Vec<f64>,
    pub sigma_b2: f64,
    pub sigma_e2: f64,
    /// REML log-likelihood:
    /// `−½[(n−p)ln 2π + ln|V| + ln|XᵀV⁻¹X| + rᵀV⁻¹r]`.
    pub log_likelihood: f64,
    pub contrasts: Vec<Contrast>,
    /// Boundary solution with zero residual variance.
    pub degenerate: bool,
}

struct Design {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    methods: Vec<ConditionId>,
    individuals: Vec<String>,
}

fn build_design(rows: &[AggregateRow]) -> Result<Design, StatsError> {
    let mut methods: Vec<ConditionId> = Vec::new();
    for c in ConditionId::ALL {
        if rows.iter().any(|r| r.method == c) {
            methods.push(c);
        }
    }
    let mut individuals: Vec<String> = rows.iter().map(|r| r.individual.clone()).collect();
    individuals.sort();
    individuals.dedup();
    if methods.len() < 2 {
        return Err(StatsError::TooFewMethods(methods.len()));
    }
    if individuals.len() < 2 {
        return Err(StatsError::TooFewIndividuals(individuals.len()));
    }
    let n = rows.len();
    let p = methods.len();
    let q = individuals.len();
    let mut x = DMatrix::zeros(n, p);
    let mut z = DMatrix::zeros(n, q);
    let mut y = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        y[i] = row.mean_log_error;
        x[(i, 0)] = 1.0;
        let m = methods.iter().position(|&c| c == row.method).unwrap();
        if m > 0 {
            x[(i, m)] = 1.0;
        }
        let g = individuals.iter().position(|s| *s == row.individual).unwrap();
        z[(i, g)] = 1.0;
    }
    // Column sanity: a method with no rows cannot happen by construction,
    // but duplicated/empty columns (a collinear design) can.
    for j in 1..p {
        let col_sum: f64 = (0..n).map(|i| x[(i, j)]).sum();
        if col_sum == 0.0 || col_sum as usize == n {
            return Err(StatsError::SingularDesign(vec![methods[j].to_string()]));
        }
    }
    Ok(Design { y, x, z, methods, individuals })
}

struct ProfileEval {
    log_likelihood: f64,
    beta: DVector<f64>,
    sigma_e2: f64,
    xtvinvx_inv: DMatrix<f64>,
}

/// Evaluates the profiled REML criterion at variance ratio `lambda`.
fn profile(design: &Design, lambda: f64) -> Result<ProfileEval, StatsError> {
    let n = design.y.len();
    let p = design.x.ncols();
    let v0 = {
        let zzt = &design.z * design.z.transpose();
        DMatrix::identity(n, n) + zzt * lambda
    };
    let chol = v0
        .clone()
        .cholesky()
        .ok_or_else(|| StatsError::SingularDesign(vec!["covariance".into()]))?;
    let v_inv_x = chol.solve(&design.x);
    let v_inv_y = chol.solve(&design.y);
    let xtvinvx = design.x.transpose() * &v_inv_x;
    let xtvinvx_chol = xtvinvx.clone().cholesky().ok_or_else(|| {
        StatsError::SingularDesign(design.methods.iter().map(|m| m.to_string()).collect())
    })?;
    let xtvinvx_inv = xtvinvx_chol.inverse();
    let beta = &xtvinvx_inv * (design.x.transpose() * &v_inv_y);
    let r = &design.y - &design.x * &beta;
    let v_inv_r = chol.solve(&r);
    let quad = r.dot(&v_inv_r);
    let sigma_e2 = quad / (n - p) as f64;

    let ln_det_v0: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ln_det_xtvinvx: f64 =
        2.0 * xtvinvx_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    // Full REML log-likelihood with V = σ̂²V₀ and the quadratic form at its
    // profiled value rᵀV⁻¹r = n − p:
    //   −½[(n−p)ln2π + ln|V| + ln|XᵀV⁻¹X| + rᵀV⁻¹r].
    let nf = (n - p) as f64;
    let log_likelihood = if sigma_e2 > 0.0 {
        let ln_det_v = n as f64 * sigma_e2.ln() + ln_det_v0;
        let ln_det_xvx = ln_det_xtvinvx - p as f64 * sigma_e2.ln();
        -0.5 * (nf * (2.0 * std::f64::consts::PI).ln() + ln_det_v + ln_det_xvx + nf)
    } else {
        f64::INFINITY
    };
    Ok(ProfileEval { log_likelihood, beta, sigma_e2, xtvinvx_inv })
}

/// Fits the random-intercept model by profiled REML over the variance
/// ratio `σ_b²/σ_e²` with a golden-section search on the log scale.
pub fn fit_mixed_effects(rows: &[AggregateRow]) -> Result<MixedModelFit, StatsError> {
    let design = build_design(rows)?;
    let n = design.y.len();
    let p = design.x.ncols();
    let q = design.individuals.len();

    let eval = |t: f64| -> Result<(f64, f64), StatsError> {
        let e = profile(&design, t.exp())?;
        Ok((e.log_likelihood, e.sigma_e2))
    };

    // Degenerate screen: if residuals vanish for large lambda, the REML
    // criterion diverges and the boundary solution applies.
    let probe = profile(&design, 1e14)?;
    if probe.sigma_e2 < 1e-10 {
        let beta = probe.beta;
        // Between-individual variance of the random intercepts.
        let r = &design.y - &design.x * &beta;
        let mut means = vec![0.0; q];
        let mut counts = vec![0usize; q];
        for i in 0..n {
            for g in 0..q {
                if design.z[(i, g)] == 1.0 {
                    means[g] += r[i];
                    counts[g] += 1;
                }
            }
        }
        for g in 0..q {
            means[g] /= counts[g].max(1) as f64;
        }
        let mb = means.iter().sum::<f64>() / q as f64;
        let sigma_b2 =
            means.iter().map(|m| (m - mb) * (m - mb)).sum::<f64>() / (q as f64 - 1.0).max(1.0);
        return Ok(MixedModelFit {
            methods: design.methods,
            individuals: design.individuals,
            intercept: beta[0],
            coefficients: beta.iter().skip(1).copied().collect(),
            sigma_b2,
            sigma_e2: 0.0,
            log_likelihood: f64::INFINITY,
            contrasts: Vec::new(),
            degenerate: true,
        });
    }

    // Golden-section maximization over t = ln(lambda), plus the lambda→0
    // boundary.
    let (mut lo, mut hi) = (-16.0f64, 16.0f64);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut t1 = hi - phi * (hi - lo);
    let mut t2 = lo + phi * (hi - lo);
    let mut f1 = eval(t1)?.0;
    let mut f2 = eval(t2)?.0;
    for _ in 0..120 {
        if f1 < f2 {
            lo = t1;
            t1 = t2;
            f1 = f2;
            t2 = lo + phi * (hi - lo);
            f2 = eval(t2)?.0;
        } else {
            hi = t2;
            t2 = t1;
            f2 = f1;
            t1 = hi - phi * (hi - lo);
            f1 = eval(t1)?.0;
        }
    }
    let t_star = if f1 > f2 { t1 } else { t2 };
    let mut best_lambda = t_star.exp();
    let mut best = profile(&design, best_lambda)?;
    // Boundary candidate λ = 0 (no individual effect).
    let at_zero = profile(&design, 0.0)?;
    if at_zero.log_likelihood > best.log_likelihood {
        best_lambda = 0.0;
        best = at_zero;
    }

    let sigma_e2 = best.sigma_e2;
    let sigma_b2 = best_lambda * sigma_e2;
    let df = (n as f64 - p as f64 - q as f64 + 1.0).max(1.0);
    let tdist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    let mut contrasts = Vec::new();
    for j in 1..p {
        let se = (sigma_e2 * best.xtvinvx_inv[(j, j)]).max(0.0).sqrt();
        let estimate = best.beta[j];
        let t = if se > 0.0 { estimate / se } else { 0.0 };
        let pval = 2.0 * (1.0 - tdist.cdf(t.abs()));
        contrasts.push(Contrast { method: design.methods[j], estimate, std_error: se, t, df, p: pval });
    }

    Ok(MixedModelFit {
        methods: design.methods,
        individuals: design.individuals,
        intercept: best.beta[0],
        coefficients: best.beta.iter().skip(1).copied().collect(),
        sigma_b2,
        sigma_e2,
        log_likelihood: best.log_likelihood,
        contrasts,
        degenerate: false,
    })
}

/// Relative reduction of mean error versus a baseline, in percent.
pub fn percent_improvement(baseline: f64, method: f64) -> Result<f64, StatsError> {
    if baseline <= 0.0 {
        return Err(StatsError::NonPositiveBaseline(baseline));
    }
    Ok(100.0 * (baseline - method) / baseline)
}

fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Per-method summary line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: ConditionId,
    /// Mean over individuals of the per-individual mean error, degrees.
    pub mean_deg: f64,
    /// t-based 95% interval across individuals; absent for one individual.
    pub ci95: Option<(f64, f64)>,
    pub n_individuals: usize,
    pub improvement_vs_baseline_pct: Option<f64>,
    pub p_vs_baseline: Option<f64>,
    pub stars: &'static str,
}

/// Full comparison report.
#[derive(Debug, Clone)]
pub struct Report {
    pub methods: Vec<MethodSummary>,
    /// Per (individual, method) mean degrees — the per-video table.
    pub per_video: Vec<AggregateRow>,
    pub fit: Option<MixedModelFit>,
    pub warnings: Vec<String>,
    pub footnotes: Vec<String>,
}

/// Builds the full report: per-method means with t-based confidence
/// intervals across individuals, the per-video table, significance from
/// the mixed model, and percent improvements against the first method.
pub fn summarize(records: &[ExperimentRecord]) -> Result<Report, StatsError> {
    if records.is_empty() {
        return Err(StatsError::Empty);
    }
    let rows = aggregate_individual(records);
    let mut warnings = Vec::new();

    let mut methods: Vec<ConditionId> = Vec::new();
    for c in ConditionId::ALL {
        if rows.iter().any(|r| r.method == c) {
            methods.push(c);
        }
    }

    let fit = if methods.len() >= 2 {
        match fit_mixed_effects(&rows) {
            Ok(f) => {
                if f.degenerate {
                    warnings.push(
                        "degenerate mixed-model fit: residual variance is zero (boundary solution)"
                            .into(),
                    );
                }
                Some(f)
            }
            Err(e) => {
                warnings.push(format!("mixed-model fit skipped: {e}"));
                None
            }
        }
    } else {
        None
    };

    let baseline_mean: Option<f64> = methods.first().map(|&m| {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.mean_error_deg)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    });

    let mut summaries = Vec::new();
    for (mi, &method) in methods.iter().enumerate() {
        let vals: Vec<f64> =
            rows.iter().filter(|r| r.method == method).map(|r| r.mean_error_deg).collect();
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let ci95 = if n >= 2 {
            let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (n as f64 - 1.0))
                .sqrt();
            let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
                .expect("valid dof")
                .inverse_cdf(0.975);
            let half = t * sd / (n as f64).sqrt();
            Some((mean - half, mean + half))
        } else {
            warnings.push(format!(
                "confidence interval omitted for {method}: only one individual"
            ));
            None
        };
        let improvement = if mi > 0 {
            baseline_mean.map(|b| percent_improvement(b, mean)).transpose()?
        } else {
            None
        };
        let p_vs_baseline = fit
            .as_ref()
            .and_then(|f| f.contrasts.iter().find(|c| c.method == method))
            .map(|c| c.p);
        summaries.push(MethodSummary {
            method,
            mean_deg: mean,
            ci95,
            n_individuals: n,
            improvement_vs_baseline_pct: improvement,
            p_vs_baseline,
            stars: p_vs_baseline.map(significance_stars).unwrap_or(""),
        });
    }

    let footnotes = vec![
        "Percent improvements are computed from unrounded per-frame means; recomputing from \
         the rounded means printed above can disagree noticeably (for example, rounded means \
         of 5.98 and 4.71 give 21.2%, where the unrounded data behind them may give 19.7%)."
            .into(),
        format!(
            "Wald t degrees of freedom use the residual approximation n - p - q + 1; p values \
             are two-sided against the {} reference.",
            methods.first().map(|m| m.to_string()).unwrap_or_default()
        ),
    ];

    Ok(Report { methods: summaries, per_video: rows, fit, warnings, footnotes })
}

impl Report {
    /// Plain-text rendering: per-method table, per-video table, warnings,
    /// and footnotes. Deterministic for identical inputs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("== method summary ==\n");
        s.push_str(&format!(
            "{:<20} {:>10} {:>22} {:>12} {:>10} {:>5}\n",
            "method", "mean_deg", "95% CI", "improve_%", "p", "sig"
        ));
        for m in &self.methods {
            let ci = m
                .ci95
                .map(|(lo, hi)| format!("[{lo:.2}, {hi:.2}]"))
                .unwrap_or_else(|| "-".into());
            let imp = m
                .improvement_vs_baseline_pct
                .map(|v| format!("{v:.1}"))
                .unwrap_or_else(|| "-".into());
            let p = m.p_vs_baseline.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "{:<20} {:>10.2} {:>22} {:>12} {:>10} {:>5}\n",
                m.method.to_string(),
                m.mean_deg,
                ci,
                imp,
                p,
                m.stars
            ));
        }
        s.push_str("\n== per-video mean error (degrees) ==\n");
        let mut individuals: Vec<&str> =
            self.per_video.iter().map(|r| r.individual.as_str()).collect();
        individuals.sort();
        individuals.dedup();
        let methods: Vec<ConditionId> = self.methods.iter().map(|m| m.method).collect();
        s.push_str(&format!("{:<20}", "individual"));
        for m in &methods {
            s.push_str(&format!(" {:>18}", m.to_string()));
        }
        s.push('\n');
        for ind in individuals {
            s.push_str(&format!("{ind:<20}"));
            for m in &methods {
                let v = self
                    .per_video
                    .iter()
                    .find(|r| r.individual == ind && r.method == *m)
                    .map(|r| format!("{:.2}", r.mean_error_deg))
                    .unwrap_or_else(|| "-".into());
                s.push_str(&format!(" {v:>18}"));
            }
            s.push('\n');
        }
        if let Some(fit) = &self.fit {
            s.push_str("\n== mixed model (mean log error ~ method + (1|individual)) ==\n");
            s.push_str(&format!(
                "sigma_b^2 = {:.6}  sigma_e^2 = {:.6}  REML loglik = {:.4}\n",
                fit.sigma_b2, fit.sigma_e2, fit.log_likelihood
            ));
            for c in &fit.contrasts {
                s.push_str(&format!(
                    "{:<20} beta = {:+.4}  se = {:.4}  t({:.0}) = {:+.3}  p = {:.4} {}\n",
                    c.method.to_string(),
                    c.estimate,
                    c.std_error,
                    c.df,
                    c.t,
                    c.p,
                    significance_stars(c.p)
                ));
            }
        }
        if !self.warnings.is_empty() {
            s.push_str("\n== warnings ==\n");
            for w in &self.warnings {
                s.push_str(&format!("- {w}\n"));
            }
        }
        s.push_str("\n== notes ==\n");
        for f in &self.footnotes {
            s.push_str(&format!("- {f}\n"));
        }
        s
    }

    /// Machine-readable per-method summary.
    pub fn write_csv(&self, path: &Path) -> Result<(), StatsError> {
        let mut text = String::from(
            "method,mean_deg,ci_lo,ci_hi,n_individuals,improvement_pct,p_vs_baseline\n",
        );
        for m in &self.methods {
            let (lo, hi) = m.ci95.map(|(a, b)| (a.to_string(), b.to_string())).unwrap_or_default();
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.method,
                m.mean_deg,
                lo,
                hi,
                m.n_individuals,
                m.improvement_vs_baseline_pct.map(|v| v.to_string()).unwrap_or_default(),
                m.p_vs_baseline.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        std::fs::write(path, text).map_err(io_err(path))
    }

    /// Whether a strict run should fail (degenerate or skipped fit).
    pub fn has_degenerate_fit(&self) -> bool {
        self.fit.as_ref().map(|f| f.degenerate).unwrap_or(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetSpec};
    use crate::gaze::CentroidEstimator;
    use crate::synth::SyntheticIdentity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(ind: &str, m: ConditionId, v: f64) -> AggregateRow {
        AggregateRow {
            individual: ind.into(),
            method: m,
            mean_log_error: v,
            mean_error_deg: v.exp().to_degrees(),
            n_frames: 1,
        }
    }

    /// Independent brute-force REML log-likelihood:
    /// −½[(n−p)ln2π + ln|V| + ln|XᵀV⁻¹X| + rᵀV⁻¹r], dense linear algebra,
    /// no profiling.
    fn brute_force_loglik(rows: &[AggregateRow], sigma_b2: f64, sigma_e2: f64) -> f64 {
        let mut methods: Vec<ConditionId> = Vec::new();
        for c in ConditionId::ALL {
            if rows.iter().any(|r| r.method == c) {
                methods.push(c);
            }
        }
        let mut individuals: Vec<String> = rows.iter().map(|r| r.individual.clone()).collect();
        individuals.sort();
        individuals.dedup();
        let n = rows.len();
        let p = methods.len();
        let mut x = DMatrix::zeros(n, p);
        let mut z = DMatrix::zeros(n, individuals.len());
        let mut y = DVector::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            y[i] = r.mean_log_error;
            x[(i, 0)] = 1.0;
            let m = methods.iter().position(|&c| c == r.method).unwrap();
            if m > 0 {
                x[(i, m)] = 1.0;
            }
            let g = individuals.iter().position(|s| *s == r.individual).unwrap();
            z[(i, g)] = 1.0;
        }
        let v = DMatrix::identity(n, n) * sigma_e2 + (&z * z.transpose()) * sigma_b2;
        let v_inv = v.clone().try_inverse().unwrap();
        let xtvinvx = x.transpose() * &v_inv * &x;
        let beta = xtvinvx.clone().try_inverse().unwrap() * x.transpose() * &v_inv * &y;
        let r = &y - &x * beta;
        let quad = (r.transpose() * &v_inv * &r)[(0, 0)];
        let ln_det_v = v.determinant().ln();
        let ln_det_x = xtvinvx.determinant().ln();
        -0.5 * ((n - p) as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det_v + ln_det_x + quad)
    }

    #[test]
    fn aggregate_single_and_idempotent() {
        let recs = vec![
            ExperimentRecord::new("a", ConditionId::Dfl, 0, 0.05).unwrap(),
        ];
        let rows = aggregate_individual(&recs);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean_log_error - 0.05f64.ln()).abs() < 1e-15);

        let recs2 = vec![
            ExperimentRecord::new("a", ConditionId::Dfl, 0, 0.05).unwrap(),
            ExperimentRecord::new("a", ConditionId::Dfl, 1, 0.05).unwrap(),
        ];
        let rows2 = aggregate_individual(&recs2);
        assert!((rows2[0].mean_log_error - 0.05f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn aggregate_mean_of_logs_is_log_of_geometric_mean() {
        // Records of 1° and 4°: the mean of logs equals log(2°), which is
        // distinct from log of the arithmetic mean (2.5°).
        let one_deg = 1.0f64.to_radians();
        let four_deg = 4.0f64.to_radians();
        let recs = vec![
            ExperimentRecord::new("a", ConditionId::Dfl, 0, one_deg).unwrap(),
            ExperimentRecord::new("a", ConditionId::Dfl, 1, four_deg).unwrap(),
        ];
        let rows = aggregate_individual(&recs);
        let expected = 2.0f64.to_radians().ln();
        assert!((rows[0].mean_log_error - expected).abs() < 1e-12);
        let wrong = 2.5f64.to_radians().ln();
        assert!((rows[0].mean_log_error - wrong).abs() > 0.1);
    }

    #[test]
    fn aggregate_order_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut recs = Vec::new();
        for ind in ["a", "b"] {
            for m in [ConditionId::Dfl, ConditionId::DflGaze] {
                for f in 0..10u32 {
                    recs.push(
                        ExperimentRecord::new(ind, m, f, rng.gen_range(0.01..0.5)).unwrap(),
                    );
                }
            }
        }
        let rows1 = aggregate_individual(&recs);
        let mut shuffled = recs.clone();
        // Deterministic shuffle.
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let rows2 = aggregate_individual(&shuffled);
        assert_eq!(rows1, rows2);
    }

    #[test]
    fn zero_error_is_floored_before_log() {
        let recs = vec![ExperimentRecord::new("a", ConditionId::Dfl, 0, 0.0).unwrap()];
        let rows = aggregate_individual(&recs);
        assert!((rows[0].mean_log_error - LOG_FLOOR_RAD.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_values_give_zero_coefficients_and_degenerate_flag() {
        let mut rows = Vec::new();
        for (ind, base) in [("a", -3.0), ("b", -2.5), ("c", -2.0)] {
            for m in [ConditionId::Dfl, ConditionId::DflEm] {
                rows.push(row(ind, m, base));
            }
        }
        let fit = fit_mixed_effects(&rows).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.sigma_e2, 0.0);
        for c in &fit.coefficients {
            assert!(c.abs() < 1e-9, "coefficient {c}");
        }
    }

    #[test]
    fn balanced_paired_design_recovers_delta_exactly() {
        // method B = method A + delta for every individual.
        let delta = 0.37;
        let mut rows = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ind in ["a", "b", "c", "d", "e"] {
            let base: f64 = rng.gen_range(-4.0..-2.0);
            rows.push(row(ind, ConditionId::Dfl, base));
            rows.push(row(ind, ConditionId::DflGaze, base + delta));
        }
        let fit = fit_mixed_effects(&rows).unwrap();
        assert!(
            (fit.coefficients[0] - delta).abs() < 1e-9,
            "estimated {} vs {delta}",
            fit.coefficients[0]
        );
    }

    #[test]
    fn singular_design_is_reported() {
        // Two method labels but one of them never varies against the
        // intercept: method present in every row.
        let rows = vec![
            row("a", ConditionId::Dfl, -3.0),
            row("b", ConditionId::Dfl, -2.0),
        ];
        assert!(matches!(fit_mixed_effects(&rows), Err(StatsError::TooFewMethods(1))));
    }

    #[test]
    fn reml_dominates_brute_force_grid() {
        // Five small synthetic datasets; the fitted log-likelihood must be
        // at least the best value on a 100x100 variance grid.
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sb: f64 = rng.gen_range(0.05..0.6);
            let se: f64 = rng.gen_range(0.05..0.6);
            let mut rows = Vec::new();
            let inds = ["a", "b", "c", "d", "e", "f"];
            let methods = [ConditionId::Dfl, ConditionId::DflEm, ConditionId::DflGaze];
            for ind in inds {
                let b: f64 = rng.gen_range(-1.0..1.0) * sb.sqrt();
                for (k, m) in methods.iter().enumerate() {
                    let noise: f64 = rng.gen_range(-1.0..1.0) * se.sqrt();
                    rows.push(row(ind, *m, -3.0 + 0.2 * k as f64 + b + noise));
                }
            }
            let fit = fit_mixed_effects(&rows).unwrap();
            assert!(!fit.degenerate);
            let mut grid_best = f64::NEG_INFINITY;
            for i in 0..100 {
                for j in 0..100 {
                    let sb2 = 1e-4 + (i as f64) * 0.01;
                    let se2 = 1e-4 + (j as f64) * 0.01;
                    grid_best = grid_best.max(brute_force_loglik(&rows, sb2, se2));
                }
            }
            assert!(
                fit.log_likelihood >= grid_best - 1e-3,
                "seed {seed}: fit {} vs grid {grid_best}",
                fit.log_likelihood
            );
        }
    }

    #[test]
    fn parameter_recovery_within_monte_carlo_error() {
        // Generate from known (beta, sigma_b2, sigma_e2); the mean of the
        // estimates over 200 replications stays within 3 MC standard errors.
        let true_delta = 0.4;
        let true_sb2: f64 = 0.25;
        let true_se2: f64 = 0.09;
        let inds = 8;
        let methods = [ConditionId::Dfl, ConditionId::DflEm, ConditionId::DflGaze];
        let mut deltas = Vec::new();
        let mut sb2s = Vec::new();
        let mut se2s = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let mut rows = Vec::new();
            for ind in 0..inds {
                let b = rng.sample::<f64, _>(rand_distr::StandardNormal) * true_sb2.sqrt();
                for (k, m) in methods.iter().enumerate() {
                    let e = rng.sample::<f64, _>(rand_distr::StandardNormal) * true_se2.sqrt();
                    let fixed = if k == 1 { true_delta } else { 0.1 * k as f64 };
                    rows.push(row(&format!("i{ind}"), *m, -3.0 + fixed + b + e));
                }
            }
            let fit = fit_mixed_effects(&rows).unwrap();
            deltas.push(fit.coefficients[0]);
            sb2s.push(fit.sigma_b2);
            se2s.push(fit.sigma_e2);
        }
        let check = |name: &str, est: &[f64], truth: f64| {
            let n = est.len() as f64;
            let mean = est.iter().sum::<f64>() / n;
            let sd =
                (est.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            let se = sd / n.sqrt();
            assert!(
                (mean - truth).abs() < 3.0 * se,
                "{name}: mean {mean} vs truth {truth} (3 SE = {})",
                3.0 * se
            );
        };
        check("delta", &deltas, true_delta);
        check("sigma_b2", &sb2s, true_sb2);
        check("sigma_e2", &se2s, true_se2);
    }

    #[test]
    fn percent_improvement_cases() {
        assert_eq!(percent_improvement(5.0, 5.0).unwrap(), 0.0);
        assert!((percent_improvement(10.0, 8.0).unwrap() - 20.0).abs() < 1e-12);
        let v = percent_improvement(5.98, 4.71).unwrap();
        assert!((v - 21.237458193979935).abs() < 1e-9);
        assert_eq!(format!("{v:.1}"), "21.2");
        assert!(matches!(
            percent_improvement(0.0, 1.0),
            Err(StatsError::NonPositiveBaseline(_))
        ));
    }

    #[test]
    fn percent_improvement_antisymmetry() {
        // pi(a, b) = −pi(a, 2a−b) when b ≤ a.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(0.5..10.0);
            let b: f64 = rng.gen_range(0.0..a);
            let lhs = percent_improvement(a, b).unwrap();
            let rhs = -percent_improvement(a, 2.0 * a - b).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn summarize_textbook_t_interval() {
        // One method per three individuals at 4°, 6°, 8°: mean 6 and a
        // t(2)-based interval 6 ± 4.302652729911·(2/√3).
        let mut recs = Vec::new();
        for (ind, deg) in [("a", 4.0f64), ("b", 6.0), ("c", 8.0)] {
            recs.push(
                ExperimentRecord::new(ind, ConditionId::Dfl, 0, deg.to_radians()).unwrap(),
            );
            recs.push(
                ExperimentRecord::new(ind, ConditionId::DflEm, 0, (deg * 0.9).to_radians())
                    .unwrap(),
            );
        }
        let report = summarize(&recs).unwrap();
        let dfl = &report.methods[0];
        assert!((dfl.mean_deg - 6.0).abs() < 1e-9);
        let (lo, hi) = dfl.ci95.unwrap();
        let half = 4.302652729911275 * 2.0 / 3.0f64.sqrt();
        assert!((lo - (6.0 - half)).abs() < 1e-6, "lo {lo}");
        assert!((hi - (6.0 + half)).abs() < 1e-6, "hi {hi}");
    }

    #[test]
    fn summarize_single_individual_warns_and_omits_ci() {
        let recs = vec![
            ExperimentRecord::new("a", ConditionId::Dfl, 0, 0.1).unwrap(),
            ExperimentRecord::new("a", ConditionId::DflEm, 0, 0.08).unwrap(),
        ];
        let report = summarize(&recs).unwrap();
        assert!(report.methods.iter().all(|m| m.ci95.is_none()));
        assert!(report.warnings.iter().any(|w| w.contains("confidence interval omitted")));
    }

    #[test]
    fn summarize_five_method_table_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut recs = Vec::new();
        for ind in ["a", "b", "c"] {
            for m in ConditionId::ALL {
                for f in 0..4u32 {
                    recs.push(
                        ExperimentRecord::new(ind, m, f, rng.gen_range(0.02..0.3)).unwrap(),
                    );
                }
            }
        }
        let report = summarize(&recs).unwrap();
        assert_eq!(report.methods.len(), 5);
        assert_eq!(report.per_video.len(), 15);
        let text = report.to_text();
        assert!(text.contains("21.2%"), "rounding footnote present");
        assert!(text.contains("19.7%"), "rounding footnote names the discrepancy");
    }

    #[test]
    fn degrees_radians_round_trip_in_reports() {
        let rad = 0.123f64;
        let recs = vec![ExperimentRecord::new("a", ConditionId::Dfl, 0, rad).unwrap()];
        let rows = aggregate_individual(&recs);
        assert!((rows[0].mean_error_deg.to_radians() - rad).abs() < 1e-12);
    }

    #[test]
    fn records_csv_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let recs = vec![
            ExperimentRecord::new("a", ConditionId::Dfl, 0, 0.1).unwrap(),
            ExperimentRecord::new("b", ConditionId::DflEmGaze, 3, 0.25).unwrap(),
        ];
        write_records_csv(&path, &recs).unwrap();
        let back = read_records_csv(&path).unwrap();
        assert_eq!(back, recs);

        std::fs::write(&path, "individual,method,frame_index,error_rad\na,dfl,0,notanumber\n")
            .unwrap();
        assert!(matches!(read_records_csv(&path), Err(StatsError::BadRecord { .. })));
    }

    #[test]
    fn identity_swap_errors_are_tiny_and_corruption_drops_frames() {
        // Swap frames identical to source: every error below estimator
        // self-consistency noise with true-gaze ground truth.
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ids: Vec<SyntheticIdentity> =
            (0..2).map(|_| SyntheticIdentity::sample(&mut rng, 64)).collect();
        let spec = DatasetSpec { frames_per_identity: 12, seed: 31, ..Default::default() };
        generate_dataset(dir.path(), &ids, &spec).unwrap();
        // "Swaps" are byte copies of the source frames.
        let swaps = dir.path().join("swaps");
        std::fs::create_dir_all(&swaps).unwrap();
        for i in 0..12 {
            std::fs::copy(
                dir.path().join(format!("id00/frames/{i:04}.png")),
                swaps.join(format!("{i:04}.png")),
            )
            .unwrap();
        }
        let out = frame_errors(
            &swaps,
            dir.path(),
            "id00",
            &CentroidEstimator,
            GroundTruth::TrueGaze,
            ConditionId::Dfl,
            "id00",
        )
        .unwrap();
        assert_eq!(out.dropped, 0);
        assert_eq!(out.records.len(), 12);
        for r in &out.records {
            assert!(r.error_rad < 0.01, "frame {} error {}", r.frame_index, r.error_rad);
        }

        // Corrupt one swap frame: it is dropped and counted.
        std::fs::write(swaps.join("0005.png"), b"not a png").unwrap();
        let out = frame_errors(
            &swaps,
            dir.path(),
            "id00",
            &CentroidEstimator,
            GroundTruth::TrueGaze,
            ConditionId::Dfl,
            "id00",
        )
        .unwrap();
        assert_eq!(out.dropped, 1);
        assert_eq!(out.records.len(), 11);
    }

    #[test]
    fn frame_errors_known_gaze_offset() {
        // A swap whose gaze differs from the reference by a known angle:
        // render the same identity with two gazes and cross-evaluate.
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ids: Vec<SyntheticIdentity> =
            (0..2).map(|_| SyntheticIdentity::sample(&mut rng, 64)).collect();
        let spec = DatasetSpec {
            frames_per_identity: 1,
            seed: 77,
            head_offset_max: 0.0,
            gaze: crate::dataset::GazeSamplerSpec {
                pitch_min: 0.0,
                pitch_max: 0.0,
                yaw_min: std::f64::consts::FRAC_PI_2,
                yaw_max: std::f64::consts::FRAC_PI_2,
            },
            ..Default::default()
        };
        generate_dataset(dir.path(), &ids, &spec).unwrap();
        // Swap frame: same identity, gaze rotated by 0.3 rad in yaw.
        let rotated = crate::synth::render_face(
            &ids[0],
            GazeAngles::new(0.0, std::f64::consts::FRAC_PI_2 + 0.3).unwrap(),
            (0.0, 0.0),
            99,
            64,
        )
        .unwrap();
        let swaps = dir.path().join("swaps");
        std::fs::create_dir_all(&swaps).unwrap();
        rotated.image.save_png(&swaps.join("0000.png")).unwrap();
        let out = frame_errors(
            &swaps,
            dir.path(),
            "id00",
            &CentroidEstimator,
            GroundTruth::TrueGaze,
            ConditionId::DflGaze,
            "pair0",
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(
            (out.records[0].error_rad - 0.3).abs() < 0.02,
            "measured {}",
            out.records[0].error_rad
        );
    }
}
