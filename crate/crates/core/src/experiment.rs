//! Seeded experiment runs: generation, pipeline simulation, statistics, CSV.
//!
//! Each seed owns three independent streams: decoding, the windowed
//! simulation and the standard-decoding simulation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::calibrate::{calibrate_thresholds, CalibrationResult};
use crate::config::{ExperimentConfig, SweepParameter};
use crate::enumerate::{enumerate_output_distribution, sequence_tv, target_sequence_distribution};
use crate::error::{invalid_param, Result};
use crate::latency::{in_regime, r_comm, speedup, t_dsd, t_std, ClusterConfig, SpeedModelInput};
use crate::metrics::{
    compute_stats, fmt_sig, render_summary, render_traces, write_file, RunStats, SummaryRow,
    TraceRow,
};
use crate::netsim::{measured_speedup, simulate_dsd, simulate_standard, SimReport};
use crate::rng::seeded;
use crate::token_model::{Context, TokenModel};
use crate::verifier::generate;

pub const TRACES_FILE: &str = "traces.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const VARIANCE_FILE: &str = "summary_variance.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const CALIBRATION_GRID_FILE: &str = "calibration_grid.csv";
pub const ANALYTIC_FILE: &str = "analytic.csv";

/// Largest total variation accepted as lossless.
pub const LOSSLESS_TOL: f64 = 1e-9;

const DECODE_STREAM: u64 = 0;
const DSD_SIM_STREAM: u64 = 1;
const STD_SIM_STREAM: u64 = 2;

/// Everything produced by one (config, seed) point.
#[derive(Debug, Clone)]
pub struct PointOutput {
    pub run_id: String,
    pub stats: RunStats,
    pub dsd: SimReport,
    pub standard: SimReport,
    pub traces: Vec<TraceRow>,
    pub summary: SummaryRow,
}

pub fn run_point(cfg: &ExperimentConfig, seed: u64, run_id: &str) -> Result<PointOutput> {
    let params = cfg.verify_params();
    let sampler = cfg.latency_sampler();
    let generation = generate(
        &cfg.draft,
        &cfg.target,
        &cfg.prompt,
        cfg.max_new,
        &params,
        &mut seeded(seed, DECODE_STREAM),
    )?;
    let dsd = simulate_dsd(
        &cfg.cluster,
        &generation.rounds,
        &sampler,
        &mut seeded(seed, DSD_SIM_STREAM),
    )?;
    let standard = simulate_standard(
        &cfg.cluster,
        dsd.total_tokens,
        &sampler,
        &mut seeded(seed, STD_SIM_STREAM),
    )?;
    let stats = compute_stats(&generation.rounds, cfg.gamma, Some(&dsd))?;
    let analytic = speedup(
        &SpeedModelInput::from_mean_k(stats.avg_accepted_len, cfg.gamma),
        &cfg.cluster,
    );
    let measured = measured_speedup(&standard, &dsd)?;
    let traces = generation
        .rounds
        .iter()
        .zip(&dsd.traces)
        .map(|(r, t)| {
            TraceRow::from_round(
                run_id,
                cfg.gamma,
                cfg.tau,
                cfg.cluster.n_nodes,
                cfg.cluster.t0_ms,
                cfg.cluster.t1_ms,
                r,
                t,
            )
        })
        .collect();
    Ok(PointOutput {
        run_id: run_id.to_string(),
        summary: SummaryRow::new(run_id, &stats, analytic, measured),
        stats,
        dsd,
        standard,
        traces,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub points: Vec<PointOutput>,
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(invalid_param("workers", "must be >= 1"));
        }
        b = b.num_threads(w);
    }
    b.build()
        .map_err(|e| invalid_param("workers", e.to_string()))
}

/// One generation per seed; writes `traces.csv` and `summary.csv` into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<RunOutput> {
    cfg.validate()?;
    let pool = thread_pool(workers)?;
    let points = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_point(cfg, seed, &format!("seed={seed}")))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary: Vec<SummaryRow> = points.iter().map(|p| p.summary.clone()).collect();
    let traces: Vec<TraceRow> = points
        .iter()
        .flat_map(|p| p.traces.iter().cloned())
        .collect();
    let files = vec![out.join(TRACES_FILE), out.join(SUMMARY_FILE)];
    write_file(&files[0], &render_traces(&traces))?;
    write_file(&files[1], &render_summary(&summary))?;
    Ok(RunOutput {
        points,
        summary,
        files,
    })
}

fn sweep_label(parameter: SweepParameter, value: f64) -> String {
    format!("{}={}", parameter.name(), fmt_sig(value))
}

/// Cartesian product of sweep values and seeds. Summary rows are grouped by
/// value: one row per seed, then a `/mean` aggregate. Population variances
/// go to `summary_variance.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<RunOutput> {
    cfg.validate()?;
    let Some(spec) = &cfg.sweep else {
        return Err(invalid_param("sweep", "the config has no sweep section"));
    };
    let mut jobs = Vec::new();
    for &value in &spec.values {
        let point_cfg = cfg.with_sweep_value(spec.parameter, value)?;
        for &seed in &cfg.seeds {
            let id = format!("{}/seed={seed}", sweep_label(spec.parameter, value));
            jobs.push((point_cfg.clone(), seed, id));
        }
    }
    let pool = thread_pool(workers)?;
    let points = pool.install(|| {
        jobs.par_iter()
            .map(|(c, seed, id)| run_point(c, *seed, id))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut summary = Vec::new();
    let mut variance = Vec::new();
    for (value, group) in spec.values.iter().zip(points.chunks(cfg.seeds.len())) {
        let rows: Vec<SummaryRow> = group.iter().map(|p| p.summary.clone()).collect();
        let label = sweep_label(spec.parameter, *value);
        summary.extend(rows.iter().cloned());
        summary.push(SummaryRow::mean(&format!("{label}/mean"), &rows));
        variance.push(SummaryRow::variance(&format!("{label}/var"), &rows));
    }
    let traces: Vec<TraceRow> = points
        .iter()
        .flat_map(|p| p.traces.iter().cloned())
        .collect();
    let files = vec![
        out.join(TRACES_FILE),
        out.join(SUMMARY_FILE),
        out.join(VARIANCE_FILE),
    ];
    write_file(&files[0], &render_traces(&traces))?;
    write_file(&files[1], &render_summary(&summary))?;
    write_file(&files[2], &render_summary(&variance))?;
    Ok(RunOutput {
        points,
        summary,
        files,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosslessInstance {
    pub label: String,
    pub total_variation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosslessReport {
    pub instances: Vec<LosslessInstance>,
    pub max_tv: f64,
    /// Whether verification ran with `tau = 0`.
    pub strict: bool,
}

impl LosslessReport {
    pub fn is_lossless(&self) -> bool {
        self.max_tv <= LOSSLESS_TOL
    }
}

fn lossless_tv(
    draft: &TokenModel,
    target: &TokenModel,
    prompt: &Context,
    horizon: usize,
    cfg: &ExperimentConfig,
    gamma: usize,
) -> Result<f64> {
    let params = crate::verifier::VerifyParams {
        gamma,
        ..cfg.verify_params()
    };
    let got = enumerate_output_distribution(draft, target, prompt, horizon, &params)?;
    let want = target_sequence_distribution(target, prompt, horizon)?;
    Ok(sequence_tv(&got, &want))
}

/// Compares the exact output distribution of the configured verifier with
/// the target model's own distribution, for the main model pair and every
/// calibration item.
pub fn verify_lossless(cfg: &ExperimentConfig) -> Result<LosslessReport> {
    cfg.validate()?;
    let mut instances = vec![LosslessInstance {
        label: "main".into(),
        total_variation: lossless_tv(
            &cfg.draft,
            &cfg.target,
            &cfg.prompt,
            cfg.horizon,
            cfg,
            cfg.gamma,
        )?,
    }];
    if let Some(cal) = &cfg.calibration {
        for (i, item) in cal.items.items.iter().enumerate() {
            instances.push(LosslessInstance {
                label: format!("calibration[{i}]"),
                total_variation: lossless_tv(
                    &item.draft,
                    &item.target,
                    &item.prompt,
                    item.horizon,
                    cfg,
                    cal.gamma,
                )?,
            });
        }
    }
    let max_tv = instances
        .iter()
        .map(|i| i.total_variation)
        .fold(0.0, f64::max);
    Ok(LosslessReport {
        instances,
        max_tv,
        strict: cfg.tau == 0.0,
    })
}

/// Calibrates the thresholds on the config's validation set at the config's
/// `tau` and writes the chosen point and the full grid.
pub fn calibrate(cfg: &ExperimentConfig, out: &Path) -> Result<CalibrationResult> {
    cfg.validate()?;
    let Some(cal) = &cfg.calibration else {
        return Err(invalid_param(
            "calibration",
            "the config has no calibration section",
        ));
    };
    let result = calibrate_thresholds(&cal.items, cal.gamma, cfg.tau, cal.budget, &cal.grid)?;
    write_file(
        &out.join(CALIBRATION_FILE),
        &render_calibration(&result, cal.budget),
    )?;
    write_file(
        &out.join(CALIBRATION_GRID_FILE),
        &render_calibration_grid(&result),
    )?;
    Ok(result)
}

fn render_calibration(r: &CalibrationResult, budget: f64) -> String {
    let mut s =
        String::from("lambda1,lambda2,lambda3,top_m,avg_accepted_length,divergence,budget\n");
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{}",
        fmt_sig(r.criteria.lambda1),
        fmt_sig(r.criteria.lambda2),
        fmt_sig(r.criteria.lambda3),
        r.criteria.top_m,
        fmt_sig(r.avg_accepted_length),
        fmt_sig(r.divergence),
        fmt_sig(budget)
    );
    s
}

fn render_calibration_grid(r: &CalibrationResult) -> String {
    let mut s =
        String::from("lambda1,lambda2,lambda3,top_m,avg_accepted_length,divergence,selected\n");
    for p in &r.grid_log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_sig(p.criteria.lambda1),
            fmt_sig(p.criteria.lambda2),
            fmt_sig(p.criteria.lambda3),
            p.criteria.top_m,
            fmt_sig(p.avg_accepted_length),
            fmt_sig(p.divergence),
            u8::from(p.criteria == r.criteria)
        );
    }
    s
}

/// Grid of closed-form latency queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticQuery {
    pub n_nodes: Vec<usize>,
    pub t0_ms: Vec<f64>,
    pub t1_ms: Vec<f64>,
    pub k: Vec<f64>,
    /// Explicit acceptance ratios; when empty, `rho = k / (gamma + 1)`.
    pub rho: Vec<f64>,
    pub gamma: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticRow {
    pub cluster: ClusterConfig,
    pub k: f64,
    pub rho: f64,
    pub t_std: f64,
    pub t_dsd: f64,
    pub r_comm: f64,
    pub speedup: f64,
    pub in_regime: bool,
}

pub const ANALYTIC_HEADER: &str =
    "n_nodes,t0_ms,t1_ms,k,rho,t_std_ms,t_dsd_ms,r_comm,speedup,in_regime";

pub fn analytic(q: &AnalyticQuery) -> Result<Vec<AnalyticRow>> {
    if q.n_nodes.is_empty() || q.t0_ms.is_empty() || q.t1_ms.is_empty() || q.k.is_empty() {
        return Err(invalid_param(
            "analytic",
            "n_nodes, t0, t1 and k need at least one value",
        ));
    }
    if q.gamma == 0 {
        return Err(invalid_param("gamma", "must be >= 1"));
    }
    let mut rows = Vec::new();
    for &n in &q.n_nodes {
        for &t0 in &q.t0_ms {
            for &t1 in &q.t1_ms {
                let cluster = ClusterConfig::new(n, t0, t1)?;
                for &k in &q.k {
                    let rhos = if q.rho.is_empty() {
                        vec![(k / (q.gamma as f64 + 1.0)).min(1.0)]
                    } else {
                        q.rho.clone()
                    };
                    for rho in rhos {
                        let m = SpeedModelInput {
                            rho,
                            k,
                            gamma: q.gamma,
                        };
                        m.validate()?;
                        rows.push(AnalyticRow {
                            cluster,
                            k,
                            rho,
                            t_std: t_std(k, &cluster),
                            t_dsd: t_dsd(k, &cluster),
                            r_comm: r_comm(k, &cluster),
                            speedup: speedup(&m, &cluster),
                            in_regime: in_regime(&cluster),
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn render_analytic(rows: &[AnalyticRow]) -> String {
    let mut s = String::from(ANALYTIC_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cluster.n_nodes,
            fmt_sig(r.cluster.t0_ms),
            fmt_sig(r.cluster.t1_ms),
            fmt_sig(r.k),
            fmt_sig(r.rho),
            fmt_sig(r.t_std),
            fmt_sig(r.t_dsd),
            fmt_sig(r.r_comm),
            fmt_sig(r.speedup),
            r.in_regime
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{default_config, SweepConfig};

    fn small() -> ExperimentConfig {
        let mut c = default_config();
        c.max_new = 40;
        c
    }

    #[test]
    fn run_writes_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&small(), dir.path(), Some(2)).unwrap();
        assert_eq!(out.files.len(), 2);
        let summary = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(summary.lines().count(), 4);
        for p in &out.points {
            assert_eq!(p.dsd.total_tokens, p.standard.total_tokens);
            assert_eq!(p.standard.total_sync_rounds, p.standard.total_tokens);
            assert!(p.dsd.total_tokens >= 40);
        }
    }

    #[test]
    fn sweep_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.sweep.as_mut().unwrap().values = vec![0.0, 0.2, 0.4, 0.8];
        let out = sweep(&c, dir.path(), None).unwrap();
        assert_eq!(out.points.len(), 12);
        assert_eq!(out.summary.len(), 16);
        assert_eq!(out.summary[3].run_id, "tau=0/mean");
        assert_eq!(out.summary[0].run_id, "tau=0/seed=1");
        let var = std::fs::read_to_string(dir.path().join(VARIANCE_FILE)).unwrap();
        assert_eq!(var.lines().count(), 5);
    }

    #[test]
    fn sweep_needs_section() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.sweep = None;
        assert!(sweep(&c, dir.path(), None).is_err());
    }

    #[test]
    fn lossless_identical_models_relaxed() {
        let mut c = small();
        c.gamma = 3;
        c.tau = 1.0;
        c.draft = c.target.clone();
        c.calibration = None;
        let r = verify_lossless(&c).unwrap();
        assert!(r.is_lossless(), "{}", r.max_tv);
        assert!(!r.strict);
    }

    #[test]
    fn lossless_guard_applies() {
        let c = small();
        assert!(matches!(
            verify_lossless(&c),
            Err(crate::DsdError::EnumerationTooLarge(_))
        ));
    }

    #[test]
    fn analytic_example_row() {
        let rows = analytic(&AnalyticQuery {
            n_nodes: vec![4],
            t0_ms: vec![1.0],
            t1_ms: vec![5.0],
            k: vec![1.0, 4.0],
            rho: vec![],
            gamma: 8,
        })
        .unwrap();
        assert_eq!(rows[0].r_comm, 0.0);
        let r = rows[1];
        assert_eq!(
            (r.t_std, r.t_dsd, r.r_comm, r.in_regime),
            (64.0, 19.0, 0.703125, true)
        );
        let text = render_analytic(&rows);
        assert_eq!(
            text.lines().nth(2).unwrap(),
            "4,1,5,4,0.444444,64,19,0.703125,2.66667,true"
        );
    }

    #[test]
    fn node_sweep_matches_closed_form_round_sums() {
        let mut cfg = default_config();
        cfg.max_new = 64;
        cfg.sweep = Some(SweepConfig {
            parameter: SweepParameter::NNodes,
            values: (2..=16).map(f64::from).collect(),
        });
        let dir = tempfile::tempdir().unwrap();
        let out = sweep(&cfg, dir.path(), Some(2)).unwrap();
        assert_eq!(out.points.len(), 15 * cfg.seeds.len());
        for (i, p) in out.points.iter().enumerate() {
            let n = 2 + i / cfg.seeds.len();
            let cluster = cfg
                .with_sweep_value(SweepParameter::NNodes, n as f64)
                .unwrap()
                .cluster;
            let want: f64 = p
                .dsd
                .traces
                .iter()
                .map(|t| t_dsd(t.tokens_committed as f64, &cluster))
                .sum();
            assert!(
                (p.dsd.total_time - want).abs() < 1e-9,
                "{}: {} vs {want}",
                p.run_id,
                p.dsd.total_time
            );
            assert_eq!(p.dsd.total_sync_rounds, p.dsd.traces.len());
        }
    }

    #[test]
    fn sweep_summary_is_grouped_by_value() {
        let mut cfg = default_config();
        cfg.max_new = 32;
        let dir = tempfile::tempdir().unwrap();
        let out = sweep(&cfg, dir.path(), None).unwrap();
        let ids: Vec<&str> = out.summary.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(
            &ids[..4],
            ["tau=0/seed=1", "tau=0/seed=2", "tau=0/seed=3", "tau=0/mean"]
        );
        assert_eq!(ids.len(), 5 * 4);
    }
}
