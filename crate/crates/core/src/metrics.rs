//! Run statistics and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{DsdError, Result};
use crate::netsim::{RoundTrace, SimReport};
use crate::verifier::VerificationResult;

pub const TRACE_HEADER: &str =
    "run_id,round_index,gamma,tau,n_nodes,t0_ms,t1_ms,k_accepted,key_count,compute_ms,comm_ms,total_ms,sync_rounds";

pub const SUMMARY_HEADER: &str = "run_id,rho,avg_accepted_len,total_tokens,sync_rounds,tokens_per_ms,key_token_fraction,analytic_speedup,measured_speedup";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunStats {
    /// mean(k) / (gamma + 1); 0 when nothing was accepted.
    pub rho: f64,
    /// mean(k) + 1, counting the extra token.
    pub avg_accepted_len: f64,
    pub total_tokens: usize,
    pub sync_rounds: usize,
    pub tokens_per_ms: Option<f64>,
    pub key_token_fraction: f64,
}

pub fn compute_stats(
    results: &[VerificationResult],
    gamma: usize,
    report: Option<&SimReport>,
) -> Result<RunStats> {
    if results.is_empty() {
        return Err(crate::error::invalid_param("results", "must be nonempty"));
    }
    let n = results.len() as f64;
    let mean_k = results.iter().map(|r| r.accepted_count as f64).sum::<f64>() / n;
    let decisions: usize = results.iter().map(|r| r.decisions.len()).sum();
    let keys: usize = results.iter().map(|r| r.key_count()).sum();
    Ok(RunStats {
        rho: mean_k / (gamma as f64 + 1.0),
        avg_accepted_len: mean_k + 1.0,
        total_tokens: results.iter().map(|r| r.tokens_committed()).sum(),
        sync_rounds: results.len(),
        tokens_per_ms: report.map(|r| r.total_tokens as f64 / r.total_time),
        key_token_fraction: if decisions == 0 {
            0.0
        } else {
            keys as f64 / decisions as f64
        },
    })
}

/// Formats `x` with 6 significant digits, like C's `%g`.
pub fn fmt_sig(x: f64) -> String {
    const PRECISION: i32 = 6;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // Round to the target precision first; the exponent can shift (9.999995 -> 1e+01).
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..PRECISION).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}"))
    }
}

fn strip_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// One trace CSV row: a verification round joined with its simulated timing.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub run_id: String,
    pub round_index: usize,
    pub gamma: usize,
    pub tau: f64,
    pub n_nodes: usize,
    pub t0_ms: f64,
    pub t1_ms: f64,
    pub k_accepted: usize,
    pub key_count: usize,
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub total_ms: f64,
    pub sync_rounds: usize,
}

impl TraceRow {
    #[allow(clippy::too_many_arguments)]
    pub fn from_round(
        run_id: &str,
        gamma: usize,
        tau: f64,
        n_nodes: usize,
        t0_ms: f64,
        t1_ms: f64,
        result: &VerificationResult,
        trace: &RoundTrace,
    ) -> Self {
        Self {
            run_id: run_id.to_string(),
            round_index: trace.round_index,
            gamma,
            tau,
            n_nodes,
            t0_ms,
            t1_ms,
            k_accepted: result.accepted_count,
            key_count: result.key_count(),
            compute_ms: trace.compute_time,
            comm_ms: trace.comm_time,
            total_ms: trace.total_time,
            sync_rounds: trace.sync_rounds,
        }
    }

    fn write_line(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.round_index,
            self.gamma,
            fmt_sig(self.tau),
            self.n_nodes,
            fmt_sig(self.t0_ms),
            fmt_sig(self.t1_ms),
            self.k_accepted,
            self.key_count,
            fmt_sig(self.compute_ms),
            fmt_sig(self.comm_ms),
            fmt_sig(self.total_ms),
            self.sync_rounds
        );
    }
}

/// One summary CSV row. Integer columns are stored as reals so that
/// aggregate (mean) rows share the type.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub rho: f64,
    pub avg_accepted_len: f64,
    pub total_tokens: f64,
    pub sync_rounds: f64,
    pub tokens_per_ms: f64,
    pub key_token_fraction: f64,
    pub analytic_speedup: f64,
    pub measured_speedup: f64,
}

impl SummaryRow {
    pub fn new(
        run_id: &str,
        stats: &RunStats,
        analytic_speedup: f64,
        measured_speedup: f64,
    ) -> Self {
        Self {
            run_id: run_id.to_string(),
            rho: stats.rho,
            avg_accepted_len: stats.avg_accepted_len,
            total_tokens: stats.total_tokens as f64,
            sync_rounds: stats.sync_rounds as f64,
            tokens_per_ms: stats.tokens_per_ms.unwrap_or(f64::NAN),
            key_token_fraction: stats.key_token_fraction,
            analytic_speedup,
            measured_speedup,
        }
    }

    fn columns(&self) -> [f64; 8] {
        [
            self.rho,
            self.avg_accepted_len,
            self.total_tokens,
            self.sync_rounds,
            self.tokens_per_ms,
            self.key_token_fraction,
            self.analytic_speedup,
            self.measured_speedup,
        ]
    }

    fn from_columns(run_id: String, c: [f64; 8]) -> Self {
        Self {
            run_id,
            rho: c[0],
            avg_accepted_len: c[1],
            total_tokens: c[2],
            sync_rounds: c[3],
            tokens_per_ms: c[4],
            key_token_fraction: c[5],
            analytic_speedup: c[6],
            measured_speedup: c[7],
        }
    }

    /// Column-wise arithmetic mean.
    pub fn mean(run_id: &str, rows: &[SummaryRow]) -> Self {
        let n = rows.len() as f64;
        let mut acc = [0.0; 8];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.columns()) {
                *a += v;
            }
        }
        Self::from_columns(run_id.to_string(), acc.map(|a| a / n))
    }

    /// Column-wise population variance.
    pub fn variance(run_id: &str, rows: &[SummaryRow]) -> Self {
        let n = rows.len() as f64;
        let mean = Self::mean("", rows).columns();
        let mut acc = [0.0; 8];
        for r in rows {
            for ((a, v), m) in acc.iter_mut().zip(r.columns()).zip(mean) {
                *a += (v - m) * (v - m);
            }
        }
        Self::from_columns(run_id.to_string(), acc.map(|a| a / n))
    }

    fn write_line(&self, out: &mut String) {
        let cols: Vec<String> = self.columns().iter().map(|&v| fmt_sig(v)).collect();
        let _ = writeln!(out, "{},{}", self.run_id, cols.join(","));
    }
}

/// Renders trace rows sorted by `(round_index, run_id)`.
pub fn render_traces(rows: &[TraceRow]) -> String {
    let mut sorted: Vec<&TraceRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.round_index
            .cmp(&b.round_index)
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in sorted {
        r.write_line(&mut out);
    }
    out
}

/// Renders summary rows in the given order.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        r.write_line(&mut out);
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| DsdError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn emit_traces(rows: &[TraceRow], path: &Path) -> Result<()> {
    write_file(path, &render_traces(rows))
}

pub fn emit_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    write_file(path, &render_summary(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::{ExtraSource, TokenDecision};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn round(k: usize, gamma: usize, keys: usize) -> VerificationResult {
        let mut decisions: Vec<TokenDecision> = (0..k)
            .map(|i| TokenDecision {
                token: 0,
                is_key: i < keys,
                tau_used: 0.0,
                accept_prob: 1.0,
                accepted: true,
                replacement: None,
            })
            .collect();
        if k < gamma {
            decisions.push(TokenDecision {
                token: 1,
                is_key: false,
                tau_used: 0.2,
                accept_prob: 0.3,
                accepted: false,
                replacement: Some(0),
            });
        }
        VerificationResult {
            decisions,
            accepted_count: k,
            extra_token: 0,
            extra_source: if k < gamma {
                ExtraSource::ResidualResample
            } else {
                ExtraSource::BonusFromTarget
            },
        }
    }

    #[test]
    fn full_acceptance_stats() {
        let rs: Vec<_> = (0..5).map(|_| round(8, 8, 0)).collect();
        let s = compute_stats(&rs, 8, None).unwrap();
        assert_abs_diff_eq!(s.rho, 8.0 / 9.0, epsilon = 1e-15);
        assert_eq!(s.avg_accepted_len, 9.0);
        assert_eq!(s.tokens_per_ms, None);
    }

    #[test]
    fn full_rejection_stats() {
        let rs: Vec<_> = (0..3).map(|_| round(0, 4, 0)).collect();
        let s = compute_stats(&rs, 4, None).unwrap();
        assert_eq!(s.rho, 0.0);
        assert_eq!(s.avg_accepted_len, 1.0);
        assert_eq!(s.total_tokens, 3);
    }

    #[test]
    fn mixed_stats_by_hand() {
        let rs = vec![round(2, 8, 1), round(4, 8, 0), round(3, 8, 2)];
        let s = compute_stats(&rs, 8, None).unwrap();
        assert_abs_diff_eq!(s.rho, 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(s.avg_accepted_len, 4.0);
        // 3 keys over 3 + 5 + 4 evaluated positions.
        assert_abs_diff_eq!(s.key_token_fraction, 3.0 / 12.0, epsilon = 1e-15);
        assert!(compute_stats(&[], 8, None).is_err());
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(64.0), "64");
        assert_eq!(fmt_sig(0.703125), "0.703125");
        assert_eq!(fmt_sig(16.0 / 5.75), "2.78261");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig(0.2), "0.2");
        assert_eq!(fmt_sig(1e-7), "1e-07");
        assert_eq!(fmt_sig(0.0001), "0.0001");
        assert_eq!(fmt_sig(123456.0), "123456");
        assert_eq!(fmt_sig(1234567.0), "1.23457e+06");
        assert_eq!(fmt_sig(9.9999996), "10");
        assert_eq!(fmt_sig(-2.5), "-2.5");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(f64::NAN), "nan");
    }

    #[test]
    fn empty_trace_is_header_only() {
        let s = render_traces(&[]);
        assert_eq!(s, format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn single_trace_is_two_lines() {
        let r = round(3, 4, 1);
        let t = RoundTrace {
            round_index: 0,
            tokens_committed: 4,
            compute_time: 4.0,
            comm_time: 15.0,
            total_time: 19.0,
            sync_rounds: 1,
        };
        let row = TraceRow::from_round("seed=1", 4, 0.2, 4, 1.0, 5.0, &r, &t);
        let s = render_traces(&[row]);
        assert_eq!(s.lines().count(), 2);
        assert_eq!(
            s.lines().nth(1).unwrap(),
            "seed=1,0,4,0.2,4,1,5,3,1,4,15,19,1"
        );
        assert!(s.ends_with('\n') && !s.contains('\r'));
    }

    #[test]
    fn trace_rows_sorted_by_round_then_run() {
        let r = round(1, 2, 0);
        let mk = |id: &str, idx: usize| {
            let t = RoundTrace {
                round_index: idx,
                tokens_committed: 2,
                compute_time: 2.0,
                comm_time: 1.0,
                total_time: 3.0,
                sync_rounds: 1,
            };
            TraceRow::from_round(id, 2, 0.0, 2, 1.0, 1.0, &r, &t)
        };
        let s = render_traces(&[mk("b", 1), mk("b", 0), mk("a", 1), mk("a", 0)]);
        let ids: Vec<&str> = s.lines().skip(1).map(|l| &l[..3]).collect();
        assert_eq!(ids, vec!["a,0", "b,0", "a,1", "b,1"]);
    }

    #[test]
    fn summary_mean_and_variance() {
        let a = SummaryRow::from_columns("a".into(), [0.2, 2.0, 10.0, 5.0, 1.0, 0.1, 2.0, 2.0]);
        let b = SummaryRow::from_columns("b".into(), [0.4, 4.0, 10.0, 3.0, 3.0, 0.3, 2.0, 4.0]);
        let m = SummaryRow::mean("m", &[a.clone(), b.clone()]);
        assert_abs_diff_eq!(m.rho, 0.3, epsilon = 1e-15);
        assert_eq!(m.sync_rounds, 4.0);
        let v = SummaryRow::variance("v", &[a, b]);
        assert_abs_diff_eq!(v.avg_accepted_len, 1.0, epsilon = 1e-15);
        assert_eq!(v.total_tokens, 0.0);
        let text = render_summary(&[m]);
        assert_eq!(text.lines().next().unwrap(), SUMMARY_HEADER);
        assert_eq!(text.lines().nth(1).unwrap(), "m,0.3,3,10,4,2,0.2,2,3");
    }

    #[test]
    fn write_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("x.csv");
        let err = emit_summary(&[], &path).unwrap_err();
        assert!(err.to_string().contains("x.csv"));
    }

    proptest! {
        #[test]
        fn avg_len_and_rho_agree(ks in prop::collection::vec(0usize..=8, 1..40)) {
            let rs: Vec<_> = ks.iter().map(|&k| round(k, 8, 0)).collect();
            let s = compute_stats(&rs, 8, None).unwrap();
            prop_assert!((s.avg_accepted_len - 1.0 - s.rho * 9.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&s.rho));
            prop_assert!((1.0..=9.0).contains(&s.avg_accepted_len));
        }

        #[test]
        fn sig_format_round_trips(x in -1e9f64..1e9) {
            let parsed: f64 = fmt_sig(x).parse().unwrap();
            let tol = x.abs() * 5e-6 + 1e-300;
            prop_assert!((parsed - x).abs() <= tol);
        }
    }
}
