//! Closed-form timing of standard vs. windowed decoding over an N-node pipeline.
//!
//! All times are in milliseconds. `k` is the number of tokens produced per
//! synchronization round and may be fractional when it is a mean.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_nodes: usize,
    /// Local compute per decoding step.
    pub t0_ms: f64,
    /// Point-to-point link latency.
    pub t1_ms: f64,
}

impl ClusterConfig {
    pub fn new(n_nodes: usize, t0_ms: f64, t1_ms: f64) -> Result<Self> {
        let c = Self {
            n_nodes,
            t0_ms,
            t1_ms,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(invalid_param("cluster.n_nodes", "must be >= 1"));
        }
        if !(self.t0_ms > 0.0) || !self.t0_ms.is_finite() {
            return Err(invalid_param(
                "cluster.t0_ms",
                format!("{} must be > 0", self.t0_ms),
            ));
        }
        if !(self.t1_ms >= 0.0) || !self.t1_ms.is_finite() {
            return Err(invalid_param(
                "cluster.t1_ms",
                format!("{} must be >= 0", self.t1_ms),
            ));
        }
        Ok(())
    }

    /// `(N-1) * t1`: one traversal of the pipeline.
    pub fn sync_cost(&self) -> f64 {
        (self.n_nodes - 1) as f64 * self.t1_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedModelInput {
    /// Mean acceptance ratio, in (0, 1].
    pub rho: f64,
    /// Mean tokens per round, >= 1.
    pub k: f64,
    pub gamma: usize,
}

impl SpeedModelInput {
    /// `rho = k / (gamma + 1)`.
    pub fn from_mean_k(k: f64, gamma: usize) -> Self {
        Self {
            rho: k / (gamma as f64 + 1.0),
            k,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid_param("rho", format!("{} not in (0, 1]", self.rho)));
        }
        if !(self.k >= 1.0) {
            return Err(invalid_param("k", format!("{} must be >= 1", self.k)));
        }
        if self.gamma == 0 {
            return Err(invalid_param("gamma", "must be >= 1"));
        }
        Ok(())
    }
}

/// `k (t0 + (N-1) t1)`: one synchronization per token.
pub fn t_std(k: f64, c: &ClusterConfig) -> f64 {
    k * (c.t0_ms + c.sync_cost())
}

/// `k t0 + (N-1) t1`: one synchronization for the whole window.
pub fn t_dsd(k: f64, c: &ClusterConfig) -> f64 {
    k * c.t0_ms + c.sync_cost()
}

/// Fraction of standard decoding time removed by amortizing the sync.
pub fn r_comm(k: f64, c: &ClusterConfig) -> f64 {
    c.sync_cost() * (k - 1.0) / (k * (c.t0_ms + c.sync_cost()))
}

/// `(t0 + (N-1) t1) / (t0 / rho + (N-1) t1 / k)`.
pub fn speedup(m: &SpeedModelInput, c: &ClusterConfig) -> f64 {
    (c.t0_ms + c.sync_cost()) / (c.t0_ms / m.rho + c.sync_cost() / m.k)
}

/// `3 <= N <= 8` and `3 t0 < t1 < 10 t0`.
pub fn in_regime(c: &ClusterConfig) -> bool {
    (3..=8).contains(&c.n_nodes) && 3.0 * c.t0_ms < c.t1_ms && c.t1_ms < 10.0 * c.t0_ms
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(n: usize, t0: f64, t1: f64) -> ClusterConfig {
        ClusterConfig::new(n, t0, t1).unwrap()
    }

    #[test]
    fn t_std_examples() {
        assert_eq!(t_std(1.0, &c(1, 2.5, 7.0)), 2.5);
        assert_eq!(t_std(4.0, &c(4, 1.0, 5.0)), 64.0);
        assert_eq!(t_std(3.0, &c(9, 2.0, 0.0)), 6.0);
    }

    #[test]
    fn t_dsd_examples() {
        let cc = c(5, 1.5, 4.0);
        assert_eq!(t_dsd(1.0, &cc), t_std(1.0, &cc));
        assert_eq!(t_dsd(4.0, &c(4, 1.0, 5.0)), 19.0);
        assert_eq!(t_dsd(6.0, &c(1, 2.0, 9.0)), 12.0);
    }

    #[test]
    fn r_comm_examples() {
        assert_eq!(r_comm(1.0, &c(4, 1.0, 5.0)), 0.0);
        assert_eq!(r_comm(5.0, &c(1, 1.0, 5.0)), 0.0);
        assert_abs_diff_eq!(r_comm(4.0, &c(4, 1.0, 5.0)), 0.703125, epsilon = 1e-15);
        assert_abs_diff_eq!(1.0 - 19.0 / 64.0, 0.703125, epsilon = 1e-15);
    }

    #[test]
    fn speedup_examples() {
        let m = SpeedModelInput {
            rho: 1.0,
            k: 1.0,
            gamma: 1,
        };
        assert_abs_diff_eq!(speedup(&m, &c(4, 1.0, 5.0)), 1.0, epsilon = 1e-15);
        let m = SpeedModelInput {
            rho: 0.5,
            k: 4.0,
            gamma: 7,
        };
        assert_abs_diff_eq!(speedup(&m, &c(4, 1.0, 5.0)), 16.0 / 5.75, epsilon = 1e-12);
        assert_abs_diff_eq!(16.0 / 5.75, 2.782608695652174, epsilon = 1e-12);
        let m = SpeedModelInput {
            rho: 0.37,
            k: 3.0,
            gamma: 8,
        };
        assert_abs_diff_eq!(speedup(&m, &c(1, 1.0, 5.0)), 0.37, epsilon = 1e-12);
    }

    #[test]
    fn regime_examples() {
        assert!(in_regime(&c(4, 1.0, 5.0)));
        assert!(!in_regime(&c(2, 1.0, 5.0)));
        assert!(!in_regime(&c(4, 1.0, 3.0)));
        assert!(!in_regime(&c(4, 1.0, 10.0)));
        assert!(in_regime(&c(3, 1.0, 9.9)));
        assert!(in_regime(&c(8, 1.0, 3.1)));
        assert!(!in_regime(&c(9, 1.0, 5.0)));
    }

    #[test]
    fn config_validation() {
        assert!(ClusterConfig::new(0, 1.0, 1.0).is_err());
        assert!(ClusterConfig::new(2, 0.0, 1.0).is_err());
        assert!(ClusterConfig::new(2, 1.0, -1.0).is_err());
        assert!(SpeedModelInput {
            rho: 0.0,
            k: 1.0,
            gamma: 1
        }
        .validate()
        .is_err());
        assert!(SpeedModelInput {
            rho: 0.5,
            k: 0.5,
            gamma: 1
        }
        .validate()
        .is_err());
        assert_eq!(SpeedModelInput::from_mean_k(3.0, 8).rho, 1.0 / 3.0);
    }

    proptest! {
        #[test]
        fn r_comm_identity(n in 1usize..17, t0 in 0.1f64..5.0, t1 in 0.0f64..30.0, k in 1.0f64..9.0) {
            let cc = c(n, t0, t1);
            prop_assert!((r_comm(k, &cc) - (1.0 - t_dsd(k, &cc) / t_std(k, &cc))).abs() < 1e-12);
        }

        #[test]
        fn r_comm_monotone(n in 2usize..17, t0 in 0.1f64..5.0, t1 in 0.01f64..30.0,
                           k in 1.0f64..9.0, dk in 0.01f64..3.0, dt in 0.01f64..10.0) {
            let cc = c(n, t0, t1);
            prop_assert!(r_comm(k + dk, &cc) > r_comm(k, &cc));
            let k2 = k + 1.0;
            prop_assert!(r_comm(k2, &c(n, t0, t1 + dt)) > r_comm(k2, &cc));
        }

        #[test]
        fn dsd_never_slower(n in 1usize..17, t0 in 0.1f64..5.0, t1 in 0.0f64..30.0, k in 1.0f64..9.0) {
            let cc = c(n, t0, t1);
            let (s, d) = (t_std(k, &cc), t_dsd(k, &cc));
            prop_assert!(d <= s + 1e-12);
            if k > 1.0 && n > 1 && t1 > 0.0 {
                prop_assert!(d < s);
            }
        }

        #[test]
        fn full_acceptance_speedup(n in 1usize..17, t0 in 0.1f64..5.0, t1 in 0.0f64..30.0,
                                   k in 1.0f64..9.0, dk in 0.01f64..2.0) {
            let cc = c(n, t0, t1);
            let s = speedup(&SpeedModelInput { rho: 1.0, k, gamma: 8 }, &cc);
            prop_assert!((s - t_std(1.0, &cc) / (t0 + cc.sync_cost() / k)).abs() < 1e-9);
            prop_assert!(s >= 1.0 - 1e-12);
            let s2 = speedup(&SpeedModelInput { rho: 1.0, k: k + dk, gamma: 8 }, &cc);
            prop_assert!(s2 >= s - 1e-12);
        }
    }
}
