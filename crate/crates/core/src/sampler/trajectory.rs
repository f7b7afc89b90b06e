use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::integrator::Mode;
use crate::model::Predictor;
use crate::vecops::{max_abs_diff, norm};

/// Column order of [`Trajectory::to_csv`].
pub const TRAJECTORY_CSV_HEADER: &str = "step_index,t,lambda,was_cached,eps_error_vs_oracle,x_norm";

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    pub t: f64,
    pub lambda: f64,
    /// State at `t`, the input to this step.
    pub x: Vec<f64>,
    pub eps_used: Vec<f64>,
    /// True when `eps_used` was extrapolated from the cache.
    pub was_cached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mode: Mode,
    pub records: Vec<StepRecord>,
    pub final_t: f64,
    pub final_lambda: f64,
    pub final_state: Vec<f64>,
    pub n_network_evals: usize,
    pub n_extrapolations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub n_steps: usize,
    pub n_network_evals: usize,
    pub n_extrapolations: usize,
    pub final_t: f64,
    pub final_x_norm: f64,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.records.len()
    }

    pub fn summary(&self) -> TrajectorySummary {
        TrajectorySummary {
            n_steps: self.n_steps(),
            n_network_evals: self.n_network_evals,
            n_extrapolations: self.n_extrapolations,
            final_t: self.final_t,
            final_x_norm: norm(&self.final_state),
        }
    }

    /// Outputs actually used at each step, in step order.
    pub fn eps_sequence(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.eps_used.as_slice()).collect()
    }

    /// Max-norm difference between each used output and `reference` at the
    /// same state and time.
    pub fn eps_errors<P: Predictor + ?Sized>(&self, reference: &P) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| Ok(max_abs_diff(&r.eps_used, &reference.predict(&r.x, r.t)?)))
            .collect()
    }

    /// CSV export, one row per step, floats printed with 17 significant digits.
    pub fn to_csv<P: Predictor + ?Sized>(&self, reference: &P) -> Result<String> {
        let errors = self.eps_errors(reference)?;
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TRAJECTORY_CSV_HEADER);
        out.push('\n');
        for (r, err) in self.records.iter().zip(errors) {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{},{:.16e},{:.16e}",
                r.step_index,
                r.t,
                r.lambda,
                u8::from(r.was_cached),
                err,
                norm(&r.x)
            );
        }
        Ok(out)
    }
}
