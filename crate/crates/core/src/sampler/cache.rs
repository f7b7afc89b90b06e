use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::integrator::{
    extrapolate_output, extrapolation_coefficients, ExtrapolationCoefficients, Mode, SPACING_RTOL,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Extrapolation coordinate: half-logSNR in diffusion mode, time in flow mode.
    pub coord: f64,
    pub lambda: f64,
    pub eps: Vec<f64>,
    pub step_index: usize,
}

/// The last `capacity` real network outputs, most recent first.
///
/// Only real evaluations are pushed; extrapolated outputs never re-enter.
#[derive(Debug, Clone)]
pub struct OutputCache {
    capacity: usize,
    entries: VecDeque<CacheEntry>,
}

impl OutputCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, entry: CacheEntry) -> Result<()> {
        if let Some(front) = self.entries.front() {
            if entry.lambda <= front.lambda || entry.step_index <= front.step_index {
                return Err(Error::InvalidArgument(format!(
                    "cache entries must advance; step {} at lambda {} follows step {} at lambda {}",
                    entry.step_index, entry.lambda, front.step_index, front.lambda
                )));
            }
        }
        self.entries.push_front(entry);
        self.entries.truncate(self.capacity);
        Ok(())
    }

    /// Coefficients for predicting the output at `target` from a full cache.
    ///
    /// When the cached nodes are evenly spaced and the target lies one
    /// spacing past the newest node, this is the binomial rule with that
    /// spacing; otherwise the general Lagrange form on the actual nodes.
    pub fn coefficients(&self, target: f64, mode: Mode) -> Result<ExtrapolationCoefficients> {
        if !self.is_full() {
            return Err(Error::InsufficientHistory {
                needed: self.capacity,
                have: self.len(),
            });
        }
        let nodes: Vec<f64> = self.entries.iter().map(|e| e.coord).collect();
        let step = target - nodes[0];
        let even = std::iter::once(target)
            .chain(nodes.iter().copied())
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| ((w[0] - w[1]) - step).abs() <= SPACING_RTOL * step.abs());
        if even {
            extrapolation_coefficients(self.capacity, step.abs(), mode)
        } else {
            ExtrapolationCoefficients::from_nodes(&nodes, target, mode)
        }
    }

    pub fn extrapolate(&self, target: f64, mode: Mode) -> Result<Vec<f64>> {
        let coeffs = self.coefficients(target, mode)?;
        let history: Vec<&[f64]> = self.entries.iter().map(|e| e.eps.as_slice()).collect();
        extrapolate_output(&history, &coeffs)
    }
}
