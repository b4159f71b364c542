//! Shared trapezoid grid with per-observation weights.
//!
//! All observations share the uniform node set `t_1 = 0 < ... < t_K = max y_i`.
//! Observation `i` integrates over `[0, y_i]` using the nodes strictly below
//! `y_i` (indices `1..=K_i`) plus one endpoint node at `y_i` itself, so the
//! weights always telescope to exactly `y_i`. The endpoint coincides with the
//! point where the event term of the likelihood is evaluated, so it costs no
//! extra network evaluations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("cannot build a quadrature grid for an empty dataset")]
    Empty,
    #[error("grid needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("observation {index} has non-positive or non-finite time {time}")]
    BadTime { index: usize, time: f64 },
    #[error("grid nodes must start at 0 and be strictly increasing")]
    BadNodes,
}

/// Trapezoid rule for one observation: `times[..cutoff]` are shared grid
/// nodes, `times[cutoff]` is the observed time `y_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRule {
    times: Vec<f64>,
    weights: Vec<f64>,
}

impl ObservationRule {
    fn new(nodes: &[f64], y: f64) -> Self {
        let cutoff = nodes.iter().take_while(|&&t| t < y).count().max(1);
        let mut times: Vec<f64> = nodes[..cutoff].to_vec();
        times.push(y);
        let n = times.len();
        let mut weights = vec![0.0; n];
        for k in 0..n {
            let left = if k == 0 { times[0] } else { times[k - 1] };
            let right = if k + 1 == n { times[k] } else { times[k + 1] };
            weights[k] = (right - left) / 2.0;
        }
        Self { times, weights }
    }

    /// `K_i`: number of shared nodes strictly below `y_i`.
    pub fn cutoff(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn end_time(&self) -> f64 {
        self.times[self.cutoff()]
    }

    pub fn end_weight(&self) -> f64 {
        self.weights[self.cutoff()]
    }

    /// Σ w_k f(t_k) over this observation's nodes and endpoint.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.times.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    rules: Vec<ObservationRule>,
}

impl QuadratureGrid {
    /// Uniform grid on `[0, max y_i]` with `k` nodes.
    pub fn build(times: &[f64], k: usize) -> Result<Self, GridError> {
        if times.is_empty() {
            return Err(GridError::Empty);
        }
        if k < 2 {
            return Err(GridError::TooFewNodes(k));
        }
        check_times(times)?;
        let t_max = times.iter().cloned().fold(0.0, f64::max);
        let nodes: Vec<f64> = (0..k)
            .map(|j| if j + 1 == k { t_max } else { t_max * j as f64 / (k - 1) as f64 })
            .collect();
        Self::with_nodes(nodes, times)
    }

    /// Grid on caller-supplied nodes (must start at 0, strictly increasing).
    pub fn with_nodes(nodes: Vec<f64>, times: &[f64]) -> Result<Self, GridError> {
        if times.is_empty() {
            return Err(GridError::Empty);
        }
        if nodes.len() < 2 {
            return Err(GridError::TooFewNodes(nodes.len()));
        }
        if nodes[0] != 0.0 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GridError::BadNodes);
        }
        check_times(times)?;
        let rules = times.iter().map(|&y| ObservationRule::new(&nodes, y)).collect();
        Ok(Self { nodes, rules })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_observations(&self) -> usize {
        self.rules.len()
    }

    pub fn rule(&self, i: usize) -> &ObservationRule {
        &self.rules[i]
    }

    pub fn rules(&self) -> &[ObservationRule] {
        &self.rules
    }

    /// Weights `v_{ik}` on the shared nodes, zero for `k > K_i`. The endpoint
    /// weight at `y_i` is reported separately by [`ObservationRule::end_weight`].
    pub fn node_weights(&self, i: usize) -> Vec<f64> {
        let rule = &self.rules[i];
        let mut w = vec![0.0; self.nodes.len()];
        w[..rule.cutoff()].copy_from_slice(&rule.weights[..rule.cutoff()]);
        w
    }

    /// Flatten every (observation, node) pair into one evaluation list.
    pub fn eval_points(&self, covariates: &[Vec<f64>]) -> EvalPoints {
        assert_eq!(covariates.len(), self.rules.len(), "one covariate row per observation");
        let dim = 1 + covariates.first().map_or(0, |x| x.len());
        let mut pts = EvalPoints {
            dim,
            times: Vec::new(),
            weights: Vec::new(),
            owner: Vec::new(),
            offsets: vec![0],
            inputs: Vec::new(),
        };
        for (i, (rule, x)) in self.rules.iter().zip(covariates).enumerate() {
            for (&t, &w) in rule.times.iter().zip(&rule.weights) {
                pts.times.push(t);
                pts.weights.push(w);
                pts.owner.push(i);
                pts.inputs.push(t);
                pts.inputs.extend_from_slice(x);
            }
            pts.offsets.push(pts.times.len());
        }
        pts
    }
}

fn check_times(times: &[f64]) -> Result<(), GridError> {
    for (index, &time) in times.iter().enumerate() {
        if !(time > 0.0) || !time.is_finite() {
            return Err(GridError::BadTime { index, time });
        }
    }
    Ok(())
}

/// Every quadrature point of every observation, with the network input
/// `(t, x_i)` laid out contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoints {
    pub dim: usize,
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
    pub owner: Vec<usize>,
    /// `offsets[i]..offsets[i+1]` are observation i's points; the last is `y_i`.
    pub offsets: Vec<usize>,
    pub inputs: Vec<f64>,
}

impl EvalPoints {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_observations(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Index of the point at `y_i`.
    pub fn end_index(&self, i: usize) -> usize {
        self.offsets[i + 1] - 1
    }

    pub fn input(&self, p: usize) -> &[f64] {
        &self.inputs[p * self.dim..(p + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_node_unit_interval() {
        let g = QuadratureGrid::build(&[1.0], 3).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.5, 1.0]);
        // nodes strictly below y: 0 and 0.5; endpoint sits on t_3 = 1
        assert_eq!(g.node_weights(0), vec![0.25, 0.5, 0.0]);
        assert_eq!(g.rule(0).end_weight(), 0.25);
        assert_eq!(g.rule(0).end_time(), 1.0);
        assert_eq!(g.rule(0).cutoff(), 2);
    }

    #[test]
    fn polynomial_and_exponential_integrals() {
        let g = QuadratureGrid::build(&[1.0], 201).unwrap();
        assert!((g.rule(0).integrate(|t| t) - 0.5).abs() < 1e-4);
        let g = QuadratureGrid::build(&[1.0], 401).unwrap();
        let exact = std::f64::consts::E - 1.0;
        assert!((g.rule(0).integrate(f64::exp) - exact).abs() < 1e-5);
    }

    #[test]
    fn off_grid_time_and_tiny_time() {
        let g = QuadratureGrid::build(&[1.0, 0.37, 0.001], 11).unwrap();
        let r = g.rule(1);
        assert_eq!(r.cutoff(), 4); // 0, .1, .2, .3
        assert!((r.integrate(|_| 1.0) - 0.37).abs() < 1e-15);
        assert!((r.integrate(|t| t) - 0.37f64.powi(2) / 2.0).abs() < 1e-15);
        let r = g.rule(2);
        assert_eq!(r.cutoff(), 1);
        assert!((r.integrate(|_| 1.0) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn errors() {
        assert_eq!(QuadratureGrid::build(&[], 5), Err(GridError::Empty));
        assert_eq!(QuadratureGrid::build(&[1.0], 1), Err(GridError::TooFewNodes(1)));
        assert!(matches!(QuadratureGrid::build(&[1.0, 0.0], 5), Err(GridError::BadTime { index: 1, .. })));
        assert_eq!(QuadratureGrid::with_nodes(vec![0.1, 0.5], &[1.0]), Err(GridError::BadNodes));
    }

    #[test]
    fn eval_points_layout() {
        let g = QuadratureGrid::build(&[1.0, 0.3], 5).unwrap();
        let pts = g.eval_points(&[vec![7.0, 8.0], vec![9.0, 10.0]]);
        assert_eq!(pts.dim, 3);
        assert_eq!(pts.range(0), 0..5);
        assert_eq!(pts.range(1), 5..8);
        assert_eq!(pts.times[pts.end_index(1)], 0.3);
        assert_eq!(pts.input(6), &[0.25, 9.0, 10.0]);
    }

    proptest! {
        #[test]
        fn weights_nonnegative_and_sum_to_y(
            times in proptest::collection::vec(1e-6f64..50.0, 1..30),
            k in 2usize..200,
        ) {
            let g = QuadratureGrid::build(&times, k).unwrap();
            for (i, &y) in times.iter().enumerate() {
                let r = g.rule(i);
                prop_assert!(r.weights().iter().all(|&w| w >= 0.0));
                let s: f64 = r.weights().iter().sum();
                prop_assert!((s - y).abs() <= 1e-12 * y.max(1.0));
                let nw = g.node_weights(i);
                prop_assert!(nw[r.cutoff()..].iter().all(|&w| w == 0.0));
            }
        }
    }
}
