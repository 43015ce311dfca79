//! Residual-based a posteriori estimator
//! `eta = ||F_gamma||^2 + sigma1 ||rot w_h||^2 + sigma2 ||w_h - grad u_h||^2`.

use rayon::prelude::*;
use serde::Serialize;

use crate::control::{bellman_max_scaled, scaled_coefficients};
use crate::error::Result;
use crate::mixed::{MixedProblem, MixedState, StabilityConstants};
use crate::quadrature::TriangleRule;

/// Contributions of one element; `term_rot` and `term_gap` carry their
/// weights `sigma1`, `sigma2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LocalTerms {
    pub term_f: f64,
    pub term_rot: f64,
    pub term_gap: f64,
}

impl LocalTerms {
    pub fn total(&self) -> f64 {
        self.term_f + self.term_rot + self.term_gap
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub eta: f64,
    pub sqrt_eta: f64,
    pub term_f: f64,
    pub term_rot: f64,
    pub term_gap: f64,
    #[serde(skip)]
    pub local: Vec<LocalTerms>,
}

impl EstimatorReport {
    fn from_local(local: Vec<LocalTerms>) -> Self {
        let term_f = local.iter().map(|t| t.term_f).sum();
        let term_rot = local.iter().map(|t| t.term_rot).sum();
        let term_gap = local.iter().map(|t| t.term_gap).sum();
        let eta: f64 = term_f + term_rot + term_gap;
        Self {
            eta,
            sqrt_eta: eta.sqrt(),
            term_f,
            term_rot,
            term_gap,
            local,
        }
    }

    /// Upper bound for `|||error|||_lambda^2`.
    pub fn reliability_bound(&self, constants: &StabilityConstants) -> f64 {
        constants.reliability_bound(self.term_f, self.term_rot, self.term_gap)
    }

    /// Left-hand side of the efficiency estimate,
    /// `||F||^2/2 + sigma1 ||rot||^2 + sigma2 ||gap||^2`.
    pub fn efficiency_lhs(&self) -> f64 {
        0.5 * self.term_f + self.term_rot + self.term_gap
    }
}

/// Estimator of `state` with a quadrature rule of degree `quad_degree`.
pub fn estimate(
    problem: &MixedProblem,
    state: &MixedState,
    quad_degree: usize,
) -> Result<EstimatorReport> {
    let rule = TriangleRule::with_degree(quad_degree.max(1));
    let k = problem.constants();
    let family = problem.family();
    let certificate = problem.certificate();
    let x = problem.frozen_x();
    let local = (0..problem.mesh().num_elements())
        .into_par_iter()
        .map(|e| -> Result<LocalTerms> {
            let wv = problem.w_space().element_values(e, &rule);
            let uv = problem.u_space().element_values(e, &rule);
            let ws = state.w.eval_element(e, &wv);
            let us = state.u.eval_element(e, &uv);
            let mut t = LocalTerms::default();
            for (qw, qu) in ws.iter().zip(&us) {
                let scaled = scaled_coefficients(family, certificate, &x, &qw.point)?;
                let (f, _) = bellman_max_scaled(&scaled, &qw.jacobian, &qu.gradient(), qu.value[0]);
                t.term_f += qw.weight * f * f;
                t.term_rot += qw.weight * k.sigma1 * qw.rot().powi(2);
                t.term_gap += qw.weight * k.sigma2 * (qw.value - qu.gradient()).norm_squared();
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimatorReport::from_local(local))
}
