//! Levenberg–Marquardt pose-graph optimization on SE(3).
//!
//! Each factor measures `T̂_{p,q}` between two pose variables with residual
//! `r = log(T̂⁻¹ · T_p⁻¹ · T_q)∨` and cost `ρ(rᵀ Σ⁻¹ r)`, where `ρ` is the
//! identity for quadratic factors and the Cauchy kernel for robust ones.
//! Increments are applied on the right, `T ← T · exp(δ)`. One variable (the
//! gauge) is held fixed.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Isometry3, Matrix6, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{adjoint, exp_iso, log_iso, se3_right_jacobian_inv, Twist};
use crate::graph::EdgeKind;
use crate::place::VertexRef;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("normal equations not positive definite at iteration {iteration} (lambda {lambda:e})")]
    NotPositiveDefinite { iteration: usize, lambda: f64 },
    #[error(
        "cost increased for {retries} damping retries at iteration {iteration} (cost {cost:e})"
    )]
    Diverged {
        iteration: usize,
        retries: usize,
        cost: f64,
    },
    #[error("factor {0} references a missing variable")]
    MissingVariable(usize),
    #[error("covariance of factor {0} is not positive definite")]
    BadCovariance(usize),
    #[error("graph has no variables")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor<T: Real = f64> {
    pub from: usize,
    pub to: usize,
    /// `T̂_{from,to}`
    pub measurement: Isometry3<T>,
    pub covariance: Matrix6<T>,
    /// `Σ⁻¹`
    pub information: Matrix6<T>,
    pub robust: bool,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph<T: Real = f64> {
    pub keys: Vec<VertexRef>,
    index: BTreeMap<VertexRef, usize>,
    pub states: Vec<Isometry3<T>>,
    pub factors: Vec<Factor<T>>,
    pub gauge: usize,
    /// Inter-session pairs `(b_p, b_q)` backing the robust factors.
    pub matched: Vec<(VertexRef, VertexRef)>,
}

impl<T: Real> Default for FactorGraph<T> {
    fn default() -> Self {
        Self {
            keys: Vec::new(),
            index: BTreeMap::new(),
            states: Vec::new(),
            factors: Vec::new(),
            gauge: 0,
            matched: Vec::new(),
        }
    }
}

impl<T: Real> FactorGraph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or overwrites the state of) a variable and returns its index.
    pub fn add_variable(&mut self, key: VertexRef, state: Isometry3<T>) -> usize {
        if let Some(&i) = self.index.get(&key) {
            self.states[i] = state;
            return i;
        }
        let i = self.keys.len();
        self.index.insert(key.clone(), i);
        self.keys.push(key);
        self.states.push(state);
        i
    }

    pub fn variable(&self, key: &VertexRef) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn state(&self, key: &VertexRef) -> Option<&Isometry3<T>> {
        self.variable(key).map(|i| &self.states[i])
    }

    pub fn add_factor(
        &mut self,
        from: usize,
        to: usize,
        measurement: Isometry3<T>,
        covariance: Matrix6<T>,
        robust: bool,
        kind: EdgeKind,
    ) -> Result<usize, OptimizeError> {
        let id = self.factors.len();
        if from >= self.states.len() || to >= self.states.len() {
            return Err(OptimizeError::MissingVariable(id));
        }
        let information = covariance
            .cholesky()
            .ok_or(OptimizeError::BadCovariance(id))?
            .inverse();
        let information = (information + information.transpose()) * T::lit(0.5);
        self.factors.push(Factor {
            from,
            to,
            measurement,
            covariance,
            information,
            robust,
            kind,
        });
        Ok(id)
    }

    /// Converts the graph to another scalar type.
    pub fn cast<U: Real>(&self) -> FactorGraph<U> {
        let c = |v: T| U::lit(v.as_f64());
        let iso = |i: &Isometry3<T>| {
            let v = log_iso(i).map(c);
            exp_iso(&v)
        };
        FactorGraph {
            keys: self.keys.clone(),
            index: self.index.clone(),
            states: self.states.iter().map(iso).collect(),
            factors: self
                .factors
                .iter()
                .map(|f| Factor {
                    from: f.from,
                    to: f.to,
                    measurement: iso(&f.measurement),
                    covariance: f.covariance.map(c),
                    information: f.information.map(c),
                    robust: f.robust,
                    kind: f.kind,
                })
                .collect(),
            gauge: self.gauge,
            matched: self.matched.clone(),
        }
    }
}

/// `log(T̂⁻¹ · T_p⁻¹ · T_q)∨`
pub fn residual<T: Real>(factor: &Factor<T>, states: &[Isometry3<T>]) -> Twist<T> {
    Twist(residual_of(
        &factor.measurement,
        &states[factor.from],
        &states[factor.to],
    ))
}

fn residual_of<T: Real>(meas: &Isometry3<T>, tp: &Isometry3<T>, tq: &Isometry3<T>) -> Vector6<T> {
    log_iso(&(meas.inverse() * tp.inverse() * tq))
}

/// Squared Mahalanobis norm `rᵀ Σ⁻¹ r`.
pub fn weighted_sq_norm<T: Real>(factor: &Factor<T>, r: &Vector6<T>) -> T {
    (r.transpose() * factor.information * r)[(0, 0)]
}

/// Cauchy kernel `ρ(s) = c²·ln(1 + s/c²)` and its derivative `ρ'(s) = 1/(1 + s/c²)`.
pub fn cauchy_rho<T: Real>(s: T, c: T) -> (T, T) {
    let c2 = c * c;
    let u = s / c2;
    (c2 * u.ln_1p(), T::one() / (T::one() + u))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Central differences on right perturbations.
    Numeric,
    /// Closed form via the SE(3) right Jacobian.
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Loss {
    /// Cauchy kernel on factors flagged robust, quadratic elsewhere.
    Cauchy { scale: f64 },
    /// Quadratic everywhere, ignoring the robust flags.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_cost_tolerance: f64,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub max_retries: usize,
    pub loss: Loss,
    pub jacobians: JacobianMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            relative_cost_tolerance: 1e-10,
            lambda_init: 1e-4,
            lambda_factor: 10.0,
            max_retries: 10,
            loss: Loss::Cauchy { scale: 1.0 },
            jacobians: JacobianMode::Numeric,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientNorm,
    RelativeCostChange,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub from: VertexRef,
    pub to: VertexRef,
    pub kind: EdgeKind,
    pub robust: bool,
    pub weighted_sq_residual: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub cost_trace: Vec<f64>,
    pub final_lambda: f64,
    pub factors: Vec<FactorSummary>,
}

/// Per-factor kernel value and IRLS weight under `loss`.
fn kernel<T: Real>(factor: &Factor<T>, s: T, loss: &Loss) -> (T, T) {
    match loss {
        Loss::Cauchy { scale } if factor.robust => cauchy_rho(s, T::lit(*scale)),
        _ => (s, T::one()),
    }
}

/// Total cost `Σ ρ(‖r‖²_Σ)`.
pub fn total_cost<T: Real>(g: &FactorGraph<T>, states: &[Isometry3<T>], loss: &Loss) -> T {
    g.factors
        .iter()
        .map(|f| {
            let r = residual_of(&f.measurement, &states[f.from], &states[f.to]);
            kernel(f, weighted_sq_norm(f, &r), loss).0
        })
        .fold(T::zero(), |a, b| a + b)
}

/// Jacobians of the residual w.r.t. right perturbations of `T_p` and `T_q`.
pub fn factor_jacobians<T: Real>(
    factor: &Factor<T>,
    states: &[Isometry3<T>],
    mode: JacobianMode,
) -> (Matrix6<T>, Matrix6<T>) {
    let tp = &states[factor.from];
    let tq = &states[factor.to];
    match mode {
        JacobianMode::Analytic => {
            let r = residual_of(&factor.measurement, tp, tq);
            let jr_inv = se3_right_jacobian_inv(&r);
            let x_inv = tq.inverse() * tp;
            (-(jr_inv * adjoint(&x_inv)), jr_inv)
        }
        JacobianMode::Numeric => {
            let h = T::fd_step();
            let two_h = h + h;
            let mut jp = Matrix6::zeros();
            let mut jq = Matrix6::zeros();
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let (ep, em) = (exp_iso(&d), exp_iso(&(-d)));
                let col = (residual_of(&factor.measurement, &(tp * ep), tq)
                    - residual_of(&factor.measurement, &(tp * em), tq))
                    / two_h;
                jp.set_column(k, &col);
                let col = (residual_of(&factor.measurement, tp, &(tq * ep))
                    - residual_of(&factor.measurement, tp, &(tq * em)))
                    / two_h;
                jq.set_column(k, &col);
            }
            (jp, jq)
        }
    }
}

struct Linearized<T: Real> {
    h: DMatrix<T>,
    g: DVector<T>,
    cost: T,
}

fn linearize<T: Real>(
    g: &FactorGraph<T>,
    states: &[Isometry3<T>],
    slot: &[Option<usize>],
    cfg: &OptimizerConfig,
) -> Linearized<T> {
    let n = slot.iter().flatten().count() * 6;
    let parts: Vec<_> = g
        .factors
        .par_iter()
        .map(|f| {
            let r = residual_of(&f.measurement, &states[f.from], &states[f.to]);
            let s = weighted_sq_norm(f, &r);
            let (rho, w) = kernel(f, s, &cfg.loss);
            let (jp, jq) = factor_jacobians(f, states, cfg.jacobians);
            (r, rho, w, jp, jq)
        })
        .collect();
    let mut h = DMatrix::zeros(n, n);
    let mut grad = DVector::zeros(n);
    let mut cost = T::zero();
    for (f, (r, rho, w, jp, jq)) in g.factors.iter().zip(parts) {
        cost += rho;
        let wi = f.information * w;
        let blocks = [(slot[f.from], jp), (slot[f.to], jq)];
        for (sa, ja) in &blocks {
            let Some(a) = sa else { continue };
            let jt_w = ja.transpose() * wi;
            let ga = jt_w * r;
            let mut gv = grad.fixed_rows_mut::<6>(a * 6);
            gv += ga;
            for (sb, jb) in &blocks {
                let Some(b) = sb else { continue };
                let mut hv = h.fixed_view_mut::<6, 6>(a * 6, b * 6);
                hv += jt_w * jb;
            }
        }
    }
    Linearized { h, g: grad, cost }
}

fn retract<T: Real>(
    states: &[Isometry3<T>],
    slot: &[Option<usize>],
    delta: &DVector<T>,
) -> Vec<Isometry3<T>> {
    states
        .iter()
        .zip(slot)
        .map(|(s, sl)| match sl {
            Some(i) => {
                let d = Vector6::from_iterator(delta.rows(i * 6, 6).iter().copied());
                let mut next = s * exp_iso(&d);
                next.rotation = nalgebra::UnitQuaternion::new_normalize(next.rotation.into_inner());
                next
            }
            None => *s,
        })
        .collect()
}

fn summarize<T: Real>(
    g: &FactorGraph<T>,
    states: &[Isometry3<T>],
    loss: &Loss,
) -> Vec<FactorSummary> {
    g.factors
        .iter()
        .map(|f| {
            let r = residual_of(&f.measurement, &states[f.from], &states[f.to]);
            let s = weighted_sq_norm(f, &r);
            FactorSummary {
                from: g.keys[f.from].clone(),
                to: g.keys[f.to].clone(),
                kind: f.kind,
                robust: f.robust,
                weighted_sq_residual: s.as_f64(),
                weight: kernel(f, s, loss).1.as_f64(),
            }
        })
        .collect()
}

/// Minimizes the total cost in place; the gauge variable is never moved.
pub fn optimize<T: Real>(
    g: &mut FactorGraph<T>,
    cfg: &OptimizerConfig,
) -> Result<OptimizationReport, OptimizeError> {
    if g.states.is_empty() {
        return Err(OptimizeError::Empty);
    }
    let mut next = 0;
    let slot: Vec<Option<usize>> = (0..g.states.len())
        .map(|i| {
            (i != g.gauge).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    let mut states = g.states.clone();
    let mut lambda = cfg.lambda_init;
    let mut lin = linearize(g, &states, &slot, cfg);
    let initial_cost = lin.cost.as_f64();
    let mut trace = vec![initial_cost];
    let mut iterations = 0;
    let termination = loop {
        let gnorm = lin.g.amax().as_f64();
        if gnorm < cfg.gradient_tolerance {
            break Termination::GradientNorm;
        }
        if iterations >= cfg.max_iterations {
            break Termination::MaxIterations;
        }
        let mut retries = 0;
        let converged;
        loop {
            let mut damped = lin.h.clone();
            for i in 0..damped.nrows() {
                let d = lin.h[(i, i)].max(T::lit(1e-12));
                damped[(i, i)] += T::lit(lambda) * d;
            }
            let Some(chol) = damped.cholesky() else {
                retries += 1;
                lambda *= cfg.lambda_factor;
                if retries > cfg.max_retries {
                    return Err(OptimizeError::NotPositiveDefinite {
                        iteration: iterations,
                        lambda,
                    });
                }
                continue;
            };
            let delta = -chol.solve(&lin.g);
            let cand = retract(&states, &slot, &delta);
            let cand_cost = total_cost(g, &cand, &cfg.loss);
            let cost = lin.cost;
            // Against max(cost, 1): near zero cost this is an absolute chi-square
            // tolerance, so round-off alone cannot keep the loop alive.
            let rel = ((cost - cand_cost).abs() / cost.max(T::one())).as_f64();
            if cand_cost <= cost {
                states = cand;
                lambda = (lambda / cfg.lambda_factor).max(1e-12);
                converged = rel < cfg.relative_cost_tolerance;
                break;
            }
            if rel < cfg.relative_cost_tolerance {
                // Increase within round-off: nothing left to gain.
                converged = true;
                break;
            }
            retries += 1;
            lambda *= cfg.lambda_factor;
            if retries >= cfg.max_retries {
                return Err(OptimizeError::Diverged {
                    iteration: iterations,
                    retries,
                    cost: cost.as_f64(),
                });
            }
        }
        iterations += 1;
        lin = linearize(g, &states, &slot, cfg);
        trace.push(lin.cost.as_f64());
        if converged {
            break Termination::RelativeCostChange;
        }
    };
    g.states = states;
    Ok(OptimizationReport {
        initial_cost,
        final_cost: lin.cost.as_f64(),
        iterations,
        termination,
        cost_trace: trace,
        final_lambda: lambda,
        factors: summarize(g, &g.states, &cfg.loss),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn key(i: u64) -> VertexRef {
        VertexRef::new("s", i)
    }

    fn xi(w: [f64; 3], t: [f64; 3]) -> Isometry3<f64> {
        exp_iso(&Vector6::new(w[0], w[1], w[2], t[0], t[1], t[2]))
    }

    fn trans(x: f64, y: f64, z: f64) -> Isometry3<f64> {
        Isometry3::translation(x, y, z)
    }

    fn two_var(meas: Isometry3<f64>, tp: Isometry3<f64>, tq: Isometry3<f64>) -> FactorGraph {
        let mut g = FactorGraph::new();
        let a = g.add_variable(key(0), tp);
        let b = g.add_variable(key(1), tq);
        g.add_factor(a, b, meas, Matrix6::identity(), true, EdgeKind::InterLoop)
            .unwrap();
        g
    }

    #[test]
    fn residual_examples() {
        let g = two_var(
            Isometry3::identity(),
            trans(1.0, 2.0, 3.0),
            trans(1.0, 2.0, 3.0),
        );
        assert_eq!(residual(&g.factors[0], &g.states).0, Vector6::zeros());

        let p = xi([0.2, 0.1, -0.3], [1.0, 0.0, 0.5]);
        let g = two_var(trans(1.0, 0.0, 0.0), p, p * trans(1.0, 0.0, 0.0));
        assert!(residual(&g.factors[0], &g.states).norm() < 1e-12);

        let g = two_var(
            Isometry3::identity(),
            Isometry3::identity(),
            trans(0.1, 0.0, 0.0),
        );
        let r = residual(&g.factors[0], &g.states).0;
        assert!((r - Vector6::new(0.0, 0.0, 0.0, 0.1, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn cauchy_values() {
        assert_eq!(cauchy_rho(0.0, 1.5), (0.0, 1.0));
        let c = 1.7f64;
        let (v, w) = cauchy_rho(c * c, c);
        assert!((v - c * c * 2f64.ln()).abs() < 1e-12);
        assert!((w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cauchy_weight_strictly_decreasing() {
        let c = 1.0;
        let grid: Vec<f64> = (0..2000).map(|i| i as f64 * 0.01).collect();
        for pair in grid.windows(2) {
            let (w0, w1) = (cauchy_rho(pair[0], c).1, cauchy_rho(pair[1], c).1);
            assert!(w1 < w0);
            // ρ' from finite differences of ρ agrees with the closed form
            let h = 1e-6;
            let fd = (cauchy_rho(pair[0] + h, c).0 - cauchy_rho((pair[0] - h).max(0.0), c).0)
                / (pair[0] + h - (pair[0] - h).max(0.0));
            assert!((fd - w0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_residual_terminates_immediately() {
        let p = xi([0.1, 0.2, 0.3], [1.0, 2.0, 3.0]);
        let mut g = two_var(trans(0.5, 0.0, 0.0), p, p * trans(0.5, 0.0, 0.0));
        let rep = optimize(&mut g, &OptimizerConfig::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(rep.final_cost < 1e-20);
        assert_eq!(rep.termination, Termination::GradientNorm);
    }

    #[test]
    fn gauge_is_fixed_and_cost_non_increasing() {
        let mut g = FactorGraph::new();
        let poses: Vec<_> = (0..4)
            .map(|i| trans(i as f64, 0.1 * i as f64, 0.0))
            .collect();
        for (i, p) in poses.iter().enumerate() {
            g.add_variable(key(i as u64), *p);
        }
        g.gauge = 2;
        let cov = Matrix6::identity() * 1e-2;
        for i in 0..3 {
            let m = xi([0.0, 0.0, 0.05], [1.0, 0.0, 0.0]);
            g.add_factor(i, i + 1, m, cov, false, EdgeKind::Odometry)
                .unwrap();
        }
        g.add_factor(0, 3, trans(2.9, 0.0, 0.0), cov, true, EdgeKind::InterLoop)
            .unwrap();
        let before = g.states[2];
        let rep = optimize(&mut g, &OptimizerConfig::default()).unwrap();
        assert_eq!(g.states[2], before);
        assert!(rep.final_cost < rep.initial_cost);
        for w in rep.cost_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn analytic_and_numeric_jacobians_agree() {
        let g = two_var(
            xi([0.3, -0.2, 0.4], [0.5, 1.0, -0.3]),
            xi([1.0, 0.5, -0.7], [2.0, -1.0, 0.4]),
            xi([-0.4, 0.9, 0.2], [0.1, 3.0, 1.0]),
        );
        let (ap, aq) = factor_jacobians(&g.factors[0], &g.states, JacobianMode::Analytic);
        let (np, nq) = factor_jacobians(&g.factors[0], &g.states, JacobianMode::Numeric);
        assert!((ap - np).norm() < 1e-7 * ap.norm());
        assert!((aq - nq).norm() < 1e-7 * aq.norm());
    }

    #[test]
    fn runs_in_single_precision() {
        let mut g = FactorGraph::<f64>::new();
        for i in 0..3 {
            g.add_variable(key(i), trans(i as f64 * 1.1, 0.0, 0.0));
        }
        let cov = Matrix6::identity() * 1e-2;
        g.add_factor(0, 1, trans(1.0, 0.0, 0.0), cov, false, EdgeKind::Odometry)
            .unwrap();
        g.add_factor(1, 2, trans(1.0, 0.0, 0.0), cov, false, EdgeKind::Odometry)
            .unwrap();
        let mut g32: FactorGraph<f32> = g.cast();
        let cfg = OptimizerConfig {
            relative_cost_tolerance: 1e-5,
            gradient_tolerance: 1e-3,
            ..Default::default()
        };
        let rep = optimize(&mut g32, &cfg).unwrap();
        assert!(rep.final_cost < 1e-4);
        assert!((g32.states[2].translation.vector - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-3);
    }

    #[test]
    fn rejects_bad_covariance_and_missing_variable() {
        let mut g = FactorGraph::<f64>::new();
        g.add_variable(key(0), Isometry3::identity());
        assert_eq!(
            g.add_factor(
                0,
                3,
                Isometry3::identity(),
                Matrix6::identity(),
                false,
                EdgeKind::Odometry
            ),
            Err(OptimizeError::MissingVariable(0))
        );
        g.add_variable(key(1), Isometry3::identity());
        assert_eq!(
            g.add_factor(
                0,
                1,
                Isometry3::identity(),
                -Matrix6::identity(),
                false,
                EdgeKind::Odometry
            ),
            Err(OptimizeError::BadCovariance(0))
        );
    }
}
