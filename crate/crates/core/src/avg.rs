//! Averaged exchange coefficient and the averaged deterministic system.
//!
//! The invariant measure of the fast pair is Gaussian and the exchange rate
//! acts pointwise, so at each node `x` the average over the measure reduces to
//! a two-dimensional Gaussian integral with mean `(xi_1(x), xi_2(x))` and the
//! diagonal of the covariance kernel `(s_1(x), s_2(x))`. With
//! `alpha = offset + scale g(y) h(eta)` this gives
//!
//! ```text
//! abar(xi, s)        = offset + scale <g>_Y    E[h(Z_1, Z_2)]
//! abar_eps(y; xi, s) = offset + scale g(y)     E[h(Z_1, Z_2)]
//! ```
//!
//! with `Z_i ~ N(xi_i, s_i)` independent, evaluated by tensor Gauss-Hermite.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::coeffs::{AlphaSpec, CoefficientSet, SmallMatrix};
use crate::error::{Error, Result};
use crate::fastsde::{invariant_marginal, SpectralNoise};
use crate::grid::{FieldPair, Mesh, ScalarField};
use crate::par::{self, Execution};
use crate::rng::{self, Role};
use crate::slowpde::{
    step_count, Diagnostics, DiagnosticsAccumulator, EstimateFlags, SlowScheme, StepRecords, StepView, Trajectory,
    SOLVER_TOL,
};

pub const DEFAULT_ORDER: usize = 20;
pub const DEFAULT_Y_POINTS: usize = 64;

/// Gauss-Hermite rule for `int exp(-x^2) f(x) dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes by Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::invalid(format!("Gauss-Hermite order {q} must be >= 2")));
        }
        let mut x = vec![0.0; q];
        let mut w = vec![0.0; q];
        let pim4 = PI.powf(-0.25);
        let qf = q as f64;
        let mut z = 0.0f64;
        for i in 0..q.div_ceil(2) {
            z = match i {
                0 => (2.0 * qf + 1.0).sqrt() - 1.85575 * (2.0 * qf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * qf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let (mut p1, mut p2) = (pim4, 0.0);
                for j in 0..q {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * qf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[q - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[q - 1 - i] = w[i];
        }
        // ascending order
        x.reverse();
        w.reverse();
        Ok(GaussHermite { nodes: x, weights: w })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E f(Z_1, Z_2)` for independent `Z_i ~ N(m_i, s_i)`.
    pub fn expect2(&self, m: [f64; 2], s: [f64; 2], f: impl Fn(f64, f64) -> f64) -> f64 {
        let r = [(2.0 * s[0]).sqrt(), (2.0 * s[1]).sqrt()];
        let mut acc = 0.0;
        for (xi, wi) in self.nodes.iter().zip(&self.weights) {
            let z1 = m[0] + r[0] * xi;
            let mut inner = 0.0;
            for (xj, wj) in self.nodes.iter().zip(&self.weights) {
                inner += wj * f(z1, m[1] + r[1] * xj);
            }
            acc += wi * inner;
        }
        acc / PI
    }
}

/// Midpoint nodes of `Y = [0,1)^d` with `n` points per dimension.
pub fn midpoint_cell_points(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let pts: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect();
    if dim == 1 {
        pts.iter().map(|&y| vec![y]).collect()
    } else {
        let mut out = Vec::with_capacity(n * n);
        for &b in &pts {
            for &a in &pts {
                out.push(vec![a, b]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AveragedAlphaEvaluator {
    alpha: AlphaSpec,
    dim: usize,
    y_points: usize,
    rule: GaussHermite,
    /// Midpoint average of the y-profile.
    profile_mean: f64,
}

impl AveragedAlphaEvaluator {
    pub fn new(alpha: AlphaSpec, dim: usize, y_points: usize, order: usize) -> Result<Self> {
        if y_points == 0 {
            return Err(Error::invalid("y-quadrature needs at least one point"));
        }
        let rule = GaussHermite::new(order)?;
        let f = alpha.factors();
        let profile_mean = match f.profile {
            None => 0.0,
            Some(g) => {
                let pts = midpoint_cell_points(dim, y_points);
                pts.iter().map(|y| g.eval(y)).sum::<f64>() / pts.len() as f64
            }
        };
        Ok(AveragedAlphaEvaluator {
            alpha,
            dim,
            y_points,
            rule,
            profile_mean,
        })
    }

    pub fn with_defaults(alpha: AlphaSpec, dim: usize) -> Result<Self> {
        Self::new(alpha, dim, DEFAULT_Y_POINTS, DEFAULT_ORDER)
    }

    pub fn alpha(&self) -> &AlphaSpec {
        &self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn y_points(&self) -> usize {
        self.y_points
    }

    pub fn order(&self) -> usize {
        self.rule.order()
    }

    /// `E h(Z_1, Z_2)` of the ridge factor.
    pub fn ridge_expectation(&self, xi1: f64, xi2: f64, s1: f64, s2: f64) -> Result<f64> {
        if !(s1 >= 0.0) || !(s2 >= 0.0) {
            return Err(Error::invalid(format!("variances ({s1}, {s2}) must be >= 0")));
        }
        let Some(h) = self.alpha.factors().ridge else {
            return Ok(0.0);
        };
        if h.is_constant() {
            return Ok(h.eval(xi1, xi2));
        }
        if s1 == 0.0 && s2 == 0.0 {
            return Ok(h.eval(xi1, xi2));
        }
        Ok(self.rule.expect2([xi1, xi2], [s1, s2], |a, b| h.eval(a, b)))
    }

    /// `abar` from the ridge expectation.
    #[inline]
    pub fn from_ridge(&self, ridge: f64) -> f64 {
        let f = self.alpha.factors();
        f.offset + f.scale * self.profile_mean * ridge
    }

    /// `abar_eps` at the cell point `y` from the ridge expectation.
    #[inline]
    pub fn pointwise_from_ridge(&self, y: &[f64], ridge: f64) -> f64 {
        let f = self.alpha.factors();
        match f.profile {
            None => f.offset,
            Some(g) => f.offset + f.scale * g.eval(y) * ridge,
        }
    }

    /// `E int_Y alpha(y, Z_1, Z_2) dy`.
    pub fn averaged_alpha(&self, xi1: f64, xi2: f64, s1: f64, s2: f64) -> Result<f64> {
        Ok(self.from_ridge(self.ridge_expectation(xi1, xi2, s1, s2)?))
    }

    /// `E alpha(y, Z_1, Z_2)` at a fixed cell point.
    pub fn averaged_alpha_at(&self, y: &[f64], xi1: f64, xi2: f64, s1: f64, s2: f64) -> Result<f64> {
        Ok(self.pointwise_from_ridge(y, self.ridge_expectation(xi1, xi2, s1, s2)?))
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// One CLT standard error.
    pub half_width: f64,
    pub replicas: usize,
}

const MC_BATCH: usize = 10_000;

/// Sample mean of `int_Y alpha(y, Z_1, Z_2) dy` over Gaussian draws, with the
/// y-integral taken by the midpoint rule on `alpha` itself.
#[allow(clippy::too_many_arguments)]
pub fn mc_averaged_alpha(
    alpha: &AlphaSpec,
    dim: usize,
    y_points: usize,
    xi: [f64; 2],
    s: [f64; 2],
    replicas: usize,
    seed: u64,
    exec: Execution,
) -> Result<McEstimate> {
    if replicas < 1000 {
        return Err(Error::invalid(format!("Monte Carlo oracle needs >= 1000 replicas, got {replicas}")));
    }
    if !(s[0] >= 0.0) || !(s[1] >= 0.0) {
        return Err(Error::invalid("variances must be >= 0"));
    }
    let ys = midpoint_cell_points(dim, y_points);
    let y_mean = |z1: f64, z2: f64| ys.iter().map(|y| alpha.eval_periodic(y, z1, z2)).sum::<f64>() / ys.len() as f64;
    if alpha.is_eta_independent() || (s[0] == 0.0 && s[1] == 0.0) {
        return Ok(McEstimate {
            mean: y_mean(xi[0], xi[1]),
            half_width: 0.0,
            replicas,
        });
    }
    let sd = [s[0].sqrt(), s[1].sqrt()];
    let batches = replicas.div_ceil(MC_BATCH);
    let sums = par::map_indexed(exec, batches, |b| {
        let mut rng = rng::stream(seed, Role::MonteCarlo, b as u64);
        let count = MC_BATCH.min(replicas - b * MC_BATCH);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..count {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            let (z1, z2) = (xi[0] + sd[0] * g1, xi[1] + sd[1] * g2);
            let v = y_mean(z1, z2);
            s1 += v;
            s2 += v * v;
        }
        (s1, s2)
    });
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = replicas as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        half_width: (var / n).sqrt(),
        replicas,
    })
}

/// Inputs of the averaged deterministic system.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragedRunConfig {
    pub mesh: Mesh,
    pub t_end: f64,
    pub dt: f64,
    pub coeffs: CoefficientSet,
    pub a_eff: [SmallMatrix; 2],
    pub noise: SpectralNoise,
    pub u0: FieldPair,
    pub y_points: usize,
    pub order: usize,
    pub record_steps: bool,
    pub solver_tol: f64,
}

impl AveragedRunConfig {
    pub fn new(
        mesh: Mesh,
        t_end: f64,
        dt: f64,
        coeffs: CoefficientSet,
        a_eff: [SmallMatrix; 2],
        noise: SpectralNoise,
        u0: FieldPair,
    ) -> Self {
        AveragedRunConfig {
            mesh,
            t_end,
            dt,
            coeffs,
            a_eff,
            noise,
            u0,
            y_points: DEFAULT_Y_POINTS,
            order: DEFAULT_ORDER,
            record_steps: false,
            solver_tol: SOLVER_TOL,
        }
    }
}

/// The averaged system assembled on a mesh.
pub struct AveragedSystem {
    config: AveragedRunConfig,
    scheme: SlowScheme,
    evaluator: AveragedAlphaEvaluator,
    variance: [Vec<f64>; 2],
}

impl AveragedSystem {
    pub fn new(config: AveragedRunConfig) -> Result<Self> {
        config.u0.mesh().same_as(&config.mesh)?;
        config.coeffs.check()?;
        step_count(config.t_end, config.dt)?;
        let c = &config.coeffs;
        let scheme = SlowScheme::constant(
            &config.mesh,
            config.a_eff,
            [c.f1.clone(), c.f2.clone()],
            config.dt,
            config.solver_tol,
        )?;
        let evaluator = AveragedAlphaEvaluator::new(c.alpha.clone(), c.dim(), config.y_points, config.order)?;
        let basis = config.noise.basis(&config.mesh)?;
        let marginal = invariant_marginal(&FieldPair::zeros(config.mesh), &config.noise, &basis)?;
        let variance = [0, 1].map(|i| marginal.variance[i].values().to_vec());
        Ok(AveragedSystem {
            config,
            scheme,
            evaluator,
            variance,
        })
    }

    pub fn config(&self) -> &AveragedRunConfig {
        &self.config
    }

    pub fn scheme(&self) -> &SlowScheme {
        &self.scheme
    }

    pub fn evaluator(&self) -> &AveragedAlphaEvaluator {
        &self.evaluator
    }

    /// Pointwise invariant variances `s_1, s_2` at the dofs.
    pub fn variances(&self) -> &[Vec<f64>; 2] {
        &self.variance
    }

    /// Ridge expectations at the arguments `beta u`, node by node.
    pub fn ridge_field(&self, u: &FieldPair) -> Result<Vec<f64>> {
        let c = &self.config.coeffs;
        (0..u.first.values().len())
            .map(|d| {
                let (x1, x2) = c.couple(u.first.values()[d], u.second.values()[d]);
                self.evaluator
                    .ridge_expectation(x1, x2, self.variance[0][d], self.variance[1][d])
            })
            .collect()
    }

    /// `abar(beta u)` at every node.
    pub fn alpha_field(&self, u: &FieldPair) -> Result<Vec<f64>> {
        Ok(self
            .ridge_field(u)?
            .into_iter()
            .map(|r| self.evaluator.from_ridge(r))
            .collect())
    }

    pub fn run(&self, observer: &mut dyn FnMut(StepView<'_>) -> Result<()>) -> Result<Trajectory> {
        let cfg = &self.config;
        let steps = step_count(cfg.t_end, cfg.dt)?;
        let mut u = cfg.u0.clone();
        let mut acc = DiagnosticsAccumulator::new(&u, None, cfg.dt);
        let mut records = cfg.record_steps.then(|| StepRecords {
            states: vec![u.clone()],
            diffused: Vec::new(),
            alpha: Vec::new(),
        });
        observer(StepView {
            step: 0,
            t: 0.0,
            u: &u,
            v: None,
        })?;
        for n in 0..steps {
            let a = self.alpha_field(&u)?;
            let t = (n + 1) as f64 * cfg.dt;
            let (next, diffused) = self.scheme.advance(&u, &a, t, n + 1)?;
            acc.push(&u, &next, None);
            u = next;
            if let Some(r) = records.as_mut() {
                r.states.push(u.clone());
                r.diffused.push(diffused);
                r.alpha.push(a);
            }
            observer(StepView {
                step: n + 1,
                t,
                u: &u,
                v: None,
            })?;
        }
        let mut times = vec![0.0];
        let mut states = vec![cfg.u0.clone()];
        if steps > 0 {
            times.push(steps as f64 * cfg.dt);
            states.push(u);
        }
        let diagnostics: Diagnostics = acc.finish();
        Ok(Trajectory {
            dt: cfg.dt,
            t_end: cfg.t_end,
            times,
            u: states,
            v: Vec::new(),
            diagnostics,
            flags: EstimateFlags {
                sup_l2: true,
                grad_integral: true,
                dudt_integral: true,
            },
            records,
        })
    }
}

pub fn solve_averaged(config: AveragedRunConfig) -> Result<Trajectory> {
    AveragedSystem::new(config)?.run(&mut |_| Ok(()))
}

/// `abar` on a rectangular grid of arguments at fixed variances.
pub fn alpha_table(
    evaluator: &AveragedAlphaEvaluator,
    xi1: &[f64],
    xi2: &[f64],
    s: [f64; 2],
) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::with_capacity(xi1.len() * xi2.len());
    for &a in xi1 {
        for &b in xi2 {
            out.push((a, b, evaluator.averaged_alpha(a, b, s[0], s[1])?));
        }
    }
    Ok(out)
}

/// The averaged field `abar` sampled as a nodal field, for reports.
pub fn alpha_bar_field(system: &AveragedSystem, u: &FieldPair) -> Result<ScalarField> {
    ScalarField::from_values(*u.mesh(), system.alpha_field(u)?)
}
