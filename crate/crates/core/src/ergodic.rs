//! Empirical checks of the ergodic behaviour of the fast pair: exponential
//! mixing, window time averages, and the three-term splitting of the
//! exchange-term error.

use serde::{Deserialize, Serialize};

use crate::avg::AveragedAlphaEvaluator;
use crate::coeffs::{AlphaSpec, CoefficientSet, FieldSpec};
use crate::error::{Error, Result};
use crate::fastsde::{
    invariant_marginal, ou_step, sample_invariant, Drivers, InvariantMarginal, ModeBasis, OUState, SpectralNoise,
};
use crate::grid::testfn::TimeProfile;
use crate::grid::{FieldPair, Mesh, ScalarField};
use crate::par::{self, Execution};
use crate::rng::{self, Role};
use crate::slowpde::Trajectory;

/// Lipschitz functionals on `L^2(D)^2` with known constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhiSpec {
    Constant { c: f64 },
    /// `<v_1, w_1> + <v_2, w_2>`, optionally clipped to `[-clip, clip]`.
    Linear {
        w1: FieldSpec,
        w2: FieldSpec,
        #[serde(default)]
        clip: Option<f64>,
    },
    /// `int_D int_Y alpha(y, v_1(x), v_2(x)) dy w(x) dx`.
    AlphaComposition { w: FieldSpec },
}

#[derive(Clone, Debug)]
enum Compiled {
    Constant(f64),
    Linear { w: [Vec<f64>; 2], clip: Option<f64> },
    Alpha { w: Vec<f64>, evaluator: Box<AveragedAlphaEvaluator> },
}

/// A [`PhiSpec`] sampled on a mesh.
#[derive(Clone, Debug)]
pub struct Functional {
    mesh: Mesh,
    compiled: Compiled,
}

fn sample(mesh: Mesh, f: &FieldSpec) -> Vec<f64> {
    ScalarField::from_fn(mesh, |x| f.eval(0.0, x)).into_values()
}

impl Functional {
    pub fn new(spec: &PhiSpec, mesh: Mesh, alpha: Option<&AlphaSpec>) -> Result<Self> {
        let compiled = match spec {
            PhiSpec::Constant { c } => Compiled::Constant(*c),
            PhiSpec::Linear { w1, w2, clip } => {
                if let Some(c) = clip {
                    if !(*c > 0.0) {
                        return Err(Error::invalid("clip level must be > 0"));
                    }
                }
                Compiled::Linear {
                    w: [sample(mesh, w1), sample(mesh, w2)],
                    clip: *clip,
                }
            }
            PhiSpec::AlphaComposition { w } => {
                let alpha = alpha.ok_or_else(|| Error::invalid("alpha composition needs an alpha family"))?;
                Compiled::Alpha {
                    w: sample(mesh, w),
                    evaluator: Box::new(AveragedAlphaEvaluator::with_defaults(alpha.clone(), mesh.dim())?),
                }
            }
        };
        Ok(Functional { mesh, compiled })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn eval(&self, v: &FieldPair) -> f64 {
        let vol = self.mesh.cell_volume();
        match &self.compiled {
            Compiled::Constant(c) => *c,
            Compiled::Linear { w, clip } => {
                let s = vol
                    * (0..2)
                        .map(|i| v.get(i).values().iter().zip(&w[i]).map(|(a, b)| a * b).sum::<f64>())
                        .sum::<f64>();
                clip.map_or(s, |c| s.clamp(-c, c))
            }
            Compiled::Alpha { w, evaluator } => {
                let (a, b) = (v.first.values(), v.second.values());
                vol * w
                    .iter()
                    .enumerate()
                    .map(|(d, wd)| wd * evaluator.averaged_alpha(a[d], b[d], 0.0, 0.0).unwrap_or(f64::NAN))
                    .sum::<f64>()
            }
        }
    }

    /// Lipschitz constant `[Phi]` with respect to the `L^2(D)^2` norm.
    pub fn lipschitz(&self) -> f64 {
        let vol = self.mesh.cell_volume();
        let l2 = |w: &[f64]| (vol * w.iter().map(|x| x * x).sum::<f64>()).sqrt();
        match &self.compiled {
            Compiled::Constant(_) => 0.0,
            Compiled::Linear { w, .. } => l2(&w[0]).hypot(l2(&w[1])),
            Compiled::Alpha { w, evaluator } => {
                let f = evaluator.alpha().factors();
                let g = f.profile.map_or(0.0, |p| p.sup_abs());
                let h = f.ridge.map_or(0.0, |r| r.lipschitz());
                f.scale.abs() * g * h * l2(w)
            }
        }
    }

    /// `sup |Phi|`, infinite for unclipped linear probes.
    pub fn sup(&self) -> f64 {
        let vol = self.mesh.cell_volume();
        match &self.compiled {
            Compiled::Constant(c) => c.abs(),
            Compiled::Linear { clip, .. } => clip.unwrap_or(f64::INFINITY),
            Compiled::Alpha { w, evaluator } => {
                evaluator.alpha().bound() * vol * w.iter().map(|x| x.abs()).sum::<f64>()
            }
        }
    }

    /// `int Phi dmu` in closed form when available: the Gaussian mean for
    /// unclipped linear probes, Gauss-Hermite for alpha compositions.
    pub fn invariant_expectation(&self, marginal: &InvariantMarginal) -> Option<f64> {
        match &self.compiled {
            Compiled::Constant(c) => Some(*c),
            Compiled::Linear { clip: None, .. } => Some(self.eval(&marginal.mean)),
            Compiled::Linear { .. } => None,
            Compiled::Alpha { w, evaluator } => {
                let vol = self.mesh.cell_volume();
                let (m1, m2) = (marginal.mean.first.values(), marginal.mean.second.values());
                let (s1, s2) = (marginal.variance[0].values(), marginal.variance[1].values());
                let mut acc = 0.0;
                for d in 0..w.len() {
                    acc += w[d] * evaluator.averaged_alpha(m1[d], m2[d], s1[d], s2[d]).ok()?;
                }
                Some(vol * acc)
            }
        }
    }

    /// Whether `E Phi(v(t))` is available in closed form.
    fn is_affine(&self) -> bool {
        matches!(self.compiled, Compiled::Constant(_) | Compiled::Linear { clip: None, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapMethod {
    /// Closed forms where the functional allows, Monte Carlo otherwise.
    Auto,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapEstimate {
    /// Fast time.
    pub t: f64,
    pub gap: f64,
    /// One standard error of the signed difference (zero for closed forms).
    pub half_width: f64,
    pub transition_mean: f64,
    pub invariant_mean: f64,
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

/// `|E Phi(v^{xi,eta}(t)) - int Phi dmu^xi|` for the unit-rate fast process.
#[allow(clippy::too_many_arguments)]
pub fn mixing_gap(
    phi: &Functional,
    xi: &FieldPair,
    eta: &FieldPair,
    t: f64,
    noise: &SpectralNoise,
    basis: &ModeBasis,
    replicas: usize,
    seed: u64,
    method: GapMethod,
    exec: Execution,
) -> Result<GapEstimate> {
    if replicas < 100 {
        return Err(Error::invalid(format!("mixing gap needs >= 100 replicas, got {replicas}")));
    }
    if !(t >= 0.0) {
        return Err(Error::invalid("probe time must be >= 0"));
    }
    let marginal = invariant_marginal(xi, noise, basis)?;
    if method == GapMethod::Auto && phi.is_affine() {
        let mut m = xi.clone();
        let decay = (-t).exp();
        for i in 0..2 {
            let e = eta.get(i).values();
            for (o, (a, b)) in m.get_mut(i).values_mut().iter_mut().zip(e.iter().zip(xi.get(i).values())) {
                *o = b + (a - b) * decay;
            }
        }
        let (et, einv) = if t == 0.0 {
            (phi.eval(eta), phi.eval(xi))
        } else {
            (phi.eval(&m), phi.eval(xi))
        };
        return Ok(GapEstimate {
            t,
            gap: (et - einv).abs(),
            half_width: 0.0,
            transition_mean: et,
            invariant_mean: einv,
        });
    }
    let transitions: Vec<f64> = if t == 0.0 {
        vec![phi.eval(eta); replicas]
    } else {
        par::map_indexed(exec, replicas, |r| {
            let mut state = OUState::new(eta.clone(), basis).expect("basis mesh");
            let mut drv = Drivers::new(rng::derive_seed(seed, Role::Mixing, 0), r as u64);
            ou_step(&mut state, xi, t, 1.0, noise, basis, &mut drv).expect("validated step");
            phi.eval(state.nodal())
        })
    };
    let invariant: Vec<f64> = par::map_indexed(exec, replicas, |r| {
        let mut drv = Drivers::new(rng::derive_seed(seed, Role::Invariant, 0), r as u64);
        phi.eval(&sample_invariant(&marginal, &mut drv))
    });
    let (mt, vt) = if t == 0.0 { (transitions[0], 0.0) } else { mean_and_var(&transitions) };
    let (mi, vi) = mean_and_var(&invariant);
    Ok(GapEstimate {
        t,
        gap: (mt - mi).abs(),
        half_width: ((vt + vi) / replicas as f64).sqrt(),
        transition_mean: mt,
        invariant_mean: mi,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingReport {
    pub gaps: Vec<GapEstimate>,
    /// `-d log(gap) / dt` by least squares.
    pub rate: f64,
    /// Smallest `c` with `gap <= c [Phi] e^{-t} (1 + |eta| + |xi|)` on the grid.
    pub fitted_constant: f64,
    pub lipschitz: f64,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[allow(clippy::too_many_arguments)]
pub fn mixing_report(
    phi: &Functional,
    xi: &FieldPair,
    eta: &FieldPair,
    times: &[f64],
    noise: &SpectralNoise,
    basis: &ModeBasis,
    replicas: usize,
    seed: u64,
    method: GapMethod,
    exec: Execution,
) -> Result<MixingReport> {
    if times.len() < 2 {
        return Err(Error::invalid("rate fit needs at least two probe times"));
    }
    let gaps = times
        .iter()
        .map(|&t| mixing_gap(phi, xi, eta, t, noise, basis, replicas, seed, method, exec))
        .collect::<Result<Vec<_>>>()?;
    let lip = phi.lipschitz();
    let scale = lip * (1.0 + eta.l2_norm() + xi.l2_norm());
    let fitted_constant = if scale > 0.0 {
        gaps.iter().map(|g| g.gap * g.t.exp() / scale).fold(0.0, f64::max)
    } else {
        0.0
    };
    let usable: Vec<&GapEstimate> = gaps.iter().filter(|g| g.gap > 0.0).collect();
    let rate = if usable.len() >= 2 {
        let x: Vec<f64> = usable.iter().map(|g| g.t).collect();
        let y: Vec<f64> = usable.iter().map(|g| g.gap.ln()).collect();
        -fit_slope(&x, &y)
    } else {
        f64::NAN
    };
    Ok(MixingReport {
        gaps,
        rate,
        fitted_constant,
        lipschitz: lip,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowEstimate {
    pub epsilon: f64,
    pub delta: f64,
    /// `|(1/delta) int Phi(v) ds - int Phi dmu|`.
    pub error: f64,
    pub time_average: f64,
    pub invariant_average: f64,
    /// `(1 + |eta| + |xi|) sup|Phi| sqrt(eps / delta)`, the bound's shape with `c = 1`.
    pub bound_shape: f64,
}

/// Window time average of `Phi` along the `eps`-scaled fast process with `xi`
/// frozen, started from `eta`, against the invariant average.
#[allow(clippy::too_many_arguments)]
pub fn window_average_error(
    phi: &Functional,
    xi: &FieldPair,
    eta: &FieldPair,
    epsilon: f64,
    delta: f64,
    max_dt: f64,
    noise: &SpectralNoise,
    basis: &ModeBasis,
    drivers: &mut Drivers,
    invariant_samples: usize,
) -> Result<WindowEstimate> {
    if !(delta > 0.0) || !(epsilon > 0.0) || !(max_dt > 0.0) {
        return Err(Error::invalid("window needs delta, epsilon, dt > 0"));
    }
    let steps = (delta / max_dt).ceil().max(1.0) as usize;
    let dt = delta / steps as f64;
    let mut state = OUState::new(eta.clone(), basis)?;
    let mut prev = phi.eval(state.nodal());
    let mut integral = 0.0;
    for _ in 0..steps {
        ou_step(&mut state, xi, dt, epsilon, noise, basis, drivers)?;
        let next = phi.eval(state.nodal());
        integral += 0.5 * dt * (prev + next);
        prev = next;
    }
    let marginal = invariant_marginal(xi, noise, basis)?;
    let inv = match phi.invariant_expectation(&marginal) {
        Some(v) => v,
        None => {
            if invariant_samples == 0 {
                return Err(Error::invalid("functional needs Monte Carlo samples for its invariant average"));
            }
            (0..invariant_samples)
                .map(|_| phi.eval(&sample_invariant(&marginal, drivers)))
                .sum::<f64>()
                / invariant_samples as f64
        }
    };
    let avg = integral / delta;
    Ok(WindowEstimate {
        epsilon,
        delta,
        error: (avg - inv).abs(),
        time_average: avg,
        invariant_average: inv,
        bound_shape: (1.0 + eta.l2_norm() + xi.l2_norm()) * phi.sup() * (epsilon / delta).sqrt(),
    })
}

/// Window error with `xi = beta u(t_0)` and `eta = v(t_0)` read from a
/// trajectory checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn window_average_error_at(
    phi: &Functional,
    traj: &Trajectory,
    checkpoint: usize,
    coeffs: &CoefficientSet,
    epsilon: f64,
    delta: f64,
    max_dt: f64,
    noise: &SpectralNoise,
    basis: &ModeBasis,
    drivers: &mut Drivers,
    invariant_samples: usize,
) -> Result<WindowEstimate> {
    let t0 = *traj
        .times
        .get(checkpoint)
        .ok_or_else(|| Error::invalid(format!("no checkpoint {checkpoint}")))?;
    if t0 + delta > traj.t_end + 1e-12 {
        return Err(Error::invalid(format!(
            "window [{t0}, {}] exceeds the trajectory end {}",
            t0 + delta,
            traj.t_end
        )));
    }
    let u = &traj.u[checkpoint];
    let eta = traj
        .v
        .get(checkpoint)
        .ok_or_else(|| Error::invalid("trajectory carries no fast state"))?;
    let mut xi = FieldPair::zeros(*u.mesh());
    for d in 0..u.first.values().len() {
        let (a, b) = coeffs.couple(u.first.values()[d], u.second.values()[d]);
        xi.first.values_mut()[d] = a;
        xi.second.values_mut()[d] = b;
    }
    window_average_error(phi, &xi, eta, epsilon, delta, max_dt, noise, basis, drivers, invariant_samples)
}

/// The three-term splitting of the exchange-term error and its direct value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SDecomposition {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    /// The undecomposed integral.
    pub total: f64,
}

impl SDecomposition {
    pub fn sum(&self) -> f64 {
        self.s1 + self.s2 + self.s3
    }

    /// `|total - (s1 + s2 + s3)|`.
    pub fn defect(&self) -> f64 {
        (self.total - self.sum()).abs()
    }
}

/// Step-by-step accumulation of [`SDecomposition`] with the right-endpoint
/// rule `sum_n dt psi(t_n) h^d sum_x (...)`.
pub struct SAccumulator<'a> {
    evaluator: &'a AveragedAlphaEvaluator,
    coeffs: &'a CoefficientSet,
    variances: &'a [Vec<f64>; 2],
    phi: &'a ScalarField,
    cell_points: Vec<Vec<f64>>,
    psi: TimeProfile,
    t_end: f64,
    dt: f64,
    acc: SDecomposition,
}

impl<'a> SAccumulator<'a> {
    /// `phi` is the (possibly corrector-augmented) test field and `variances`
    /// the invariant pointwise variances at the dofs.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        evaluator: &'a AveragedAlphaEvaluator,
        coeffs: &'a CoefficientSet,
        variances: &'a [Vec<f64>; 2],
        phi: &'a ScalarField,
        epsilon: f64,
        psi: TimeProfile,
        t_end: f64,
        dt: f64,
    ) -> Self {
        let mesh = phi.mesh();
        let d = mesh.dim();
        let cell_points = (0..mesh.ndof())
            .map(|k| mesh.dof_coords(k)[..d].iter().map(|x| x / epsilon).collect())
            .collect();
        SAccumulator {
            evaluator,
            coeffs,
            variances,
            phi,
            cell_points,
            psi,
            t_end,
            dt,
            acc: SDecomposition::default(),
        }
    }

    /// Ridge expectations `E h` at the arguments `beta u`.
    pub fn ridge(&self, u: &FieldPair) -> Result<Vec<f64>> {
        (0..u.first.values().len())
            .map(|d| {
                let (x1, x2) = self.coeffs.couple(u.first.values()[d], u.second.values()[d]);
                self.evaluator
                    .ridge_expectation(x1, x2, self.variances[0][d], self.variances[1][d])
            })
            .collect()
    }

    /// Add the step ending at `t`: the states `u_eps`, `u_bar` at `t`, the
    /// frozen rate `a_eps` of the step, and the ridge expectations at the
    /// slow arguments the two schemes froze for that step.
    pub fn push(
        &mut self,
        t: f64,
        u_eps: &FieldPair,
        a_eps: &[f64],
        ridge_eps: &[f64],
        u_bar: &FieldPair,
        ridge_bar: &[f64],
    ) -> Result<()> {
        u_eps.mesh().same_as(self.phi.mesh())?;
        u_bar.mesh().same_as(self.phi.mesh())?;
        let n = self.phi.values().len();
        if a_eps.len() != n || ridge_bar.len() != n || ridge_eps.len() != n {
            return Err(Error::MeshMismatch("rate field length differs from the dof count".into()));
        }
        let w = self.dt * self.psi.eval(t, self.t_end) * self.phi.mesh().cell_volume();
        let (mut s1, mut s2, mut s3, mut tot) = (0.0, 0.0, 0.0, 0.0);
        for d in 0..a_eps.len() {
            let y = &self.cell_points[d];
            let de = u_eps.second.values()[d] - u_eps.first.values()[d];
            let db = u_bar.second.values()[d] - u_bar.first.values()[d];
            let abar_eps_e = self.evaluator.pointwise_from_ridge(y, ridge_eps[d]);
            let abar_eps_b = self.evaluator.pointwise_from_ridge(y, ridge_bar[d]);
            let abar_b = self.evaluator.from_ridge(ridge_bar[d]);
            let p = self.phi.values()[d];
            s1 += (a_eps[d] * de - abar_eps_e * de) * p;
            s2 += (abar_eps_e * de - abar_eps_b * db) * p;
            s3 += (abar_eps_b * db - abar_b * db) * p;
            tot += (a_eps[d] * de - abar_b * db) * p;
        }
        self.acc.s1 += w * s1;
        self.acc.s2 += w * s2;
        self.acc.s3 += w * s3;
        self.acc.total += w * tot;
        Ok(())
    }

    pub fn finish(self) -> SDecomposition {
        self.acc
    }
}

/// Splitting evaluated on two recorded trajectories on a common grid.
#[allow(clippy::too_many_arguments)]
pub fn s_decomposition(
    eps_run: &Trajectory,
    avg_run: &Trajectory,
    phi: &ScalarField,
    psi: TimeProfile,
    evaluator: &AveragedAlphaEvaluator,
    coeffs: &CoefficientSet,
    variances: &[Vec<f64>; 2],
    epsilon: f64,
) -> Result<SDecomposition> {
    let (Some(re), Some(ra)) = (eps_run.records.as_ref(), avg_run.records.as_ref()) else {
        return Err(Error::invalid("splitting needs runs with recorded steps"));
    };
    if re.states.len() != ra.states.len() || (eps_run.dt - avg_run.dt).abs() > 0.0 {
        return Err(Error::MeshMismatch("runs use different time grids".into()));
    }
    let mut acc = SAccumulator::new(evaluator, coeffs, variances, phi, epsilon, psi, eps_run.t_end, eps_run.dt);
    for n in 0..re.alpha.len() {
        let t = (n + 1) as f64 * eps_run.dt;
        let ridge_eps = acc.ridge(&re.states[n])?;
        let ridge_bar = acc.ridge(&ra.states[n])?;
        acc.push(t, &re.states[n + 1], &re.alpha[n], &ridge_eps, &ra.states[n + 1], &ridge_bar)?;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avg::{AveragedRunConfig, AveragedSystem};
    use crate::coeffs::{families, Profile, Saturation, TensorSpec};
    use crate::slowpde::{sample_pair, EpsilonRunConfig, EpsilonSystem};
    use std::f64::consts::PI;

    fn mesh() -> Mesh {
        Mesh::dirichlet(1, 32).unwrap()
    }

    fn linear(clip: Option<f64>) -> PhiSpec {
        PhiSpec::Linear {
            w1: FieldSpec::sine(2f64.sqrt(), vec![1], 0.0),
            w2: FieldSpec::sine(1.0, vec![2], 0.0),
            clip,
        }
    }

    fn pair(m: Mesh, a: f64, b: f64) -> FieldPair {
        sample_pair(m, &FieldSpec::sine(a, vec![1], 0.0), &FieldSpec::sine(b, vec![1], 0.0), 0.0)
    }

    #[test]
    fn gap_examples() {
        let m = mesh();
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let basis = noise.basis(&m).unwrap();
        let phi = Functional::new(&linear(None), m, None).unwrap();
        let xi = pair(m, 0.5, -0.3);
        let eta = pair(m, 2.0, 1.0);
        let exec = Execution::Sequential;
        let g0 = mixing_gap(&phi, &xi, &eta, 0.0, &noise, &basis, 100, 1, GapMethod::Auto, exec).unwrap();
        assert_eq!(g0.gap, (phi.eval(&eta) - phi.eval(&xi)).abs());
        for t in [0.0, 0.5, 2.0] {
            let g = mixing_gap(&phi, &xi, &xi, t, &noise, &basis, 100, 1, GapMethod::Auto, exec).unwrap();
            assert!(g.gap < 1e-15, "{g:?}");
            let c = Functional::new(&PhiSpec::Constant { c: 3.0 }, m, None).unwrap();
            let g = mixing_gap(&c, &xi, &eta, t, &noise, &basis, 100, 1, GapMethod::MonteCarlo, exec).unwrap();
            assert_eq!(g.gap, 0.0);
        }
        assert!(mixing_gap(&phi, &xi, &eta, 1.0, &noise, &basis, 99, 1, GapMethod::Auto, exec).is_err());
    }

    #[test]
    fn monte_carlo_rate_near_one() {
        let m = mesh();
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let basis = noise.basis(&m).unwrap();
        let phi = Functional::new(&linear(None), m, None).unwrap();
        let xi = pair(m, 0.5, 0.0);
        let eta = pair(m, 5.0, 3.0);
        let times = [0.5, 1.0, 1.5, 2.0, 2.5];
        let rep = mixing_report(&phi, &xi, &eta, &times, &noise, &basis, 2000, 3, GapMethod::MonteCarlo, Execution::default())
            .unwrap();
        assert!((0.8..1.2).contains(&rep.rate), "{rep:?}");
        for g in &rep.gaps {
            assert!(g.gap >= 0.0);
            let bound = rep.fitted_constant * rep.lipschitz * (-g.t).exp() * (1.0 + eta.l2_norm() + xi.l2_norm());
            assert!(g.gap <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn synchronous_coupling_bound_on_gaps() {
        let m = mesh();
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let basis = noise.basis(&m).unwrap();
        let alpha = families::mixed_alpha();
        let phi = Functional::new(
            &PhiSpec::AlphaComposition {
                w: FieldSpec::sine(1.0, vec![1], 0.0),
            },
            m,
            Some(&alpha),
        )
        .unwrap();
        let xi = pair(m, 0.2, -0.1);
        let (e1, e2) = (pair(m, 1.0, 0.0), pair(m, -1.0, 0.5));
        for t in [0.25, 1.0] {
            let exec = Execution::default();
            let a = mixing_gap(&phi, &xi, &e1, t, &noise, &basis, 500, 8, GapMethod::MonteCarlo, exec).unwrap();
            let b = mixing_gap(&phi, &xi, &e2, t, &noise, &basis, 500, 8, GapMethod::MonteCarlo, exec).unwrap();
            let bound = phi.lipschitz() * e1.sub(&e2).unwrap().l2_norm() * (-t).exp();
            assert!((a.gap - b.gap).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn window_examples() {
        let m = mesh();
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let basis = noise.basis(&m).unwrap();
        let xi = pair(m, 0.7, 0.2);
        let c = Functional::new(&PhiSpec::Constant { c: 2.0 }, m, None).unwrap();
        let mut drv = Drivers::new(1, 0);
        let w = window_average_error(&c, &xi, &xi, 0.1, 0.3, 0.01, &noise, &basis, &mut drv, 0).unwrap();
        assert!(w.error < 1e-15);
        let quiet = SpectralNoise::zero(1, 16).unwrap();
        let phi = Functional::new(
            &PhiSpec::AlphaComposition {
                w: FieldSpec::sine(1.0, vec![1], 0.0),
            },
            m,
            Some(&families::mixed_alpha()),
        )
        .unwrap();
        let w = window_average_error(&phi, &xi, &xi, 0.1, 0.3, 0.01, &quiet, &basis, &mut drv, 0).unwrap();
        assert!(w.error < 1e-14, "{w:?}");
        let clipped = Functional::new(&linear(Some(0.5)), m, None).unwrap();
        assert!(window_average_error(&clipped, &xi, &xi, 0.1, 0.3, 0.01, &noise, &basis, &mut drv, 0).is_err());
        assert!(window_average_error(&clipped, &xi, &xi, 0.1, 0.3, 0.01, &noise, &basis, &mut drv, 200).is_ok());
    }

    #[test]
    fn alpha_composition_invariant_mean_matches_sampling() {
        let m = mesh();
        let noise = SpectralNoise::new(1, [1.0, 0.5], 2.0, 16).unwrap();
        let basis = noise.basis(&m).unwrap();
        let alpha = families::mixed_alpha();
        let phi = Functional::new(
            &PhiSpec::AlphaComposition {
                w: FieldSpec::sine(1.0, vec![1], 0.0),
            },
            m,
            Some(&alpha),
        )
        .unwrap();
        let xi = pair(m, 0.4, -0.4);
        let marginal = invariant_marginal(&xi, &noise, &basis).unwrap();
        let exact = phi.invariant_expectation(&marginal).unwrap();
        let mut drv = Drivers::new(4, 0);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| phi.eval(&sample_invariant(&marginal, &mut drv))).collect();
        let (mean, var) = mean_and_var(&xs);
        assert!((mean - exact).abs() < 4.0 * (var / n as f64).sqrt(), "{mean} {exact}");
    }

    #[test]
    fn window_error_from_trajectory_checkpoint() {
        let m = mesh();
        let mut coeffs = families::identity_set(1);
        coeffs.alpha = families::mixed_alpha();
        coeffs.beta = [[1.0, 0.0], [0.0, 1.0]];
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let u0 = pair(m, 1.0, 0.5);
        let mut cfg = EpsilonRunConfig::new(0.05, m, 0.4, 0.01, coeffs.clone(), noise.clone(), u0);
        cfg.checkpoints = vec![0.1];
        let sys = EpsilonSystem::new(cfg).unwrap();
        let traj = sys.run(&mut |_| Ok(())).unwrap();
        let phi = Functional::new(&linear(None), m, None).unwrap();
        let mut drv = Drivers::new(2, 0);
        let w = window_average_error_at(&phi, &traj, 1, &coeffs, 0.05, 0.2, 0.005, &noise, sys.basis(), &mut drv, 0).unwrap();
        assert!(w.error.is_finite());
        assert!(window_average_error_at(&phi, &traj, 1, &coeffs, 0.05, 0.35, 0.005, &noise, sys.basis(), &mut drv, 0).is_err());
    }

    fn runs(
        alpha: AlphaSpec,
        noise: SpectralNoise,
        beta: [[f64; 2]; 2],
        eps: f64,
    ) -> (EpsilonSystem, Trajectory, AveragedSystem, Trajectory, CoefficientSet) {
        let m = mesh();
        let coeffs = CoefficientSet::new(TensorSpec::Identity { dim: 1 }, TensorSpec::Identity { dim: 1 }, alpha, beta).unwrap();
        let u0 = sample_pair(m, &FieldSpec::sine(1.0, vec![1], 0.0), &FieldSpec::sine(0.3, vec![2], 0.0), 0.0);
        let mut cfg = EpsilonRunConfig::new(eps, m, 0.1, 0.01, coeffs.clone(), noise.clone(), u0.clone());
        cfg.record_steps = true;
        cfg.seed = 5;
        let sys = EpsilonSystem::new(cfg).unwrap();
        let te = sys.run(&mut |_| Ok(())).unwrap();
        let eye = crate::coeffs::SmallMatrix::identity(1);
        let mut acfg = AveragedRunConfig::new(m, 0.1, 0.01, coeffs.clone(), [eye, eye], noise, u0);
        acfg.record_steps = true;
        let asys = AveragedSystem::new(acfg).unwrap();
        let ta = asys.run(&mut |_| Ok(())).unwrap();
        (sys, te, asys, ta, coeffs)
    }

    #[test]
    fn splitting_identity_and_constant_alpha() {
        let noise = SpectralNoise::new(1, [1.0, 1.0], 2.0, 16).unwrap();
        let phi = ScalarField::from_fn(mesh(), |x| (PI * x[0]).sin());
        let (_, te, asys, ta, coeffs) = runs(families::mixed_alpha(), noise.clone(), [[1.0, 0.0], [0.0, 1.0]], 0.1);
        let s = s_decomposition(&te, &ta, &phi, TimeProfile::HalfSine, asys.evaluator(), &coeffs, asys.variances(), 0.1)
            .unwrap();
        assert!(s.defect() < 1e-12, "{s:?}");
        assert!(s.s1 != 0.0 && s.s3 != 0.0);

        let (_, te, asys, ta, coeffs) = runs(AlphaSpec::Constant { c: 1.5 }, noise, [[1.0, 0.0], [0.0, 1.0]], 0.1);
        let s = s_decomposition(&te, &ta, &phi, TimeProfile::Constant, asys.evaluator(), &coeffs, asys.variances(), 0.1)
            .unwrap();
        assert_eq!((s.s1, s.s3), (0.0, 0.0));
        // s2 reduces to c times the integrated difference of the exchange gaps
        let re = te.records.as_ref().unwrap();
        let ra = ta.records.as_ref().unwrap();
        let mut want = 0.0;
        for n in 1..re.states.len() {
            let d = re.states[n].second.sub(&re.states[n].first).unwrap();
            let db = ra.states[n].second.sub(&ra.states[n].first).unwrap();
            want += 0.01 * 1.5 * d.sub(&db).unwrap().weak_pairing(&phi).unwrap();
        }
        assert!((s.s2 - want).abs() < 1e-13);
    }

    #[test]
    fn identical_runs_have_zero_s2() {
        let alpha = AlphaSpec::SmoothMixed {
            c0: 2.0,
            c1: 1.0,
            p: Profile::constant(1.0),
            s: Saturation::tanh(1.0, -1.0, 0.0),
        };
        let quiet = SpectralNoise::zero(1, 16).unwrap();
        let (_, te, asys, ta, coeffs) = runs(alpha, quiet, [[0.0; 2]; 2], 0.1);
        let phi = ScalarField::from_fn(mesh(), |x| (PI * x[0]).sin());
        let s = s_decomposition(&te, &ta, &phi, TimeProfile::Constant, asys.evaluator(), &coeffs, asys.variances(), 0.1)
            .unwrap();
        assert!(s.s2.abs() < 1e-14, "{s:?}");
    }
}
