//! Time stepping of the coupled slow-fast system at a fixed scale `eps`.
//!
//! One step from `t_n` to `t_{n+1}`:
//!
//! 1. `xi = beta u^n` is frozen;
//! 2. the fast pair is advanced exactly towards `xi`;
//! 3. `a(x) = alpha(x/eps, v_1(x), v_2(x))` is frozen;
//! 4. each continuum is diffused by backward Euler, `(I + dt L_i) w_i = u_i^n`;
//! 5. the exchange is solved pointwise,
//!    `[[1 + dt a, -dt a], [-dt a, 1 + dt a]] u^{n+1} = w + dt f(t_{n+1})`.

use crate::coeffs::{CoefficientSet, FieldSpec, SmallMatrix, TensorSpec};
use crate::error::{Error, Result};
use crate::fastsde::{ou_step, Drivers, ModeBasis, OUState, SpectralNoise};
use crate::grid::testfn::{Bump, TimeProfile};
use crate::grid::{assemble_diffusion, Boundary, DiffusionOperator, FieldPair, Mesh, ScalarField};
use crate::linalg::{bicgstab, IterativeOptions, SpdSolver};

/// Default relative tolerance of the diffusion solves.
pub const SOLVER_TOL: f64 = 1e-10;

/// Sample a pair of space-time fields at time `t`.
pub fn sample_pair(mesh: Mesh, f1: &FieldSpec, f2: &FieldSpec, t: f64) -> FieldPair {
    FieldPair {
        first: ScalarField::from_fn(mesh, |x| f1.eval(t, x)),
        second: ScalarField::from_fn(mesh, |x| f2.eval(t, x)),
    }
}

/// Number of steps of size `dt` covering `[0, t_end]`.
pub fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step {dt} must be > 0")));
    }
    if !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::invalid(format!("final time {t_end} must be >= 0")));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return Err(Error::invalid(format!("dt = {dt} does not divide T = {t_end}")));
    }
    Ok(n as usize)
}

/// Caps mirroring the uniform a priori estimates; `None` disables a check.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateCaps {
    pub sup_l2: Option<f64>,
    pub grad_integral: Option<f64>,
    pub dudt_integral: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonRunConfig {
    pub epsilon: f64,
    pub mesh: Mesh,
    pub t_end: f64,
    pub dt: f64,
    pub coeffs: CoefficientSet,
    pub noise: SpectralNoise,
    pub u0: FieldPair,
    pub v0: FieldPair,
    pub seed: u64,
    pub replica: u64,
    /// Extra checkpoint times; `0` and `T` are always recorded.
    pub checkpoints: Vec<f64>,
    pub caps: EstimateCaps,
    /// Keep the per-step data needed by [`weak_residual`].
    pub record_steps: bool,
    pub solver_tol: f64,
}

impl EpsilonRunConfig {
    /// Run with zero fast initial data, no extra checkpoints and no caps.
    pub fn new(
        epsilon: f64,
        mesh: Mesh,
        t_end: f64,
        dt: f64,
        coeffs: CoefficientSet,
        noise: SpectralNoise,
        u0: FieldPair,
    ) -> Self {
        EpsilonRunConfig {
            epsilon,
            mesh,
            t_end,
            dt,
            coeffs,
            noise,
            v0: FieldPair::zeros(mesh),
            u0,
            seed: 0,
            replica: 0,
            checkpoints: Vec::new(),
            caps: EstimateCaps::default(),
            record_steps: false,
            solver_tol: SOLVER_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if self.mesh.boundary() != Boundary::Dirichlet {
            return Err(Error::invalid("the physical mesh must be Dirichlet"));
        }
        if self.coeffs.dim() != self.mesh.dim() || self.noise.dim() != self.mesh.dim() {
            return Err(Error::MeshMismatch("coefficient, noise and mesh dimensions differ".into()));
        }
        self.coeffs.check()?;
        step_count(self.t_end, self.dt)?;
        for f in [&self.u0, &self.v0] {
            f.mesh().same_as(&self.mesh)?;
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::invalid("solver tolerance must be > 0"));
        }
        checkpoint_steps(&self.checkpoints, self.t_end, self.dt)?;
        Ok(())
    }
}

/// Step indices of `{0} + extra + {T}`.
fn checkpoint_steps(extra: &[f64], t_end: f64, dt: f64) -> Result<Vec<usize>> {
    let n = step_count(t_end, dt)?;
    let mut out = vec![0usize];
    let mut prev = f64::NEG_INFINITY;
    for &t in extra {
        if !(t >= 0.0 && t <= t_end) {
            return Err(Error::invalid(format!("checkpoint {t} outside [0, {t_end}]")));
        }
        if t <= prev {
            return Err(Error::invalid("checkpoint times must be strictly increasing"));
        }
        prev = t;
        let k = (t / dt).round() as usize;
        if *out.last().unwrap() != k {
            out.push(k);
        }
    }
    if *out.last().unwrap() != n {
        out.push(n);
    }
    Ok(out)
}

/// Solver for `(I + dt L) w = b`.
#[derive(Clone, Debug)]
enum ShiftedSolver {
    Spd(SpdSolver),
    General { matrix: crate::linalg::CsrMatrix, tol: f64 },
}

impl ShiftedSolver {
    fn solve(&self, b: &[f64], x: &mut [f64]) -> Result<usize> {
        match self {
            ShiftedSolver::Spd(s) => s.solve(b, x).map(|s| s.iterations),
            ShiftedSolver::General { matrix, tol } => {
                bicgstab(matrix, b, x, IterativeOptions::new(*tol, matrix.n())).map(|s| s.iterations)
            }
        }
    }
}

/// Implicit diffusion and exchange on a fixed mesh and time step.
#[derive(Clone, Debug)]
pub struct SlowScheme {
    mesh: Mesh,
    dt: f64,
    ops: [DiffusionOperator; 2],
    solvers: [ShiftedSolver; 2],
    forcing: [FieldSpec; 2],
}

impl SlowScheme {
    pub fn new(ops: [DiffusionOperator; 2], forcing: [FieldSpec; 2], dt: f64, tol: f64) -> Result<Self> {
        let mesh = *ops[0].mesh();
        ops[1].mesh().same_as(&mesh)?;
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("time step {dt} must be > 0")));
        }
        let solvers = [0, 1].map(|i| {
            let m = ops[i].matrix().shifted(1.0, dt);
            if ops[i].is_symmetric() {
                ShiftedSolver::Spd(SpdSolver::new(m, tol, true))
            } else {
                ShiftedSolver::General { matrix: m, tol }
            }
        });
        Ok(SlowScheme {
            mesh,
            dt,
            ops,
            solvers,
            forcing,
        })
    }

    /// Operators for tensors sampled at `x / epsilon`.
    pub fn oscillating(
        mesh: &Mesh,
        tensors: [&TensorSpec; 2],
        epsilon: f64,
        forcing: [FieldSpec; 2],
        dt: f64,
        tol: f64,
    ) -> Result<Self> {
        let build = |t: &TensorSpec| {
            assemble_diffusion(mesh, &|x: &[f64]| {
                let y: Vec<f64> = x.iter().map(|xi| xi / epsilon).collect();
                t.eval_periodic(&y)
            })
        };
        Self::new([build(tensors[0])?, build(tensors[1])?], forcing, dt, tol)
    }

    /// Operators for constant tensors.
    pub fn constant(mesh: &Mesh, tensors: [SmallMatrix; 2], forcing: [FieldSpec; 2], dt: f64, tol: f64) -> Result<Self> {
        let a = assemble_diffusion(mesh, &|_| tensors[0])?;
        let b = assemble_diffusion(mesh, &|_| tensors[1])?;
        Self::new([a, b], forcing, dt, tol)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn operator(&self, i: usize) -> &DiffusionOperator {
        &self.ops[i]
    }

    pub fn forcing(&self, i: usize) -> &FieldSpec {
        &self.forcing[i]
    }

    pub fn forcing_field(&self, i: usize, t: f64) -> ScalarField {
        let f = &self.forcing[i];
        ScalarField::from_fn(self.mesh, |x| f.eval(t, x))
    }

    /// Backward-Euler diffusion of both continua.
    pub fn diffuse(&self, u: &FieldPair) -> Result<FieldPair> {
        let mut out = u.clone();
        for i in 0..2 {
            self.solvers[i].solve(u.get(i).values(), out.get_mut(i).values_mut())?;
        }
        Ok(out)
    }

    /// Pointwise implicit exchange with the frozen rate `a` and forcing at `t_next`.
    pub fn exchange(&self, diffused: &FieldPair, a: &[f64], t_next: f64, step: usize) -> Result<FieldPair> {
        let dt = self.dt;
        let mut rhs = diffused.clone();
        for i in 0..2 {
            if !self.forcing[i].is_zero() {
                let f = self.forcing_field(i, t_next);
                for (r, fv) in rhs.get_mut(i).values_mut().iter_mut().zip(f.values()) {
                    *r += dt * fv;
                }
            }
        }
        let mut out = FieldPair::zeros(self.mesh);
        let (r1, r2) = (rhs.first.values(), rhs.second.values());
        let (o1, o2) = (out.first.values_mut(), out.second.values_mut());
        for d in 0..a.len() {
            let c = dt * a[d];
            let det = 1.0 + 2.0 * c;
            if !(det > 0.0) {
                return Err(Error::SingularExchange { step, det });
            }
            o1[d] = ((1.0 + c) * r1[d] + c * r2[d]) / det;
            o2[d] = (c * r1[d] + (1.0 + c) * r2[d]) / det;
        }
        Ok(out)
    }

    /// `diffuse` followed by `exchange`.
    pub fn advance(&self, u: &FieldPair, a: &[f64], t_next: f64, step: usize) -> Result<(FieldPair, FieldPair)> {
        let diffused = self.diffuse(u)?;
        let next = self.exchange(&diffused, a, t_next, step)?;
        if next.first.values().iter().chain(next.second.values()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        Ok((next, diffused))
    }
}

/// Per-step data for the discrete weak form.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecords {
    /// `u^0, ..., u^N`.
    pub states: Vec<FieldPair>,
    /// Diffused intermediate of every step.
    pub diffused: Vec<FieldPair>,
    /// Frozen exchange rate of every step.
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// `sup_t |u_i(t)|_{L^2}`.
    pub sup_l2: [f64; 2],
    /// `int_0^T |grad u_i|^2 dt`.
    pub grad_integral: [f64; 2],
    /// `int_0^T |du_i/dt|^2 dt` with difference quotients.
    pub dudt_integral: [f64; 2],
    /// `sup_t |v(t)|_{L^2}`.
    pub sup_l2_fast: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EstimateFlags {
    pub sup_l2: bool,
    pub grad_integral: bool,
    pub dudt_integral: bool,
}

impl EstimateFlags {
    pub fn all(&self) -> bool {
        self.sup_l2 && self.grad_integral && self.dudt_integral
    }
}

/// Running accumulation of [`Diagnostics`].
#[derive(Clone, Debug)]
pub struct DiagnosticsAccumulator {
    dt: f64,
    d: Diagnostics,
}

impl DiagnosticsAccumulator {
    pub fn new(u0: &FieldPair, v0: Option<&FieldPair>, dt: f64) -> Self {
        let mut d = Diagnostics::default();
        for i in 0..2 {
            d.sup_l2[i] = u0.get(i).l2_norm();
        }
        d.sup_l2_fast = v0.map_or(0.0, FieldPair::l2_norm);
        DiagnosticsAccumulator { dt, d }
    }

    pub fn push(&mut self, prev: &FieldPair, next: &FieldPair, v: Option<&FieldPair>) {
        for i in 0..2 {
            let (p, n) = (prev.get(i), next.get(i));
            self.d.sup_l2[i] = self.d.sup_l2[i].max(n.l2_norm());
            self.d.grad_integral[i] += self.dt * n.h1_seminorm().powi(2);
            let diff = n.sub(p).expect("same mesh");
            self.d.dudt_integral[i] += diff.l2_norm().powi(2) / self.dt;
        }
        if let Some(v) = v {
            self.d.sup_l2_fast = self.d.sup_l2_fast.max(v.l2_norm());
        }
        self.d.steps += 1;
    }

    pub fn finish(self) -> Diagnostics {
        self.d
    }
}

fn flags(d: &Diagnostics, caps: &EstimateCaps) -> EstimateFlags {
    let under = |cap: Option<f64>, v: [f64; 2]| cap.is_none_or(|c| v.iter().all(|x| x.is_finite() && *x <= c));
    EstimateFlags {
        sup_l2: under(caps.sup_l2, d.sup_l2),
        grad_integral: under(caps.grad_integral, d.grad_integral),
        dudt_integral: under(caps.dudt_integral, d.dudt_integral),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t_end: f64,
    /// Checkpoint times, strictly increasing.
    pub times: Vec<f64>,
    pub u: Vec<FieldPair>,
    /// Fast pair at the checkpoints (empty for deterministic runs).
    pub v: Vec<FieldPair>,
    pub diagnostics: Diagnostics,
    pub flags: EstimateFlags,
    pub records: Option<StepRecords>,
}

impl Trajectory {
    pub fn final_state(&self) -> &FieldPair {
        self.u.last().expect("trajectory has an initial checkpoint")
    }
}

/// State handed to run observers after every step (and once for `n = 0`).
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub u: &'a FieldPair,
    pub v: Option<&'a FieldPair>,
}

/// The assembled system at one `epsilon`.
pub struct EpsilonSystem {
    config: EpsilonRunConfig,
    scheme: SlowScheme,
    basis: ModeBasis,
    sample_points: Vec<Vec<f64>>,
}

impl EpsilonSystem {
    pub fn new(config: EpsilonRunConfig) -> Result<Self> {
        config.validate()?;
        let c = &config.coeffs;
        let scheme = SlowScheme::oscillating(
            &config.mesh,
            [&c.a1, &c.a2],
            config.epsilon,
            [c.f1.clone(), c.f2.clone()],
            config.dt,
            config.solver_tol,
        )?;
        let basis = config.noise.basis(&config.mesh)?;
        let d = config.mesh.dim();
        let sample_points = (0..config.mesh.ndof())
            .map(|k| config.mesh.dof_coords(k)[..d].iter().map(|x| x / config.epsilon).collect())
            .collect();
        Ok(EpsilonSystem {
            config,
            scheme,
            basis,
            sample_points,
        })
    }

    pub fn config(&self) -> &EpsilonRunConfig {
        &self.config
    }

    pub fn scheme(&self) -> &SlowScheme {
        &self.scheme
    }

    pub fn basis(&self) -> &ModeBasis {
        &self.basis
    }

    pub fn initial_fast_state(&self) -> Result<OUState> {
        OUState::new(self.config.v0.clone(), &self.basis)
    }

    /// `xi = beta u` at every node.
    pub fn coupling(&self, u: &FieldPair) -> FieldPair {
        let mut xi = FieldPair::zeros(self.config.mesh);
        for d in 0..u.first.values().len() {
            let (a, b) = self.config.coeffs.couple(u.first.values()[d], u.second.values()[d]);
            xi.first.values_mut()[d] = a;
            xi.second.values_mut()[d] = b;
        }
        xi
    }

    /// `alpha(x/eps, v_1(x), v_2(x))` at every node.
    pub fn alpha_field(&self, v: &FieldPair) -> Vec<f64> {
        let alpha = &self.config.coeffs.alpha;
        self.sample_points
            .iter()
            .zip(v.first.values().iter().zip(v.second.values()))
            .map(|(y, (a, b))| alpha.eval_periodic(y, *a, *b))
            .collect()
    }

    /// One step `n -> n+1`; returns the diffused intermediate and the rate field.
    pub fn step(
        &self,
        u: &mut FieldPair,
        v: &mut OUState,
        n: usize,
        drivers: &mut Drivers,
    ) -> Result<(FieldPair, Vec<f64>)> {
        let cfg = &self.config;
        let xi = self.coupling(u);
        ou_step(v, &xi, cfg.dt, cfg.epsilon, &cfg.noise, &self.basis, drivers)?;
        let a = self.alpha_field(v.nodal());
        let t_next = (n + 1) as f64 * cfg.dt;
        let (next, diffused) = self.scheme.advance(u, &a, t_next, n + 1)?;
        *u = next;
        Ok((diffused, a))
    }

    /// Full run; `observer` sees the initial state and every step.
    pub fn run(&self, observer: &mut dyn FnMut(StepView<'_>) -> Result<()>) -> Result<Trajectory> {
        let cfg = &self.config;
        let steps = step_count(cfg.t_end, cfg.dt)?;
        let checkpoints = checkpoint_steps(&cfg.checkpoints, cfg.t_end, cfg.dt)?;
        let mut drivers = Drivers::new(cfg.seed, cfg.replica);
        let mut u = cfg.u0.clone();
        let mut v = self.initial_fast_state()?;
        let mut acc = DiagnosticsAccumulator::new(&u, Some(v.nodal()), cfg.dt);
        let mut traj = Trajectory {
            dt: cfg.dt,
            t_end: cfg.t_end,
            times: vec![0.0],
            u: vec![u.clone()],
            v: vec![v.nodal().clone()],
            diagnostics: Diagnostics::default(),
            flags: EstimateFlags {
                sup_l2: true,
                grad_integral: true,
                dudt_integral: true,
            },
            records: cfg.record_steps.then(|| StepRecords {
                states: vec![u.clone()],
                diffused: Vec::new(),
                alpha: Vec::new(),
            }),
        };
        observer(StepView {
            step: 0,
            t: 0.0,
            u: &u,
            v: Some(v.nodal()),
        })?;
        let mut next_cp = 1;
        for n in 0..steps {
            let prev = u.clone();
            let (diffused, a) = self.step(&mut u, &mut v, n, &mut drivers)?;
            acc.push(&prev, &u, Some(v.nodal()));
            let t = (n + 1) as f64 * cfg.dt;
            if let Some(r) = traj.records.as_mut() {
                r.states.push(u.clone());
                r.diffused.push(diffused);
                r.alpha.push(a);
            }
            if next_cp < checkpoints.len() && checkpoints[next_cp] == n + 1 {
                traj.times.push(t);
                traj.u.push(u.clone());
                traj.v.push(v.nodal().clone());
                next_cp += 1;
            }
            observer(StepView {
                step: n + 1,
                t,
                u: &u,
                v: Some(v.nodal()),
            })?;
        }
        traj.diagnostics = acc.finish();
        traj.flags = flags(&traj.diagnostics, &cfg.caps);
        Ok(traj)
    }
}

pub fn simulate(config: EpsilonRunConfig) -> Result<Trajectory> {
    EpsilonSystem::new(config)?.run(&mut |_| Ok(()))
}

/// Time quadrature of the weak residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quadrature {
    /// The rule the scheme itself satisfies: diffusion on the intermediate,
    /// exchange and forcing at the right endpoint.
    Scheme,
    /// Trapezoidal rule on the recorded states.
    Trapezoidal,
}

/// `max_{m, i} |psi(t_m) R_i(t_m)|` with
///
/// ```text
/// R_i(t) = (u_i(t) - u_i(0), phi) + int_0^t [ (A_i grad u_i, grad phi)
///          - (a (u_j - u_i), phi) - (f_i, phi) ] ds
/// ```
pub fn weak_residual(
    scheme: &SlowScheme,
    traj: &Trajectory,
    phi: &ScalarField,
    psi: TimeProfile,
    quadrature: Quadrature,
) -> Result<f64> {
    let rec = traj
        .records
        .as_ref()
        .ok_or_else(|| Error::invalid("weak residual needs a run with recorded steps"))?;
    phi.mesh().same_as(scheme.mesh())?;
    let dt = traj.dt;
    let forcing_pair = |t: f64, i: usize| -> Result<f64> {
        if scheme.forcing(i).is_zero() {
            Ok(0.0)
        } else {
            scheme.forcing_field(i, t).weak_pairing(phi)
        }
    };
    let exchange = |a: &[f64], u: &FieldPair, i: usize| -> f64 {
        let (ui, uj) = (u.get(i).values(), u.get(1 - i).values());
        let w = phi.mesh().cell_volume();
        w * a
            .iter()
            .zip(ui.iter().zip(uj))
            .zip(phi.values())
            .map(|((ak, (x, y)), p)| ak * (y - x) * p)
            .sum::<f64>()
    };
    let mut worst = 0.0f64;
    for i in 0..2 {
        let u0 = rec.states[0].get(i);
        let mut integral = 0.0;
        for n in 0..rec.diffused.len() {
            let (tn, tn1) = (n as f64 * dt, (n + 1) as f64 * dt);
            let (prev, next) = (&rec.states[n], &rec.states[n + 1]);
            let op = scheme.operator(i);
            let a = &rec.alpha[n];
            integral += match quadrature {
                Quadrature::Scheme => {
                    dt * (op.energy_pairing(phi, rec.diffused[n].get(i))?
                        - exchange(a, next, i)
                        - forcing_pair(tn1, i)?)
                }
                Quadrature::Trapezoidal => {
                    0.5 * dt
                        * (op.energy_pairing(phi, prev.get(i))? + op.energy_pairing(phi, next.get(i))?
                            - exchange(a, prev, i)
                            - exchange(a, next, i)
                            - forcing_pair(tn, i)?
                            - forcing_pair(tn1, i)?)
                }
            };
            let r = next.get(i).sub(u0)?.weak_pairing(phi)? + integral;
            worst = worst.max((psi.eval(tn1, traj.t_end) * r).abs());
        }
    }
    Ok(worst)
}

/// Largest ratio `|u(t) - u(s)| / sqrt((t - s) int |du/dt|^2)` over checkpoint
/// pairs; at most one by Cauchy-Schwarz.
pub fn holder_ratio(traj: &Trajectory) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..2 {
        let e = traj.diagnostics.dudt_integral[i];
        if e == 0.0 {
            continue;
        }
        for a in 0..traj.times.len() {
            for b in a + 1..traj.times.len() {
                let diff = traj.u[b].get(i).sub(traj.u[a].get(i)).expect("same mesh").l2_norm();
                worst = worst.max(diff / ((traj.times[b] - traj.times[a]) * e).sqrt());
            }
        }
    }
    worst
}

/// A unit bump for residual checks.
pub fn default_test_function(mesh: Mesh) -> ScalarField {
    Bump::new(vec![0.5; mesh.dim()], 0.3).sample(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{families, AlphaSpec, Profile, Saturation};
    use std::f64::consts::PI;

    fn set(dim: usize, alpha: AlphaSpec) -> CoefficientSet {
        CoefficientSet::new(
            families::laminate(dim),
            TensorSpec::Isotropic {
                dim,
                profile: Profile::sine(1.5, 0.5, vec![1; dim]),
            },
            alpha,
            [[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap()
    }

    fn config(dim: usize, n: usize, eps: f64, t_end: f64, dt: f64, coeffs: CoefficientSet) -> EpsilonRunConfig {
        let mesh = Mesh::dirichlet(dim, n).unwrap();
        let noise = SpectralNoise::new(dim, [1.0, 1.0], dim as f64 + 1.0, (n / 2).min(16)).unwrap();
        let u0 = sample_pair(
            mesh,
            &FieldSpec::sine(1.0, vec![1; dim], 0.0),
            &FieldSpec::sine(0.5, vec![2; dim], 0.0),
            0.0,
        );
        EpsilonRunConfig::new(eps, mesh, t_end, dt, coeffs, noise, u0)
    }

    #[test]
    fn eigenvector_decay_is_exact() {
        let mesh = Mesh::dirichlet(1, 64).unwrap();
        let coeffs = families::identity_set(1);
        let noise = SpectralNoise::zero(1, 8).unwrap();
        let u0 = sample_pair(mesh, &FieldSpec::sine(1.0, vec![1], 0.0), &FieldSpec::sine(1.0, vec![1], 0.0), 0.0);
        let (dt, steps) = (0.01, 25);
        let cfg = EpsilonRunConfig::new(0.1, mesh, dt * steps as f64, dt, coeffs, noise, u0.clone());
        let traj = simulate(cfg).unwrap();
        let h = mesh.h();
        let lam = 2.0 / (h * h) * (1.0 - (PI * h).cos());
        let factor = (1.0 + dt * lam).powi(-steps);
        for i in 0..2 {
            for (a, b) in traj.final_state().get(i).values().iter().zip(u0.get(i).values()) {
                assert!((a - factor * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_continua_stay_equal() {
        for seed in [1, 2, 3] {
            let mut coeffs = set(1, families::mixed_alpha());
            coeffs.a2 = coeffs.a1.clone();
            coeffs.beta = [[0.7, 0.3], [0.7, 0.3]];
            coeffs = coeffs.with_forcing(FieldSpec::sine(1.0, vec![1], 0.5), FieldSpec::sine(1.0, vec![1], 0.5));
            let mut cfg = config(1, 64, 0.1, 0.2, 0.01, coeffs);
            cfg.u0.second = cfg.u0.first.clone();
            cfg.seed = seed;
            cfg.checkpoints = vec![0.05, 0.1, 0.15];
            let traj = simulate(cfg).unwrap();
            for u in &traj.u {
                assert!(u.first.sub(&u.second).unwrap().sup_norm() < 1e-12);
            }
        }
    }

    #[test]
    fn energy_is_nonincreasing_without_forcing() {
        for (dim, n) in [(1, 64), (2, 12)] {
            for (_, alpha) in families::alpha_families() {
                if !alpha.is_nonnegative() {
                    continue;
                }
                let mut cfg = config(dim, n, 0.2, 0.1, 0.01, set(dim, alpha));
                cfg.seed = 17;
                let sys = EpsilonSystem::new(cfg).unwrap();
                let mut last = f64::INFINITY;
                sys.run(&mut |s| {
                    let e = s.u.l2_norm().powi(2);
                    assert!(e <= last * (1.0 + 1e-12), "energy grew at step {}", s.step);
                    last = e;
                    Ok(())
                })
                .unwrap();
            }
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let mut cfg = config(2, 10, 0.25, 0.05, 0.01, set(2, families::mixed_alpha()));
        cfg.seed = 99;
        cfg.checkpoints = vec![0.02];
        let a = simulate(cfg.clone()).unwrap();
        let b = simulate(cfg.clone()).unwrap();
        assert_eq!(a, b);
        cfg.seed = 100;
        let c = simulate(cfg).unwrap();
        assert_ne!(a.u.last(), c.u.last());
    }

    #[test]
    fn zero_horizon_keeps_only_initial_state() {
        let cfg = config(1, 32, 0.1, 0.0, 0.01, set(1, families::mixed_alpha()));
        let u0 = cfg.u0.clone();
        let traj = simulate(cfg).unwrap();
        assert_eq!(traj.times, vec![0.0]);
        assert_eq!(traj.u, vec![u0]);
        assert_eq!(traj.diagnostics.steps, 0);
    }

    #[test]
    fn uniform_bound_across_epsilon() {
        let sups: Vec<f64> = [0.5, 0.25, 0.125]
            .iter()
            .map(|&eps| {
                let mut cfg = config(1, 128, eps, 0.25, 0.005, set(1, families::mixed_alpha()));
                cfg.seed = 4;
                cfg.caps.sup_l2 = Some(10.0);
                let t = simulate(cfg).unwrap();
                assert!(t.flags.sup_l2);
                t.diagnostics.sup_l2[0]
            })
            .collect();
        let lo = sups.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sups.iter().copied().fold(0.0, f64::max);
        assert!(hi.is_finite() && (hi - lo) / lo < 0.5, "{sups:?}");
    }

    #[test]
    fn caps_raise_flags() {
        let mut cfg = config(1, 32, 0.1, 0.05, 0.01, set(1, families::mixed_alpha()));
        cfg.caps = EstimateCaps {
            sup_l2: Some(1e-3),
            grad_integral: None,
            dudt_integral: Some(1e9),
        };
        let t = simulate(cfg).unwrap();
        assert!(!t.flags.sup_l2 && t.flags.grad_integral && t.flags.dudt_integral);
        assert!(!t.flags.all());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = config(1, 32, 0.1, 0.05, 0.01, set(1, families::mixed_alpha()));
        let mut c = base.clone();
        c.epsilon = 0.0;
        assert!(simulate(c).is_err());
        let mut c = base.clone();
        c.dt = 0.03;
        assert!(simulate(c).is_err());
        let mut c = base.clone();
        c.checkpoints = vec![0.03, 0.02];
        assert!(simulate(c).is_err());
        let mut c = base;
        c.checkpoints = vec![0.5];
        assert!(simulate(c).is_err());
    }

    #[test]
    fn negative_rate_beyond_threshold_is_singular() {
        let mut cfg = config(1, 32, 0.1, 0.05, 0.01, set(1, AlphaSpec::Constant { c: -60.0 }));
        cfg.noise = SpectralNoise::zero(1, 4).unwrap();
        assert!(matches!(simulate(cfg), Err(Error::SingularExchange { step: 1, .. })));
    }

    #[test]
    fn scheme_satisfies_its_discrete_weak_form() {
        let mut coeffs = set(1, families::mixed_alpha());
        coeffs = coeffs.with_forcing(FieldSpec::sine(2.0, vec![1], 1.0), FieldSpec::Constant { c: 0.5 });
        let mut cfg = config(1, 128, 0.1, 0.2, 0.005, coeffs);
        cfg.record_steps = true;
        cfg.seed = 12;
        let sys = EpsilonSystem::new(cfg).unwrap();
        let traj = sys.run(&mut |_| Ok(())).unwrap();
        let mesh = sys.config().mesh;
        for psi in TimeProfile::panel() {
            for bump in Bump::panel(1) {
                let r = weak_residual(sys.scheme(), &traj, &bump.sample(mesh), psi, Quadrature::Scheme).unwrap();
                assert!(r < 1e-10, "residual {r}");
            }
        }
        let zero = ScalarField::zeros(mesh);
        assert_eq!(weak_residual(sys.scheme(), &traj, &zero, TimeProfile::Constant, Quadrature::Scheme).unwrap(), 0.0);
        let mut plain_cfg = sys.config().clone();
        plain_cfg.record_steps = false;
        let plain = simulate(plain_cfg).unwrap();
        assert!(weak_residual(sys.scheme(), &plain, &zero, TimeProfile::Constant, Quadrature::Scheme).is_err());
    }

    #[test]
    fn manufactured_solution_residual_is_first_order() {
        // u = sin(pi x) e^{-t} solves u_t = u_xx + (pi^2 - 1) sin(pi x) e^{-t}
        let run = |dt: f64| {
            let mesh = Mesh::dirichlet(1, 128).unwrap();
            let f = FieldSpec::sine(PI * PI - 1.0, vec![1], 1.0);
            let coeffs = families::identity_set(1).with_forcing(f.clone(), f);
            let u0 = sample_pair(mesh, &FieldSpec::sine(1.0, vec![1], 0.0), &FieldSpec::sine(1.0, vec![1], 0.0), 0.0);
            let mut cfg = EpsilonRunConfig::new(0.1, mesh, 0.5, dt, coeffs, SpectralNoise::zero(1, 4).unwrap(), u0);
            cfg.record_steps = true;
            let sys = EpsilonSystem::new(cfg).unwrap();
            let traj = sys.run(&mut |_| Ok(())).unwrap();
            let phi = default_test_function(mesh);
            weak_residual(sys.scheme(), &traj, &phi, TimeProfile::Constant, Quadrature::Trapezoidal).unwrap()
        };
        let (a, b) = (run(0.02), run(0.01));
        let ratio = a / b;
        assert!((1.7..2.3).contains(&ratio), "{a} {b} ratio {ratio}");
    }

    #[test]
    fn holder_bound_holds() {
        let mut cfg = config(1, 64, 0.1, 0.2, 0.01, set(1, families::mixed_alpha()));
        cfg.checkpoints = (1..20).map(|k| k as f64 * 0.01).collect();
        cfg.seed = 3;
        let traj = simulate(cfg).unwrap();
        let r = holder_ratio(&traj);
        assert!(r > 0.0 && r <= 1.0 + 1e-12, "{r}");
    }

    #[test]
    fn nonsymmetric_tensor_runs() {
        let full = TensorSpec::Full {
            entries: vec![
                vec![Profile::constant(2.0), Profile::constant(0.5)],
                vec![Profile::constant(-0.5), Profile::constant(1.0)],
            ],
        };
        let coeffs = CoefficientSet::new(full.clone(), full, AlphaSpec::Constant { c: 1.0 }, [[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mut cfg = config(2, 10, 0.5, 0.05, 0.01, coeffs);
        cfg.noise = SpectralNoise::zero(2, 4).unwrap();
        let t = simulate(cfg).unwrap();
        assert!(t.final_state().l2_norm() < t.u[0].l2_norm());
    }

    #[test]
    fn alpha_field_uses_fast_coordinates() {
        let coeffs = set(
            1,
            AlphaSpec::Separable {
                g: Profile::sine(1.0, 0.5, vec![1]),
                h: Saturation::tanh(1.0, 0.0, 0.0),
            },
        );
        let cfg = config(1, 16, 0.25, 0.0, 0.01, coeffs);
        let sys = EpsilonSystem::new(cfg).unwrap();
        let mut v = FieldPair::zeros(Mesh::dirichlet(1, 16).unwrap());
        v.first.values_mut().iter_mut().for_each(|x| *x = 0.3);
        let a = sys.alpha_field(&v);
        let x = 3.0 / 16.0;
        let want = (1.0 + 0.5 * (2.0 * PI * x / 0.25).sin()) * 0.3f64.tanh();
        assert!((a[2] - want).abs() < 1e-14);
    }
}
