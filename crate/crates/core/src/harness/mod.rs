//! Experiment orchestration: configuration, the replica convergence study and
//! the per-subcommand runners.

pub mod config;
pub mod report;

use std::path::Path;

pub use crate::rng::derive_seed;
pub use config::{ExperimentConfig, StudyKind};
pub use report::{emit_report, ConvergenceReport, ErrorRow, FluxRow, Metric, SplittingRow};

use crate::avg::{AveragedRunConfig, AveragedSystem};
use crate::cell::{corrector_test_function, solve_cell_with, CellSolution};
use crate::coeffs::{validate, CoefficientSet, SmallMatrix, ValidationReport};
use crate::ergodic::{mixing_report, window_average_error, Functional, GapMethod, MixingReport, SAccumulator};
use crate::error::{Error, Result};
use crate::fastsde::{Drivers, SpectralNoise};
use crate::grid::testfn::{Bump, TimeProfile};
use crate::grid::{FieldPair, Mesh, ScalarField};
use crate::par::{self, Execution};
use crate::rng::Role;
use crate::slowpde::{sample_pair, EpsilonRunConfig, EpsilonSystem, Trajectory, SOLVER_TOL};

use report::{fmt_num, quartiles, write_rows};

const CELL_TOL: f64 = 1e-11;

/// A validated configuration with its discrete ingredients.
#[derive(Clone, Debug)]
pub struct Study {
    pub config: ExperimentConfig,
    pub mesh: Mesh,
    pub noise: SpectralNoise,
    pub u0: FieldPair,
    pub v0: FieldPair,
}

impl Study {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mesh = config.physical_mesh()?;
        let noise = SpectralNoise::from_spec(&config.noise, config.mesh.dim)?;
        let i = &config.initial;
        let u0 = sample_pair(mesh, &i.u1, &i.u2, 0.0);
        let v0 = sample_pair(mesh, &i.v1, &i.v2, 0.0);
        Ok(Study {
            config,
            mesh,
            noise,
            u0,
            v0,
        })
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        &self.config.coefficients
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Cell problems of `A_1` and `A_2`.
    pub fn cells(&self, exec: Execution) -> Result<[CellSolution; 2]> {
        let m = self.config.cell_mesh()?;
        let c = self.coeffs();
        Ok([solve_cell_with(&c.a1, &m, CELL_TOL, exec)?, solve_cell_with(&c.a2, &m, CELL_TOL, exec)?])
    }

    pub fn averaged_config(&self, cells: &[CellSolution; 2]) -> AveragedRunConfig {
        let t = &self.config.time;
        let mut cfg = AveragedRunConfig::new(
            self.mesh,
            t.t_end,
            t.dt,
            self.coeffs().clone(),
            [cells[0].effective, cells[1].effective],
            self.noise.clone(),
            self.u0.clone(),
        );
        cfg.solver_tol = SOLVER_TOL;
        cfg
    }

    pub fn epsilon_config(&self, epsilon: f64, replica: usize) -> EpsilonRunConfig {
        let t = &self.config.time;
        let mut cfg = EpsilonRunConfig::new(
            epsilon,
            self.mesh,
            t.t_end,
            t.dt,
            self.coeffs().clone(),
            self.noise.clone(),
            self.u0.clone(),
        );
        cfg.v0 = self.v0.clone();
        cfg.seed = self.seed();
        cfg.replica = replica as u64;
        cfg.caps = self.config.caps;
        cfg
    }
}

/// The averaged trajectory on every step, with the ridge expectations the
/// splitting needs.
struct AveragedPath {
    states: Vec<FieldPair>,
    ridge: Vec<Vec<f64>>,
}

fn averaged_path(system: &AveragedSystem, want_ridge: bool) -> Result<AveragedPath> {
    let mut states = Vec::new();
    let mut ridge = Vec::new();
    system.run(&mut |view| {
        if want_ridge {
            ridge.push(system.ridge_field(view.u)?);
        }
        states.push(view.u.clone());
        Ok(())
    })?;
    Ok(AveragedPath { states, ridge })
}

struct ReplicaOutcome {
    row: ErrorRow,
    splitting: Option<SplittingRow>,
    flux: Vec<FluxRow>,
}

struct Panel {
    bumps: Vec<ScalarField>,
    profiles: [TimeProfile; 2],
}

#[allow(clippy::too_many_arguments)]
fn run_replica(
    study: &Study,
    asys: &AveragedSystem,
    path: &AveragedPath,
    panel: &Panel,
    corrected: &[[ScalarField; 2]],
    s_phi: Option<&ScalarField>,
    epsilon: f64,
    replica: usize,
) -> Result<ReplicaOutcome> {
    let sys = EpsilonSystem::new(study.epsilon_config(epsilon, replica))?;
    let t_end = study.config.time.t_end;
    let dt = study.config.time.dt;
    let nb = panel.bumps.len();
    let mut sup = [0.0f64; 2];
    // [bump][profile][continuum]
    let mut weak = vec![[[0.0f64; 2]; 2]; nb];
    let mut flux = vec![[[0.0f64; 2]; 2]; nb];
    let mut flux_c = vec![[[0.0f64; 2]; 2]; nb];
    let mut split = s_phi.map(|phi| {
        SAccumulator::new(
            asys.evaluator(),
            study.coeffs(),
            asys.variances(),
            phi,
            epsilon,
            TimeProfile::Constant,
            t_end,
            dt,
        )
    });
    let mut ridge_prev: Vec<f64> = Vec::new();
    let ops_eps = [sys.scheme().operator(0), sys.scheme().operator(1)];
    let ops_bar = [asys.scheme().operator(0), asys.scheme().operator(1)];
    sys.run(&mut |view| {
        let ubar = &path.states[view.step];
        let diff = view.u.sub(ubar)?;
        for i in 0..2 {
            sup[i] = sup[i].max(diff.get(i).l2_norm());
        }
        if view.step == 0 {
            if let Some(acc) = split.as_ref() {
                ridge_prev = acc.ridge(view.u)?;
            }
            return Ok(());
        }
        let w = [dt * panel.profiles[0].eval(view.t, t_end), dt * panel.profiles[1].eval(view.t, t_end)];
        for (b, phi) in panel.bumps.iter().enumerate() {
            for i in 0..2 {
                let g = diff.get(i).gradient_pairing(phi)?;
                let bar = ops_bar[i].energy_pairing(phi, ubar.get(i))?;
                let plain = ops_eps[i].energy_pairing(phi, view.u.get(i))? - bar;
                let corr = ops_eps[i].energy_pairing(&corrected[b][i], view.u.get(i))? - bar;
                for p in 0..2 {
                    weak[b][p][i] += w[p] * g;
                    flux[b][p][i] += w[p] * plain;
                    flux_c[b][p][i] += w[p] * corr;
                }
            }
        }
        if let Some(acc) = split.as_mut() {
            let v = view.v.expect("epsilon runs carry the fast pair");
            let a = sys.alpha_field(v);
            acc.push(view.t, view.u, &a, &ridge_prev, ubar, &path.ridge[view.step - 1])?;
            ridge_prev = acc.ridge(view.u)?;
        }
        Ok(())
    })?;
    let mut weak_max = [0.0f64; 2];
    let mut rows = Vec::with_capacity(nb * 4);
    for b in 0..nb {
        for p in 0..2 {
            for i in 0..2 {
                weak_max[i] = weak_max[i].max(weak[b][p][i].abs());
                rows.push(FluxRow {
                    epsilon,
                    replica,
                    bump: b,
                    profile: p,
                    continuum: i,
                    weak_h1: weak[b][p][i],
                    flux: flux[b][p][i],
                    flux_corrected: flux_c[b][p][i],
                });
            }
        }
    }
    let splitting = split.map(|acc| {
        let s = acc.finish();
        SplittingRow {
            epsilon,
            replica,
            s1: s.s1,
            s2: s.s2,
            s3: s.s3,
            total: s.total,
        }
    });
    Ok(ReplicaOutcome {
        row: ErrorRow {
            epsilon,
            replica,
            sup_l2: sup,
            weak_h1: weak_max,
        },
        splitting,
        flux: rows,
    })
}

/// Path errors of every `(epsilon, replica)` run against the averaged
/// solution, plus the exchange-term splitting and the weak test panel.
pub fn run_convergence(study: &Study, exec: Execution, splitting: bool) -> Result<ConvergenceReport> {
    let cells = study.cells(exec)?;
    let asys = AveragedSystem::new(study.averaged_config(&cells))?;
    let path = averaged_path(&asys, splitting)?;
    let dim = study.mesh.dim();
    let bumps_spec = Bump::panel(dim);
    let panel = Panel {
        bumps: bumps_spec.iter().map(|b| b.sample(study.mesh)).collect(),
        profiles: TimeProfile::panel(),
    };
    let chi_star = [&cells[0].adjoint_correctors, &cells[1].adjoint_correctors];
    let epsilons = study.config.study.epsilons.clone();
    let replicas = study.config.study.replicas;
    let mut corrected = Vec::with_capacity(epsilons.len());
    let mut s_phi = Vec::with_capacity(epsilons.len());
    for &eps in &epsilons {
        let mut per_bump = Vec::with_capacity(bumps_spec.len());
        for b in &bumps_spec {
            per_bump.push([
                corrector_test_function(b, chi_star[0], eps, &study.mesh)?,
                corrector_test_function(b, chi_star[1], eps, &study.mesh)?,
            ]);
        }
        s_phi.push(per_bump[bumps_spec.len() / 2][0].clone());
        corrected.push(per_bump);
    }
    let jobs: Vec<(usize, usize)> = (0..epsilons.len())
        .flat_map(|k| (0..replicas).map(move |r| (k, r)))
        .collect();
    let results = par::map_indexed(exec, jobs.len(), |j| {
        let (k, r) = jobs[j];
        let eps = epsilons[k];
        run_replica(
            study,
            &asys,
            &path,
            &panel,
            &corrected[k],
            splitting.then_some(&s_phi[k]),
            eps,
            r,
        )
        .map_err(|e| Error::Replica {
            epsilon: eps,
            replica: r,
            source: Box::new(e),
        })
    });
    let mut report = ConvergenceReport {
        epsilons,
        replicas,
        ..Default::default()
    };
    for res in results {
        let out = res?;
        report.rows.push(out.row);
        report.splitting.extend(out.splitting);
        report.flux.extend(out.flux);
    }
    Ok(report)
}

pub struct CellOutcome {
    pub cells: [CellSolution; 2],
}

pub fn run_cell(study: &Study, exec: Execution, out: &Path) -> Result<CellOutcome> {
    let cells = study.cells(exec)?;
    report::ensure_dir(out)?;
    let d = study.mesh.dim();
    let mut rows = Vec::new();
    for (c, sol) in cells.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                rows.push(vec![
                    (c + 1).to_string(),
                    i.to_string(),
                    j.to_string(),
                    fmt_num(sol.effective.get(i, j)),
                    fmt_num(sol.adjoint_effective.get(i, j)),
                ]);
            }
        }
    }
    write_rows(
        &out.join("effective.csv"),
        &["continuum", "i", "j", "effective", "adjoint_effective"],
        &rows,
    )?;
    for (c, sol) in cells.iter().enumerate() {
        for (l, chi) in sol.correctors.iter().enumerate() {
            let p = out.join(format!("corrector_a{}_e{}.csv", c + 1, l + 1));
            chi.save_csv(&p)?;
        }
    }
    Ok(CellOutcome { cells })
}

fn write_pair(path: &Path, u: &FieldPair) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    u.write_csv(&mut w).map_err(|e| Error::io(path, e))
}

fn write_diagnostics(path: &Path, traj: &Trajectory) -> Result<()> {
    let d = &traj.diagnostics;
    let mut rows = Vec::new();
    for i in 0..2 {
        rows.push(vec![format!("sup_l2_u{}", i + 1), fmt_num(d.sup_l2[i])]);
        rows.push(vec![format!("grad_integral_u{}", i + 1), fmt_num(d.grad_integral[i])]);
        rows.push(vec![format!("dudt_integral_u{}", i + 1), fmt_num(d.dudt_integral[i])]);
    }
    rows.push(vec!["sup_l2_fast".into(), fmt_num(d.sup_l2_fast)]);
    rows.push(vec!["steps".into(), d.steps.to_string()]);
    write_rows(path, &["quantity", "value"], &rows)
}

/// One epsilon run (first ladder entry, replica 0). `Ok(false)` when an
/// a priori cap is exceeded.
pub fn run_simulate(study: &Study, out: &Path) -> Result<bool> {
    let eps = study.config.study.epsilons[0];
    let traj = EpsilonSystem::new(study.epsilon_config(eps, 0))?.run(&mut |_| Ok(()))?;
    report::ensure_dir(out)?;
    for (k, (t, u)) in traj.times.iter().zip(&traj.u).enumerate() {
        let _ = t;
        write_pair(&out.join(format!("u_{k:03}.csv")), u)?;
    }
    for (k, v) in traj.v.iter().enumerate() {
        write_pair(&out.join(format!("v_{k:03}.csv")), v)?;
    }
    let times: Vec<Vec<String>> = traj
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| vec![k.to_string(), fmt_num(*t)])
        .collect();
    write_rows(&out.join("checkpoints.csv"), &["index", "t"], &times)?;
    write_diagnostics(&out.join("diagnostics.csv"), &traj)?;
    Ok(traj.flags.all())
}

pub fn run_average(study: &Study, exec: Execution, out: &Path) -> Result<Trajectory> {
    let cells = study.cells(exec)?;
    let asys = AveragedSystem::new(study.averaged_config(&cells))?;
    let traj = asys.run(&mut |_| Ok(()))?;
    report::ensure_dir(out)?;
    write_pair(&out.join("ubar_final.csv"), traj.final_state())?;
    let abar = crate::avg::alpha_bar_field(&asys, traj.final_state())?;
    abar.save_csv(&out.join("alpha_bar_final.csv"))?;
    write_diagnostics(&out.join("diagnostics.csv"), &traj)?;
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRow {
    pub epsilon: f64,
    pub delta_factor: f64,
    pub replica: usize,
    pub error: f64,
    pub bound_shape: f64,
}

#[derive(Clone, Debug)]
pub struct ErgodicOutcome {
    pub mixing: MixingReport,
    pub windows: Vec<WindowRow>,
    pub window_epsilons: Vec<f64>,
    pub delta_factors: Vec<f64>,
    /// Smallest `c` with `error <= c * bound_shape` over the whole sweep.
    pub window_constant: f64,
    pub splitting: Option<ConvergenceReport>,
}

impl ErgodicOutcome {
    /// Replica medians of the window error at one delta factor.
    pub fn window_medians(&self, factor: f64) -> Vec<f64> {
        self.window_epsilons
            .iter()
            .map(|&e| {
                let v: Vec<f64> = self
                    .windows
                    .iter()
                    .filter(|w| w.epsilon == e && w.delta_factor == factor)
                    .map(|w| w.error)
                    .collect();
                quartiles(&v).map_or(f64::NAN, |q| q.median)
            })
            .collect()
    }

    pub fn rate_ok(&self) -> bool {
        (0.8..=1.2).contains(&self.mixing.rate)
    }

    pub fn windows_decreasing(&self) -> bool {
        self.delta_factors
            .first()
            .is_some_and(|&f| self.window_medians(f).windows(2).all(|w| w[1] < w[0]))
    }
}

pub fn run_ergodic(study: &Study, exec: Execution, with_splitting: bool) -> Result<ErgodicOutcome> {
    let e = study
        .config
        .ergodic
        .as_ref()
        .ok_or_else(|| Error::Config("the ergodic study needs an [ergodic] section".into()))?;
    let mesh = study.mesh;
    let basis = study.noise.basis(&mesh)?;
    let phi = Functional::new(&e.phi, mesh, Some(&study.coeffs().alpha)).map_err(|x| Error::Config(x.to_string()))?;
    let xi = sample_pair(mesh, &e.xi[0], &e.xi[1], 0.0);
    let eta = sample_pair(mesh, &e.eta[0], &e.eta[1], 0.0);
    let mixing = mixing_report(
        &phi,
        &xi,
        &eta,
        &e.probe_times,
        &study.noise,
        &basis,
        e.mixing_replicas,
        study.seed(),
        GapMethod::MonteCarlo,
        exec,
    )?;
    let window_epsilons = e.window_epsilons.clone().unwrap_or_else(|| study.config.study.epsilons.clone());
    let jobs: Vec<(usize, usize, usize)> = (0..window_epsilons.len())
        .flat_map(|k| (0..e.delta_factors.len()).flat_map(move |f| (0..e.window_replicas).map(move |r| (k, f, r))))
        .collect();
    let window_base = derive_seed(study.seed(), Role::Mixing, 1);
    let results = par::map_indexed(exec, jobs.len(), |j| {
        let (k, f, r) = jobs[j];
        let eps = window_epsilons[k];
        let delta = e.delta_factors[f] * eps.sqrt();
        let mut drv = Drivers::new(window_base, r as u64);
        window_average_error(
            &phi,
            &xi,
            &eta,
            eps,
            delta,
            e.window_dt_over_eps * eps,
            &study.noise,
            &basis,
            &mut drv,
            e.invariant_samples,
        )
        .map(|w| WindowRow {
            epsilon: eps,
            delta_factor: e.delta_factors[f],
            replica: r,
            error: w.error,
            bound_shape: w.bound_shape,
        })
        .map_err(|x| Error::Replica {
            epsilon: eps,
            replica: r,
            source: Box::new(x),
        })
    });
    let windows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let window_constant = windows
        .iter()
        .filter(|w| w.bound_shape > 0.0 && w.bound_shape.is_finite())
        .map(|w| w.error / w.bound_shape)
        .fold(0.0, f64::max);
    let splitting = if with_splitting && e.splitting {
        Some(run_convergence(study, exec, true)?)
    } else {
        None
    };
    Ok(ErgodicOutcome {
        mixing,
        windows,
        window_epsilons,
        delta_factors: e.delta_factors.clone(),
        window_constant,
        splitting,
    })
}

pub fn emit_ergodic(outcome: &ErgodicOutcome, dir: &Path) -> Result<()> {
    report::ensure_dir(dir)?;
    let m = &outcome.mixing;
    let rows: Vec<Vec<String>> = m
        .gaps
        .iter()
        .map(|g| {
            vec![
                fmt_num(g.t),
                fmt_num(g.gap),
                fmt_num(g.half_width),
                fmt_num(g.transition_mean),
                fmt_num(g.invariant_mean),
            ]
        })
        .collect();
    write_rows(
        &dir.join("mixing.csv"),
        &["t", "gap", "half_width", "transition_mean", "invariant_mean"],
        &rows,
    )?;
    write_rows(
        &dir.join("mixing_fit.csv"),
        &["rate", "fitted_constant", "lipschitz"],
        &[vec![fmt_num(m.rate), fmt_num(m.fitted_constant), fmt_num(m.lipschitz)]],
    )?;
    let rows: Vec<Vec<String>> = outcome
        .windows
        .iter()
        .map(|w| {
            vec![
                fmt_num(w.epsilon),
                fmt_num(w.delta_factor),
                w.replica.to_string(),
                fmt_num(w.error),
                fmt_num(w.bound_shape),
                fmt_num(outcome.window_constant * w.bound_shape),
            ]
        })
        .collect();
    write_rows(
        &dir.join("window.csv"),
        &["epsilon", "delta_factor", "replica", "error", "bound_shape", "fitted_bound"],
        &rows,
    )?;
    if let Some(s) = &outcome.splitting {
        report::write_splitting_csv(&s.splitting, &dir.join("s_decomposition.csv"))?;
        let rows: Vec<Vec<String>> = s
            .summary()
            .into_iter()
            .filter(|r| r.metric.starts_with("abs_s"))
            .map(|r| {
                vec![
                    fmt_num(r.epsilon),
                    r.metric,
                    r.replicas.to_string(),
                    fmt_num(r.stats.median),
                    fmt_num(r.stats.q1),
                    fmt_num(r.stats.q3),
                ]
            })
            .collect();
        write_rows(&dir.join("s_summary.csv"), &report::SUMMARY_HEADER, &rows)?;
    }
    Ok(())
}

/// Coefficient sampling pass plus the effective tensors' symmetry check.
pub fn run_validate(study: &Study) -> Result<ValidationReport> {
    validate(study.coeffs(), study.config.validation_samples, study.seed())
}

/// Effective tensors of a constant-coefficient set, skipping the cell solve.
pub fn constant_effective(set: &CoefficientSet) -> Option<[SmallMatrix; 2]> {
    if set.a1.is_constant() && set.a2.is_constant() {
        Some([set.a1.eval_periodic(&[0.0, 0.0]), set.a2.eval_periodic(&[0.0, 0.0])])
    } else {
        None
    }
}
