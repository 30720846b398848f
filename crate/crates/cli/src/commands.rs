use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use ncentre_core::glue::{
    build_trajectory, check_c1, eval_g, grad_g, solve_legs, GContext, GlueReport, GlueSettings,
    GluedTrajectory, JunctionVector, Leg, Minimized, Start, StartRecord, max_separation, minimize_multistart,
};
use ncentre_core::inner_arcs::{inner_angular_sweep, InnerMomentumReport, Partition};
use ncentre_core::outer_arcs::{c1_sweep, BoundaryPoint, C1Report};
use ncentre_core::potential::PotentialConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::report::{write_atomic, ReportEnvelope};

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const NON_CONVERGENCE: i32 = 2;
    pub const BOUNDARY_ACTIVE: i32 = 3;
    pub const SOLVER_FAILURE: i32 = 4;
    pub const SWEEP_PARTIAL: i32 = 5;
    pub const GRADIENT_FAILURE: i32 = 6;
}

/// Multi-start initial vectors: the deterministic equally spaced vector at
/// the configured offset, then seeded rotations within one period of the
/// `n`-fold layout. Outer legs alternate between counter-clockwise and
/// clockwise spans of half the admissible angle.
pub fn starts(cfg: &RunConfig, potential: &PotentialConfig, n: usize) -> Vec<Start> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let period = TAU / n.max(1) as f64;
    let span = 0.5 * max_separation(potential);
    (0..cfg.solver.starts)
        .map(|i| Start {
            offset: if i == 0 { cfg.solver.offset } else { cfg.solver.offset + rng.gen_range(0.0..period) },
            span: if i % 2 == 0 { span } else { -span },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryManifest {
    pub file: String,
    pub arcs: usize,
    pub samples: usize,
    pub period: f64,
    pub junction_times: Vec<f64>,
    pub closure_error: f64,
    pub closed: bool,
    pub max_position_jump: f64,
    pub max_velocity_jump: f64,
}

impl TrajectoryManifest {
    fn new(traj: &GluedTrajectory, file: &str) -> Self {
        Self {
            file: file.to_string(),
            arcs: traj.arcs.len(),
            samples: traj.arcs.iter().map(|a| a.samples.len()).sum(),
            period: traj.period,
            junction_times: traj.junction_times.clone(),
            closure_error: traj.closure_error,
            closed: traj.is_closed(),
            max_position_jump: traj.max_position_jump,
            max_velocity_jump: traj.max_velocity_jump,
        }
    }
}

fn csv_bytes(traj: &GluedTrajectory) -> Vec<u8> {
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).expect("writing to memory");
    buf
}

fn write_report<P: Serialize>(dir: &Path, command: &str, cfg: &RunConfig, code: i32, payload: &P) -> std::io::Result<()> {
    let env = ReportEnvelope::new(command, cfg, code, payload);
    write_atomic(&dir.join(format!("{command}.json")), env.to_json().as_bytes())
}

// ---------------------------------------------------------------------------
// solve

#[derive(Debug, Clone, Serialize)]
pub struct SolvePayload {
    pub status: String,
    pub partitions: Vec<String>,
    pub report: Option<GlueReport>,
    pub starts: Vec<StartRecord>,
    pub error: Option<String>,
    pub trajectory: Option<TrajectoryManifest>,
}

pub struct SolveOutcome {
    pub code: i32,
    pub payload: SolvePayload,
    pub best: Option<Minimized>,
}

fn classify(m: &Minimized) -> (i32, &'static str) {
    let r = &m.report;
    if m.is_certified() {
        (exit::OK, "certified")
    } else if r.constraint_active || (r.converged && !r.interior) {
        (exit::BOUNDARY_ACTIVE, "boundary-active")
    } else if r.converged {
        (exit::NON_CONVERGENCE, "not c1-certified")
    } else {
        (exit::NON_CONVERGENCE, "not converged")
    }
}

/// Multi-start minimization of F for one partition sequence.
pub fn solve_with(potential: &PotentialConfig, partitions: &[Partition], cfg: &RunConfig) -> SolveOutcome {
    let settings = cfg.glue_settings();
    let list = starts(cfg, potential, partitions.len());
    let labels = partitions.iter().map(Partition::label).collect();
    match minimize_multistart(partitions, &list, potential, &settings) {
        Ok(ms) => {
            let (code, status) = classify(&ms.best);
            let traj = build_trajectory(&ms.best.legs);
            SolveOutcome {
                code,
                payload: SolvePayload {
                    status: status.into(),
                    partitions: labels,
                    report: Some(ms.best.report.clone()),
                    starts: ms.starts,
                    error: None,
                    trajectory: Some(TrajectoryManifest::new(&traj, "trajectory.csv")),
                },
                best: Some(ms.best),
            }
        }
        Err(e) => SolveOutcome {
            code: exit::SOLVER_FAILURE,
            payload: SolvePayload {
                status: "solver failure".into(),
                partitions: labels,
                report: None,
                starts: Vec::new(),
                error: Some(e.to_string()),
                trajectory: None,
            },
            best: None,
        },
    }
}

pub fn solve(cfg: &RunConfig) -> SolveOutcome {
    solve_with(&cfg.potential, &cfg.partitions, cfg)
}

/// Minimizes F from the deterministic start (plus seeded restarts) and writes
/// `solve.json` and `trajectory.csv` to the output directory.
pub fn run_solve(cfg: &RunConfig) -> std::io::Result<i32> {
    let out = solve(cfg);
    if let Some(dir) = &cfg.out_dir {
        if let Some(best) = &out.best {
            write_atomic(&dir.join("trajectory.csv"), &csv_bytes(&build_trajectory(&best.legs)))?;
        }
        write_report(dir, "solve", cfg, out.code, &out.payload)?;
    }
    Ok(out.code)
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, Serialize)]
pub struct InteriorityCell {
    pub epsilon: f64,
    pub n: usize,
    pub partitions: Vec<String>,
    pub status: String,
    pub certified: bool,
    pub min_margin: Option<f64>,
    pub f_value: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub max_mismatch: Option<f64>,
    pub max_tangential_mismatch: Option<f64>,
    pub max_speed_mismatch: Option<f64>,
    pub uniqueness_spread: Option<f64>,
    pub max_energy_residual: Option<f64>,
    pub collision_limited: Option<bool>,
    pub starts: Vec<StartRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepsPayload {
    pub c1: C1Report,
    pub inner: InnerMomentumReport,
    /// Smallest outer terminal `|theta_dot|` over the positive grid epsilons.
    pub c1_value: f64,
    pub c2: f64,
    /// Largest grid epsilon with max inner `|theta_dot(0)|` below `c1_value / 2`.
    pub epsilon5: Option<f64>,
    pub inner_monotone: bool,
    pub interiority: Vec<InteriorityCell>,
    /// Largest grid epsilon at and below which every cell is a certified interior minimizer.
    pub epsilon_bar: Option<f64>,
    pub failed_cells: usize,
}

/// Every sequence of `n` symbols from `alphabet`, first symbol varying fastest.
pub fn partition_sequences(alphabet: &[Partition], n: usize) -> Vec<Vec<Partition>> {
    let total = alphabet.len().pow(n as u32);
    (0..total)
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let p = alphabet[code % alphabet.len()].clone();
                    code /= alphabet.len();
                    p
                })
                .collect()
        })
        .collect()
}

fn cell(epsilon: f64, n: usize, out: SolveOutcome) -> InteriorityCell {
    let r = out.payload.report.as_ref();
    InteriorityCell {
        epsilon,
        n,
        partitions: out.payload.partitions,
        status: out.payload.status,
        certified: out.code == exit::OK,
        min_margin: r.map(GlueReport::min_margin),
        f_value: r.map(|r| r.f_value),
        gradient_norm: r.map(|r| r.gradient_norm),
        max_mismatch: r.map(GlueReport::max_mismatch),
        max_tangential_mismatch: r.map(GlueReport::max_tangential_mismatch),
        max_speed_mismatch: r.map(GlueReport::max_speed_mismatch),
        uniqueness_spread: r.map(|r| r.uniqueness_spread),
        max_energy_residual: r.map(|r| r.max_energy_residual),
        collision_limited: r.map(|r| r.collision_limited),
        starts: out.payload.starts,
        error: out.payload.error,
    }
}

/// Largest epsilon such that every cell at or below it is certified.
fn epsilon_bar(cells: &[InteriorityCell]) -> Option<f64> {
    let mut eps: Vec<f64> = cells.iter().map(|c| c.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let mut bar = None;
    for e in eps {
        if cells.iter().filter(|c| c.epsilon == e).all(|c| c.certified) {
            bar = Some(e);
        } else {
            break;
        }
    }
    bar
}

pub fn sweeps(cfg: &RunConfig, cell_dir: Option<&Path>) -> std::io::Result<(i32, SweepsPayload)> {
    let settings = cfg.glue_settings();
    let mut grid = cfg.sweep.epsilons.clone();
    if !grid.contains(&0.0) {
        grid.insert(0, 0.0);
    }
    let c1 = c1_sweep(cfg.potential.delta, &grid, cfg.sweep.outer_pairs, &cfg.potential, &settings.outer, settings.exec)
        .expect("outer pair count validated");
    let alphabet = Partition::all_two_block(cfg.potential.centres.len());
    let inner = inner_angular_sweep(&cfg.sweep.epsilons, cfg.sweep.inner_pairs, &alphabet, &cfg.potential, &settings.inner, settings.exec);
    let c1_value = c1.c1();
    let epsilon5 = inner.epsilon5(0.5 * c1_value);
    let mut interiority = Vec::new();
    if let Some(e5) = epsilon5 {
        let mut below: Vec<f64> = cfg.sweep.epsilons.iter().copied().filter(|&e| e <= e5).collect();
        below.sort_by(|a, b| b.total_cmp(a));
        for eps in below {
            let potential = cfg.potential.with_epsilon(eps);
            for &n in &cfg.sweep.ns {
                for (code, seq) in partition_sequences(&alphabet, n).into_iter().enumerate() {
                    let t = Instant::now();
                    let c = cell(eps, n, solve_with(&potential, &seq, cfg));
                    eprintln!(
                        "eps {eps} n {n} {:?}: {} margin {:?} collision-limited {:?} ({:.1?})",
                        c.partitions,
                        c.status,
                        c.min_margin,
                        c.collision_limited,
                        t.elapsed()
                    );
                    if let Some(dir) = cell_dir {
                        let json = serde_json::to_string_pretty(&c).expect("cell serializes");
                        write_atomic(&dir.join(format!("cells/eps{eps}_n{n}_{code}.json")), json.as_bytes())?;
                    }
                    interiority.push(c);
                }
            }
        }
    }
    let failed_cells = interiority.iter().filter(|c| !c.certified).count();
    let payload = SweepsPayload {
        inner_monotone: inner.is_non_increasing(0.0),
        c2: c1.c2,
        c1_value,
        epsilon5,
        epsilon_bar: epsilon_bar(&interiority),
        failed_cells,
        interiority,
        c1,
        inner,
    };
    let c1_failures = payload.c1.rows.iter().any(|r| !r.failures.is_empty());
    let code = if failed_cells > 0 || c1_failures || epsilon5.is_none() { exit::SWEEP_PARTIAL } else { exit::OK };
    Ok((code, payload))
}

/// Outer and inner angular-speed sweeps, then the interiority experiment at
/// every grid epsilon where the gap inequality holds.
pub fn run_sweeps(cfg: &RunConfig) -> std::io::Result<i32> {
    let (code, payload) = sweeps(cfg, cfg.out_dir.as_deref())?;
    if let Some(dir) = &cfg.out_dir {
        write_report(dir, "sweeps", cfg, code, &payload)?;
    }
    Ok(code)
}

// ---------------------------------------------------------------------------
// grad-check

pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
pub const GRADIENT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradientRow {
    pub config: usize,
    pub angles: Vec<f64>,
    pub k: usize,
    pub parity: String,
    pub theta: f64,
    pub analytic: f64,
    pub fd: Vec<f64>,
    /// `|analytic - fd| / (1 + |fd|)` per step.
    pub rel_error: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientPayload {
    pub steps: Vec<f64>,
    pub partitions: Vec<String>,
    pub rows: Vec<GradientRow>,
    pub skipped: Vec<String>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Random feasible junction vector: equally spaced outer legs with random
/// rotation and random chords below delta.
fn random_vector(rng: &mut ChaCha8Rng, partitions: &[Partition], potential: &PotentialConfig) -> JunctionVector {
    let n = partitions.len();
    let w = max_separation(potential);
    let offset = rng.gen_range(0.0..TAU);
    let mut angles = Vec::with_capacity(2 * n);
    for j in 0..n {
        let mid = offset + TAU * j as f64 / n as f64;
        let half = 0.5 * rng.gen_range(0.2..0.9) * w;
        angles.push(mid - half);
        angles.push(mid + half);
    }
    JunctionVector::new(angles, partitions.to_vec()).expect("counts match")
}

fn gradient_row(
    config: usize,
    k: usize,
    jv: &JunctionVector,
    legs: &[Leg],
    shift: f64,
    potential: &PotentialConfig,
    settings: &GlueSettings,
) -> ncentre_core::Result<GradientRow> {
    let ctx = GContext::new(k, jv, legs, potential, settings)?;
    let theta = ctx.anchor.theta + shift;
    let analytic = grad_g(&ctx, &BoundaryPoint::new(theta), potential, settings)?;
    let mut fd = Vec::with_capacity(FD_STEPS.len());
    for h in FD_STEPS {
        let plus = eval_g(&ctx, &BoundaryPoint::new(theta + h), potential, settings)?;
        let minus = eval_g(&ctx, &BoundaryPoint::new(theta - h), potential, settings)?;
        fd.push((plus - minus) / (2.0 * h));
    }
    let rel_error: Vec<f64> = fd.iter().map(|d| (analytic - d).abs() / (1.0 + d.abs())).collect();
    Ok(GradientRow {
        config,
        angles: jv.angles.clone(),
        k,
        parity: if k % 2 == 0 { "even" } else { "odd" }.into(),
        theta,
        analytic,
        fd,
        pass: rel_error.iter().all(|&e| e <= GRADIENT_TOL),
        rel_error,
    })
}

/// Analytic derivative of `G_k` against central differences on random
/// configurations, alternating junction parity.
pub fn gradient_check(cfg: &RunConfig) -> (i32, GradientPayload) {
    let settings = cfg.glue_settings();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let target = cfg.sweep.gradient_configs;
    let mut attempt = 0;
    while rows.len() < target && attempt < 20 * target {
        attempt += 1;
        let jv = random_vector(&mut rng, &cfg.partitions, &cfg.potential);
        let parity = rows.len() % 2;
        let k = 2 * rng.gen_range(0..jv.n()) + parity;
        let shift = rng.gen_range(-0.02..0.02);
        let row = solve_legs(&jv, &cfg.potential, &settings, None)
            .and_then(|legs| gradient_row(rows.len(), k, &jv, &legs, shift, &cfg.potential, &settings));
        match row {
            Ok(r) => rows.push(r),
            Err(e) => skipped.push(format!("angles {:?}: {e}", jv.angles)),
        }
    }
    let max_rel_error = rows.iter().flat_map(|r| r.rel_error.iter().copied()).fold(0.0, f64::max);
    let both = rows.iter().any(|r| r.k % 2 == 0) && rows.iter().any(|r| r.k % 2 == 1);
    let pass = rows.len() >= target && both && rows.iter().all(|r| r.pass);
    let payload = GradientPayload {
        steps: FD_STEPS.to_vec(),
        partitions: cfg.partitions.iter().map(Partition::label).collect(),
        rows,
        skipped,
        max_rel_error,
        pass,
    };
    (if pass { exit::OK } else { exit::GRADIENT_FAILURE }, payload)
}

pub fn run_gradient_check(cfg: &RunConfig) -> std::io::Result<i32> {
    let (code, payload) = gradient_check(cfg);
    for r in payload.rows.iter().filter(|r| !r.pass) {
        eprintln!("gradient check failed: junction {} ({}) at angles {:?}, errors {:?}", r.k, r.parity, r.angles, r.rel_error);
    }
    if let Some(dir) = &cfg.out_dir {
        write_report(dir, "grad-check", cfg, code, &payload)?;
    }
    Ok(code)
}

// ---------------------------------------------------------------------------
// export

#[derive(Debug, Clone, Serialize)]
pub struct ExportPayload {
    pub angles: Vec<f64>,
    pub report: Option<GlueReport>,
    pub trajectory: Option<TrajectoryManifest>,
    pub error: Option<String>,
}

/// Glued trajectory at the configured angles, or at the deterministic initial
/// vector when none are given.
pub fn export(cfg: &RunConfig) -> (i32, ExportPayload, Option<GluedTrajectory>) {
    let settings = cfg.glue_settings();
    let jv = match &cfg.angles {
        Some(a) => JunctionVector::new(a.clone(), cfg.partitions.clone()),
        None => JunctionVector::initial(cfg.partitions.clone(), &cfg.potential, cfg.solver.offset),
    };
    let run = jv.and_then(|jv| {
        let legs = solve_legs(&jv, &cfg.potential, &settings, None)?;
        let report = check_c1(&jv, &cfg.potential, &settings)?;
        Ok((jv, build_trajectory(&legs), report))
    });
    match run {
        Ok((jv, traj, report)) => {
            let code = if traj.is_closed() { exit::OK } else { exit::SOLVER_FAILURE };
            let payload = ExportPayload {
                angles: jv.angles,
                report: Some(report),
                trajectory: Some(TrajectoryManifest::new(&traj, "trajectory.csv")),
                error: None,
            };
            (code, payload, Some(traj))
        }
        Err(e) => (
            exit::SOLVER_FAILURE,
            ExportPayload {
                angles: cfg.angles.clone().unwrap_or_default(),
                report: None,
                trajectory: None,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

pub fn run_export(cfg: &RunConfig) -> std::io::Result<i32> {
    let (code, payload, traj) = export(cfg);
    if let Some(dir) = &cfg.out_dir {
        if let Some(t) = &traj {
            write_atomic(&dir.join("trajectory.csv"), &csv_bytes(t))?;
        }
        write_report(dir, "export", cfg, code, &payload)?;
    }
    Ok(code)
}
