//! Gluing outer and inner arcs at junction points of the circle `|x| = R`.
//!
//! Leg `l` runs from junction `l` to junction `l + 1 (mod 2n)`: even legs are
//! outer arcs, odd legs are inner arcs carrying the partition symbol
//! `partitions[l / 2]`. The junction angles are optimized block-wise (even
//! junctions, then odd junctions); inside a block the one-dimensional problems
//! are independent and may run in parallel.

use std::f64::consts::{SQRT_2, TAU};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::inner_arcs::{
    local_geodesic, solve_inner, solve_inner_from, truncation_point, ConvexNeighborhood, InnerSettings, InnerSolution,
    Partition, TruncationPoint,
};
use crate::integrator::Arc;
use crate::outer_arcs::{solve_outer_with, wrap_pi, BoundaryPoint, OuterSettings, OuterSolution};
use crate::potential::{tangent, PotentialConfig, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionVector {
    pub angles: Vec<f64>,
    pub partitions: Vec<Partition>,
}

/// Largest angular separation of two boundary points at chord `delta`.
pub fn max_separation(cfg: &PotentialConfig) -> f64 {
    2.0 * (0.5 * cfg.delta / cfg.radius).min(1.0).asin()
}

impl JunctionVector {
    pub fn new(angles: Vec<f64>, partitions: Vec<Partition>) -> Result<Self> {
        if partitions.is_empty() {
            return Err(Error::InvalidConfig("at least one partition symbol is required".into()));
        }
        if angles.len() != 2 * partitions.len() {
            return Err(Error::InvalidConfig(format!(
                "{} partition symbols need {} junction angles, got {}",
                partitions.len(),
                2 * partitions.len(),
                angles.len()
            )));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidConfig("junction angles must be finite".into()));
        }
        Ok(Self {
            angles: angles.into_iter().map(|a| a.rem_euclid(TAU)).collect(),
            partitions,
        })
    }

    /// Equally spaced outer legs, each spanning half the admissible chord angle.
    pub fn initial(partitions: Vec<Partition>, cfg: &PotentialConfig, offset: f64) -> Result<Self> {
        Self::initial_with_span(partitions, cfg, offset, 0.5 * max_separation(cfg))
    }

    /// Equally spaced outer legs centred at `offset + 2 pi j / n`, each running
    /// through the signed angle `span` (negative spans run clockwise).
    pub fn initial_with_span(partitions: Vec<Partition>, cfg: &PotentialConfig, offset: f64, span: f64) -> Result<Self> {
        if span.abs() > max_separation(cfg) {
            return Err(Error::InvalidConfig("outer span exceeds the chord bound".into()));
        }
        let n = partitions.len();
        let h = span;
        let mut angles = Vec::with_capacity(2 * n);
        for j in 0..n {
            let phi = offset + TAU * j as f64 / n.max(1) as f64;
            angles.push(phi - 0.5 * h);
            angles.push(phi + 0.5 * h);
        }
        Self::new(angles, partitions)
    }

    pub fn n(&self) -> usize {
        self.partitions.len()
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn point(&self, k: usize) -> BoundaryPoint {
        BoundaryPoint::new(self.angles[k % self.len()])
    }

    /// The junction sharing the outer leg with `k`.
    pub fn partner(k: usize) -> usize {
        k ^ 1
    }

    pub fn chord(&self, k: usize, cfg: &PotentialConfig) -> f64 {
        self.point(k).chord(&self.point(Self::partner(k)), cfg.radius)
    }

    pub fn is_feasible(&self, cfg: &PotentialConfig) -> bool {
        (0..self.n()).all(|j| self.chord(2 * j, cfg) <= cfg.delta)
    }

    pub fn with_angle(&self, k: usize, theta: f64) -> Self {
        let mut jv = self.clone();
        jv.angles[k] = theta.rem_euclid(TAU);
        jv
    }

    pub fn labels(&self) -> Vec<String> {
        self.partitions.iter().map(Partition::label).collect()
    }
}

/// Per-junction margin `delta - |p_k - p_partner|`.
pub fn interior_margin(jv: &JunctionVector, cfg: &PotentialConfig) -> Vec<f64> {
    (0..jv.len()).map(|k| cfg.delta - jv.chord(k, cfg)).collect()
}

// ---------------------------------------------------------------------------
// Legs

#[derive(Debug, Clone, PartialEq)]
pub enum Leg {
    Outer(OuterSolution),
    Inner(InnerSolution),
}

impl Leg {
    pub fn arc(&self) -> &Arc {
        match self {
            Leg::Outer(s) => &s.arc,
            Leg::Inner(s) => &s.arc,
        }
    }

    pub fn jacobi_length(&self) -> f64 {
        match self {
            Leg::Outer(s) => s.jacobi_length,
            Leg::Inner(s) => s.jacobi_length,
        }
    }

    pub fn departure_velocity(&self) -> Vec2 {
        self.arc().start().velocity
    }

    pub fn arrival_velocity(&self) -> Vec2 {
        self.arc().end().velocity
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlueSettings {
    pub outer: OuterSettings,
    pub inner: InnerSettings,
    /// Target on the largest per-junction derivative of F.
    pub tol: f64,
    pub c1_tolerance: f64,
    pub max_sweeps: usize,
    pub max_line_iterations: usize,
    /// Accepted steps per junction and sweep.
    pub line_steps: usize,
    /// Over-relaxation factor on the secant-Newton step.
    pub relaxation: f64,
    /// Integration tolerance of the local geodesics in `G_k`.
    pub local_tol: f64,
    /// Stop when the largest derivative has not halved over this many sweeps.
    pub stall_window: usize,
    pub exec: Execution,
}

impl Default for GlueSettings {
    fn default() -> Self {
        Self {
            outer: OuterSettings::default(),
            inner: InnerSettings::default(),
            tol: 1e-8,
            c1_tolerance: 1e-5,
            max_sweeps: 300,
            max_line_iterations: 40,
            line_steps: 1,
            relaxation: 1.4,
            local_tol: 1e-10,
            stall_window: 30,
            exec: Execution::default(),
        }
    }
}

fn solve_leg(l: usize, jv: &JunctionVector, cfg: &PotentialConfig, settings: &GlueSettings, warm: Option<&Leg>) -> Result<Leg> {
    let (a, b) = (jv.point(l), jv.point(l + 1));
    let solved = if l % 2 == 0 {
        let alpha = match warm {
            Some(Leg::Outer(o)) => Some(o.alpha),
            _ => None,
        };
        solve_outer_with(&a, &b, cfg, &settings.outer, alpha)
            .or_else(|e| if alpha.is_some() { solve_outer_with(&a, &b, cfg, &settings.outer, None) } else { Err(e) })
            .map(Leg::Outer)
    } else {
        let partition = &jv.partitions[l / 2];
        match warm {
            Some(Leg::Inner(s)) => solve_inner_from(&a, &b, partition, cfg, &settings.inner, s.beta),
            _ => solve_inner(&a, &b, partition, cfg, &settings.inner),
        }
        .map(Leg::Inner)
    };
    solved.map_err(|e| e.on_leg(l))
}

/// Solves all `2n` legs, warm-started from `warm` when given.
pub fn solve_legs(jv: &JunctionVector, cfg: &PotentialConfig, settings: &GlueSettings, warm: Option<&[Leg]>) -> Result<Vec<Leg>> {
    let ids: Vec<usize> = (0..jv.len()).collect();
    exec::map(settings.exec, &ids, |&l| solve_leg(l, jv, cfg, settings, warm.map(|w| &w[l])))
        .into_iter()
        .collect()
}

/// Sum of the Jacobi lengths of all legs.
pub fn eval_f(jv: &JunctionVector, cfg: &PotentialConfig, settings: &GlueSettings) -> Result<f64> {
    Ok(solve_legs(jv, cfg, settings, None)?.iter().map(Leg::jacobi_length).sum())
}

fn in_leg(k: usize, len: usize) -> usize {
    (k + len - 1) % len
}

/// Velocity jump `v_in(arrival) - v_out(departure)` at junction `k`.
pub fn velocity_mismatch(k: usize, legs: &[Leg]) -> Vec2 {
    legs[in_leg(k, legs.len())].arrival_velocity() - legs[k].departure_velocity()
}

/// `dF/dtheta_k = (R / sqrt 2) <v_in - v_out, tau(theta_k)>`.
pub fn junction_gradient(k: usize, jv: &JunctionVector, legs: &[Leg], cfg: &PotentialConfig) -> f64 {
    cfg.radius / SQRT_2 * velocity_mismatch(k, legs).dot(&tangent(jv.angles[k]))
}

pub fn gradient(jv: &JunctionVector, legs: &[Leg], cfg: &PotentialConfig) -> Vec<f64> {
    (0..jv.len()).map(|k| junction_gradient(k, jv, legs, cfg)).collect()
}

// ---------------------------------------------------------------------------
// Surrogates G_k

/// Frozen data defining `G_k` around the junction `p_k` of a reference vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GContext {
    pub k: usize,
    pub anchor: BoundaryPoint,
    /// Far end of the outer leg through `p_k`.
    pub neighbor: BoundaryPoint,
    pub nbhd: ConvexNeighborhood,
    /// Truncation point on the inner leg, measured from the junction.
    pub truncation: TruncationPoint,
    /// Jacobi length of the inner leg between the junction and the truncation point.
    pub inner_prefix: f64,
    outer_alpha: f64,
}

/// Value and derivative of `G_k` at one boundary point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GValue {
    pub value: f64,
    pub gradient: f64,
    pub outer_length: f64,
    pub local_length: f64,
}

impl GContext {
    pub fn new(k: usize, jv: &JunctionVector, legs: &[Leg], cfg: &PotentialConfig, settings: &GlueSettings) -> Result<Self> {
        let len = jv.len();
        let anchor = jv.point(k);
        let (outer, inner, neighbor) = if k % 2 == 1 {
            (&legs[k - 1], legs[k].arc().clone(), jv.point(k - 1))
        } else {
            (&legs[k], legs[in_leg(k, len)].arc().reversed(), jv.point(k + 1))
        };
        let Leg::Outer(outer) = outer else {
            return Err(Error::InvalidConfig("leg layout does not alternate".into()));
        };
        let nbhd = ConvexNeighborhood::establish(anchor.position(cfg.radius), cfg, settings.local_tol)?;
        let truncation = truncation_point(&inner, &nbhd, cfg)?;
        Ok(Self {
            k,
            anchor,
            neighbor,
            nbhd,
            inner_prefix: inner.length_at(cfg, truncation.t_star),
            truncation,
            outer_alpha: outer.alpha,
        })
    }

    pub fn evaluate(&self, p: &BoundaryPoint, cfg: &PotentialConfig, settings: &GlueSettings) -> Result<GValue> {
        let chord = p.chord(&self.neighbor, cfg.radius);
        if chord > cfg.delta * (1.0 + 1e-12) {
            return Err(Error::ConditionViolation(format!("chord {chord:.6} exceeds delta")));
        }
        let x = p.position(cfg.radius);
        let local = local_geodesic(&x, &self.truncation.point, &self.nbhd, cfg, settings.local_tol)?;
        let odd = self.k % 2 == 1;
        let (from, to) = if odd { (self.neighbor, *p) } else { (*p, self.neighbor) };
        let outer = solve_outer_with(&from, &to, cfg, &settings.outer, Some(self.outer_alpha))?;
        // the local geodesic is computed from p; for even k its reverse ends at p
        let dv = if odd {
            outer.arrival_velocity() - local.departure_velocity()
        } else {
            -local.departure_velocity() - outer.departure_velocity()
        };
        Ok(GValue {
            value: outer.jacobi_length + local.jacobi_length,
            gradient: cfg.radius / SQRT_2 * dv.dot(&tangent(p.theta)),
            outer_length: outer.jacobi_length,
            local_length: local.jacobi_length,
        })
    }
}

pub fn eval_g(ctx: &GContext, p: &BoundaryPoint, cfg: &PotentialConfig, settings: &GlueSettings) -> Result<f64> {
    ctx.evaluate(p, cfg, settings).map(|g| g.value)
}

pub fn grad_g(ctx: &GContext, p: &BoundaryPoint, cfg: &PotentialConfig, settings: &GlueSettings) -> Result<f64> {
    ctx.evaluate(p, cfg, settings).map(|g| g.gradient)
}

// ---------------------------------------------------------------------------
// Minimization

struct LineResult {
    theta: f64,
    legs: (Leg, Leg),
    moved: bool,
    curvature: Option<f64>,
}

struct Trial {
    value: f64,
    gradient: f64,
    legs: (Leg, Leg),
}

fn trial(
    k: usize,
    theta: f64,
    jv: &JunctionVector,
    warm: (&Leg, &Leg),
    cfg: &PotentialConfig,
    settings: &GlueSettings,
) -> Result<Trial> {
    let moved = jv.with_angle(k, theta);
    let li = in_leg(k, jv.len());
    let a = solve_leg(li, &moved, cfg, settings, Some(warm.0))?;
    let b = solve_leg(k, &moved, cfg, settings, Some(warm.1))?;
    let dv = a.arrival_velocity() - b.departure_velocity();
    Ok(Trial {
        value: a.jacobi_length() + b.jacobi_length(),
        gradient: cfg.radius / SQRT_2 * dv.dot(&tangent(theta)),
        legs: (a, b),
    })
}

/// Safeguarded secant-Newton on the derivative of the two legs meeting at `k`,
/// with the angle confined to the chord ball around its partner. Stops once
/// the derivative is below `target` or after `settings.line_steps` accepted
/// steps. `curvature` carries the secant estimate between sweeps.
fn relax_junction(
    k: usize,
    jv: &JunctionVector,
    legs: &[Leg],
    target: f64,
    mut curvature: Option<f64>,
    cfg: &PotentialConfig,
    settings: &GlueSettings,
) -> LineResult {
    let li = in_leg(k, jv.len());
    let partner = jv.angles[JunctionVector::partner(k)];
    let width = max_separation(cfg);
    let (lo, hi) = (-width, width);
    let mut d = wrap_pi(jv.angles[k] - partner);
    let mut cur = Trial {
        value: legs[li].jacobi_length() + legs[k].jacobi_length(),
        gradient: junction_gradient(k, jv, legs, cfg),
        legs: (legs[li].clone(), legs[k].clone()),
    };
    let mut fallback = 1e-3;
    let mut moved = false;
    let mut accepted_steps = 0;
    for _ in 0..settings.max_line_iterations {
        if accepted_steps == settings.line_steps {
            break;
        }
        let g = cur.gradient;
        if g.abs() <= target || (d >= hi && g < 0.0) || (d <= lo && g > 0.0) {
            break;
        }
        let mut step = match curvature {
            Some(c) => -settings.relaxation * g / c,
            None => -g.signum() * fallback,
        };
        step = step.clamp(-0.1, 0.1);
        let mut accepted = false;
        for _ in 0..20 {
            let next = (d + step).clamp(lo, hi);
            let taken = next - d;
            if taken == 0.0 {
                break;
            }
            let Ok(t) = trial(k, partner + next, jv, (&cur.legs.0, &cur.legs.1), cfg, settings) else {
                step *= 0.5;
                continue;
            };
            let slack = 1e-12 * cur.value.abs();
            let armijo = t.value <= cur.value + 1e-4 * g * taken + slack;
            let tiny = (g * taken).abs() <= slack && t.gradient.abs() < g.abs();
            if armijo || tiny {
                let c = (t.gradient - g) / taken;
                curvature = (c.is_finite() && c > 0.0).then_some(c);
                if curvature.is_none() {
                    fallback = (2.0 * fallback).min(0.1);
                }
                d = next;
                cur = t;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        moved = true;
        accepted_steps += 1;
    }
    LineResult {
        theta: (partner + d).rem_euclid(TAU),
        legs: cur.legs,
        moved,
        curvature,
    }
}

/// Result of [`minimize_f`].
#[derive(Debug, Clone)]
pub struct Minimized {
    pub jv: JunctionVector,
    pub legs: Vec<Leg>,
    pub report: GlueReport,
}

/// Projected block-coordinate descent: even junctions, then odd junctions,
/// until the largest per-junction derivative is below `settings.tol`.
pub fn minimize_f(initial: &JunctionVector, cfg: &PotentialConfig, settings: &GlueSettings) -> Result<Minimized> {
    if !initial.is_feasible(cfg) {
        return Err(Error::InvalidConfig("initial junction vector violates the chord constraint".into()));
    }
    let mut jv = initial.clone();
    let mut legs = solve_legs(&jv, cfg, settings, None)?;
    let mut history = vec![legs.iter().map(Leg::jacobi_length).sum::<f64>()];
    let mut converged = false;
    let mut constraint_active = false;
    let mut sweeps = 0;
    let len = jv.len();
    let mut curvatures = vec![None; len];
    let mut gmax = Vec::new();
    loop {
        refresh_inner_legs(&jv, &mut legs, cfg, settings);
        let g = gradient(&jv, &legs, cfg);
        if (0..len).all(|k| g[k].abs() <= settings.tol || bound_active(k, &jv, g[k], cfg)) {
            converged = true;
            constraint_active = (0..len).any(|k| g[k].abs() > settings.tol);
            break;
        }
        gmax.push(g.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        let w = settings.stall_window;
        if sweeps == settings.max_sweeps || (w > 0 && sweeps >= w && gmax[sweeps] > 0.5 * gmax[sweeps - w]) {
            break;
        }
        sweeps += 1;
        let target = 0.5 * settings.tol;
        let mut progress = false;
        for parity in [0, 1] {
            let ks: Vec<usize> = (parity..len).step_by(2).collect();
            let results = exec::map(settings.exec, &ks, |&k| relax_junction(k, &jv, &legs, target, curvatures[k], cfg, settings));
            for (&k, r) in ks.iter().zip(results) {
                curvatures[k] = r.curvature;
                progress |= r.moved;
                jv.angles[k] = r.theta;
                legs[in_leg(k, len)] = r.legs.0;
                legs[k] = r.legs.1;
            }
        }
        history.push(legs.iter().map(Leg::jacobi_length).sum());
        if !progress {
            break;
        }
    }
    let mut report = report_from_legs(&jv, &legs, cfg, settings);
    report.converged = converged;
    report.constraint_active = constraint_active;
    report.sweeps = sweeps;
    report.f_history = history;
    report.uniqueness_spread = uniqueness_spread(&jv, &legs, cfg, settings);
    Ok(Minimized { jv, legs, report })
}

/// Initial vector of a multi-start run, see [`JunctionVector::initial_with_span`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Start {
    pub offset: f64,
    pub span: f64,
}

/// One start of [`minimize_multistart`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub offset: f64,
    pub span: f64,
    pub converged: bool,
    pub f_value: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MultiStart {
    pub best: Minimized,
    pub starts: Vec<StartRecord>,
}

impl Minimized {
    /// Converged to an interior point with every junction C¹ within tolerance.
    pub fn is_certified(&self) -> bool {
        let r = &self.report;
        r.converged && !r.constraint_active && r.interior && r.c1_verdict
    }
}

/// Runs [`minimize_f`] from each start in turn. Stops at the first certified
/// minimizer; otherwise returns the result with the smallest derivative,
/// preferring converged ones. Fails only when every start fails.
pub fn minimize_multistart(
    partitions: &[Partition],
    starts_in: &[Start],
    cfg: &PotentialConfig,
    settings: &GlueSettings,
) -> Result<MultiStart> {
    let mut best: Option<Minimized> = None;
    let mut starts = Vec::with_capacity(starts_in.len());
    let mut last_error = Error::InvalidConfig("no starts given".into());
    for &Start { offset, span } in starts_in {
        let run = JunctionVector::initial_with_span(partitions.to_vec(), cfg, offset, span)
            .and_then(|jv| minimize_f(&jv, cfg, settings));
        match run {
            Ok(m) => {
                starts.push(StartRecord {
                    offset,
                    span,
                    converged: m.report.converged,
                    f_value: Some(m.report.f_value),
                    gradient_norm: Some(m.report.gradient_norm),
                    error: None,
                });
                let done = m.is_certified();
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let key = |r: &GlueReport| (!r.converged, r.gradient_norm);
                        let (a, c) = (key(&m.report), key(&b.report));
                        a.0 < c.0 || (a.0 == c.0 && a.1 < c.1)
                    }
                };
                if done || better {
                    best = Some(m);
                }
                if done {
                    break;
                }
            }
            Err(e) => {
                starts.push(StartRecord {
                    offset,
                    span,
                    converged: false,
                    f_value: None,
                    gradient_norm: None,
                    error: Some(e.to_string()),
                });
                last_error = e;
            }
        }
    }
    match best {
        Some(best) => Ok(MultiStart { best, starts }),
        None => Err(last_error),
    }
}

/// Replaces warm-tracked inner legs by a cold solve when that is shorter, so
/// the iteration does not follow a geodesic that stopped being minimal.
fn refresh_inner_legs(jv: &JunctionVector, legs: &mut [Leg], cfg: &PotentialConfig, settings: &GlueSettings) {
    let ids: Vec<usize> = (1..jv.len()).step_by(2).collect();
    let fresh = exec::map(settings.exec, &ids, |&l| solve_leg(l, jv, cfg, settings, None));
    for (&l, f) in ids.iter().zip(fresh) {
        if let Ok(f) = f {
            if f.jacobi_length() < legs[l].jacobi_length() * (1.0 - 1e-10) {
                legs[l] = f;
            }
        }
    }
}

fn bound_active(k: usize, jv: &JunctionVector, g: f64, cfg: &PotentialConfig) -> bool {
    let d = wrap_pi(jv.angles[k] - jv.angles[JunctionVector::partner(k)]);
    let at_edge = d.abs() >= max_separation(cfg) * (1.0 - 1e-12);
    at_edge && g * d < 0.0
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionReport {
    pub index: usize,
    pub theta: f64,
    pub mismatch: [f64; 2],
    pub mismatch_norm: f64,
    /// Derivative of F along the circle at this junction.
    pub gradient: f64,
    pub tangential_mismatch: f64,
    pub radial_in: f64,
    pub radial_out: f64,
    pub speed_in: f64,
    pub speed_out: f64,
    pub speed_mismatch: f64,
    /// Radial components disagree with the expected crossing direction.
    pub bounce: bool,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlueReport {
    pub angles: Vec<f64>,
    pub partitions: Vec<String>,
    pub junctions: Vec<JunctionReport>,
    pub leg_lengths: Vec<f64>,
    pub f_value: f64,
    pub gradient_norm: f64,
    pub c1_tolerance: f64,
    pub c1_verdict: bool,
    pub interior: bool,
    pub converged: bool,
    pub constraint_active: bool,
    pub sweeps: usize,
    pub f_history: Vec<f64>,
    pub uniqueness_spread: f64,
    pub max_energy_residual: f64,
    /// Closest approach of any leg to a centre.
    pub min_centre_distance: f64,
    /// Some leg touches the collision radius.
    pub collision_limited: bool,
}

impl GlueReport {
    pub fn max_mismatch(&self) -> f64 {
        self.junctions.iter().map(|j| j.mismatch_norm).fold(0.0, f64::max)
    }

    pub fn max_tangential_mismatch(&self) -> f64 {
        self.junctions.iter().map(|j| j.tangential_mismatch.abs()).fold(0.0, f64::max)
    }

    pub fn max_speed_mismatch(&self) -> f64 {
        self.junctions.iter().map(|j| j.speed_mismatch).fold(0.0, f64::max)
    }

    pub fn min_margin(&self) -> f64 {
        self.junctions.iter().map(|j| j.margin).fold(f64::INFINITY, f64::min)
    }
}

fn report_from_legs(jv: &JunctionVector, legs: &[Leg], cfg: &PotentialConfig, settings: &GlueSettings) -> GlueReport {
    let margins = interior_margin(jv, cfg);
    let junctions: Vec<JunctionReport> = (0..jv.len())
        .map(|k| {
            let v_in = legs[in_leg(k, jv.len())].arrival_velocity();
            let v_out = legs[k].departure_velocity();
            let dv = v_in - v_out;
            let normal = jv.point(k).position(1.0);
            let (radial_in, radial_out) = (v_in.dot(&normal), v_out.dot(&normal));
            // outer arrives and inner departs inward at odd junctions; outward at even ones
            let expected = if k % 2 == 1 { -1.0 } else { 1.0 };
            GlueReport::junction(k, jv, dv, v_in, v_out, radial_in, radial_out, expected, margins[k], cfg)
        })
        .collect();
    let c1_verdict = junctions.iter().all(|j| j.mismatch_norm <= settings.c1_tolerance);
    let min_centre_distance = legs
        .iter()
        .flat_map(|l| &l.arc().samples)
        .map(|s| cfg.nearest_centre(&s.position).1)
        .fold(f64::INFINITY, f64::min);
    GlueReport {
        angles: jv.angles.clone(),
        partitions: jv.labels(),
        gradient_norm: junctions.iter().map(|j| j.gradient.abs()).fold(0.0, f64::max),
        interior: margins.iter().all(|&m| m > 0.0),
        junctions,
        leg_lengths: legs.iter().map(Leg::jacobi_length).collect(),
        f_value: legs.iter().map(Leg::jacobi_length).sum(),
        c1_tolerance: settings.c1_tolerance,
        c1_verdict,
        converged: false,
        constraint_active: false,
        sweeps: 0,
        f_history: Vec::new(),
        uniqueness_spread: 0.0,
        max_energy_residual: legs.iter().map(|l| l.arc().max_energy_residual).fold(0.0, f64::max),
        min_centre_distance,
        collision_limited: min_centre_distance <= 1.01 * cfg.collision_radius(),
    }
}

impl GlueReport {
    #[allow(clippy::too_many_arguments)]
    fn junction(
        k: usize,
        jv: &JunctionVector,
        dv: Vec2,
        v_in: Vec2,
        v_out: Vec2,
        radial_in: f64,
        radial_out: f64,
        expected: f64,
        margin: f64,
        cfg: &PotentialConfig,
    ) -> JunctionReport {
        let tau = tangent(jv.angles[k]);
        let tangential = dv.dot(&tau);
        JunctionReport {
            index: k,
            theta: jv.angles[k],
            mismatch: [dv.x, dv.y],
            mismatch_norm: dv.norm(),
            gradient: cfg.radius / SQRT_2 * tangential,
            tangential_mismatch: tangential,
            radial_in,
            radial_out,
            speed_in: v_in.norm(),
            speed_out: v_out.norm(),
            speed_mismatch: (v_in.norm() - v_out.norm()).abs(),
            bounce: radial_in * expected <= 0.0 || radial_out * expected <= 0.0,
            margin,
        }
    }
}

/// Sup-distance between two arcs compared at equal times, plus the duration gap.
pub fn arc_distance(a: &Arc, b: &Arc, cfg: &PotentialConfig) -> f64 {
    let one_way = |x: &Arc, y: &Arc| {
        x.samples
            .iter()
            .map(|s| (s.position - y.state_at(cfg, s.t).position).norm())
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a)).max((a.duration - b.duration).abs())
}

/// Re-solves every inner leg cold and from perturbed departure directions and
/// returns the largest distance to the legs in use.
pub fn uniqueness_spread(jv: &JunctionVector, legs: &[Leg], cfg: &PotentialConfig, settings: &GlueSettings) -> f64 {
    let ids: Vec<usize> = (0..jv.len()).filter(|l| l % 2 == 1).collect();
    let spreads = exec::map(settings.exec, &ids, |&l| {
        let Leg::Inner(sol) = &legs[l] else { return f64::INFINITY };
        let (a, b) = (jv.point(l), jv.point(l + 1));
        let partition = &jv.partitions[l / 2];
        let mut worst = 0.0f64;
        let mut probes = vec![solve_inner(&a, &b, partition, cfg, &settings.inner)];
        for db in [-1e-3, 1e-3] {
            probes.push(solve_inner_from(&a, &b, partition, cfg, &settings.inner, sol.beta + db));
        }
        for p in probes {
            worst = worst.max(match p {
                Ok(p) => arc_distance(&p.arc, &sol.arc, cfg),
                Err(_) => f64::INFINITY,
            });
        }
        worst
    });
    spreads.into_iter().fold(0.0, f64::max)
}

/// Solves the legs at `jv` from scratch and reports junction mismatches and
/// the uniqueness probe.
pub fn check_c1(jv: &JunctionVector, cfg: &PotentialConfig, settings: &GlueSettings) -> Result<GlueReport> {
    let legs = solve_legs(jv, cfg, settings, None)?;
    let mut report = report_from_legs(jv, &legs, cfg, settings);
    report.converged = report.gradient_norm <= settings.tol;
    report.uniqueness_spread = uniqueness_spread(jv, &legs, cfg, settings);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone, PartialEq)]
pub struct GluedTrajectory {
    pub arcs: Vec<Arc>,
    /// Cumulative junction times, starting at 0 and ending at the period.
    pub junction_times: Vec<f64>,
    pub period: f64,
    /// Distance between the end of the last arc and the start of the first.
    pub closure_error: f64,
    pub max_position_jump: f64,
    pub max_velocity_jump: f64,
}

impl GluedTrajectory {
    pub fn is_closed(&self) -> bool {
        self.closure_error <= 1e-8
    }

    /// Writes `t,x,y,vx,vy,kind,arc_id,junction_flag` rows; the first and last
    /// sample of each arc carry the junction flag.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,x,y,vx,vy,kind,arc_id,junction_flag")?;
        for (i, arc) in self.arcs.iter().enumerate() {
            let t0 = self.junction_times[i];
            let last = arc.samples.len() - 1;
            for (j, s) in arc.samples.iter().enumerate() {
                writeln!(
                    out,
                    "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{}",
                    t0 + s.t,
                    s.position.x,
                    s.position.y,
                    s.velocity.x,
                    s.velocity.y,
                    arc.kind.as_str(),
                    i,
                    u8::from(j == 0 || j == last)
                )?;
            }
        }
        Ok(())
    }
}

pub fn build_trajectory(legs: &[Leg]) -> GluedTrajectory {
    let arcs: Vec<Arc> = legs.iter().map(|l| l.arc().clone()).collect();
    let mut junction_times = Vec::with_capacity(arcs.len() + 1);
    let mut t = 0.0;
    junction_times.push(t);
    for a in &arcs {
        t += a.duration;
        junction_times.push(t);
    }
    let mut max_position_jump = 0.0f64;
    let mut max_velocity_jump = 0.0f64;
    for l in 0..arcs.len() {
        let (end, start) = (arcs[l].end(), arcs[(l + 1) % arcs.len()].start());
        max_position_jump = max_position_jump.max((end.position - start.position).norm());
        max_velocity_jump = max_velocity_jump.max((end.velocity - start.velocity).norm());
    }
    let closure_error = match (arcs.first(), arcs.last()) {
        (Some(a), Some(b)) => (b.end().position - a.start().position).norm(),
        _ => 0.0,
    };
    GluedTrajectory {
        period: arcs.iter().map(|a| a.duration).sum(),
        arcs,
        junction_times,
        closure_error,
        max_position_jump,
        max_velocity_jump,
    }
}

/// Solves the legs at `jv` and concatenates them.
pub fn build_trajectory_at(jv: &JunctionVector, cfg: &PotentialConfig, settings: &GlueSettings) -> Result<GluedTrajectory> {
    Ok(build_trajectory(&solve_legs(jv, cfg, settings, None)?))
}
