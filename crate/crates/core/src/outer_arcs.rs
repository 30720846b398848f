//! Exterior arcs between two points of the gluing circle, found by shooting
//! over the departure direction, and the sweep of their terminal angular
//! speeds at fixed chord.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::integrator::{crossing_with, Arc, ArcKind, Direction, IntegratorSettings, State};
use crate::potential::{angular_speed, on_circle, tangent, PotentialConfig, Vec2};

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_pi(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// A point of the gluing circle, stored by its angle in `[0, 2 pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub theta: f64,
}

impl BoundaryPoint {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: theta.rem_euclid(TAU),
        }
    }

    pub fn position(&self, radius: f64) -> Vec2 {
        on_circle(radius, self.theta)
    }

    pub fn chord(&self, other: &BoundaryPoint, radius: f64) -> f64 {
        2.0 * radius * (0.5 * wrap_pi(self.theta - other.theta)).sin().abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterSettings {
    pub integrator: IntegratorSettings,
    /// Required distance between the arrival point and the target.
    pub position_tol: f64,
    pub max_time: f64,
    pub max_iterations: usize,
}

impl OuterSettings {
    pub fn from_tol(tol: f64) -> Self {
        Self {
            integrator: IntegratorSettings::from_tol(tol),
            position_tol: 1e-11,
            max_time: 20.0,
            max_iterations: 100,
        }
    }
}

impl Default for OuterSettings {
    fn default() -> Self {
        Self::from_tol(1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterSolution {
    pub arc: Arc,
    pub t_ext: f64,
    pub departure: BoundaryPoint,
    pub arrival: BoundaryPoint,
    /// Departure direction measured from the outward normal.
    pub alpha: f64,
    pub terminal_angular_speed: f64,
    pub jacobi_length: f64,
    /// Distance between the computed arrival and the requested endpoint.
    pub residual: f64,
}

impl OuterSolution {
    pub fn departure_velocity(&self) -> Vec2 {
        self.arc.start().velocity
    }

    pub fn arrival_velocity(&self) -> Vec2 {
        self.arc.end().velocity
    }
}

struct Shot {
    arc: Arc,
    swept: f64,
}

/// Launches from `p_a` at angle `alpha` from the outward normal and follows the
/// arc back to the circle, accumulating the swept polar angle.
fn shoot(p_a: &BoundaryPoint, alpha: f64, cfg: &PotentialConfig, settings: &OuterSettings, dense: bool) -> Result<Shot> {
    let x = p_a.position(cfg.radius);
    let speed = cfg.speed_from_energy(&x)?;
    let normal = x / cfg.radius;
    let v = speed * (alpha.cos() * normal + alpha.sin() * tangent(p_a.theta));
    let mut integ = settings.integrator;
    if dense {
        integ = integ.dense(10.0 * integ.energy_tol);
    }
    let (arc, _) = crossing_with(
        &State::new(x, v),
        cfg.radius,
        Direction::Inward,
        settings.max_time,
        cfg,
        &integ,
        ArcKind::Outer,
    )?;
    let mut swept = 0.0;
    for w in arc.samples.windows(2) {
        let (a, b) = (w[0].position, w[1].position);
        swept += (a.x * b.y - a.y * b.x).atan2(a.dot(&b));
    }
    Ok(Shot { arc, swept })
}

const ALPHA_LIMIT: f64 = 1.4;

/// The exterior arc from `p_a` to `p_b`.
pub fn solve_outer(p_a: &BoundaryPoint, p_b: &BoundaryPoint, cfg: &PotentialConfig, tol: f64) -> Result<OuterSolution> {
    solve_outer_with(p_a, p_b, cfg, &OuterSettings::from_tol(tol), None)
}

/// Shooting with an optional starting direction (warm start from a nearby solve).
pub fn solve_outer_with(
    p_a: &BoundaryPoint,
    p_b: &BoundaryPoint,
    cfg: &PotentialConfig,
    settings: &OuterSettings,
    alpha_guess: Option<f64>,
) -> Result<OuterSolution> {
    let target = wrap_pi(p_b.theta - p_a.theta);
    let residual = |alpha: f64| -> Result<f64> { Ok(shoot(p_a, alpha, cfg, settings, false)?.swept - target) };

    // Bracket the root nearest the starting direction.
    let mut a = alpha_guess.unwrap_or(0.0).clamp(-ALPHA_LIMIT, ALPHA_LIMIT);
    let mut fa = residual(a)?;
    let ftol = settings.position_tol / cfg.radius;
    if alpha_guess.is_some() {
        if let Some(alpha) = secant(a, fa, 1e-6, ftol, 0.05, residual) {
            if let Ok(sol) = finish_outer(p_a, p_b, alpha, cfg, settings) {
                return Ok(sol);
            }
        }
    }
    let mut step = if alpha_guess.is_some() { 1e-4 } else { 0.05 };
    let dir = -fa.signum();
    let mut b = a;
    let mut fb = fa;
    let mut found = fa == 0.0;
    while !found {
        let next = (b + dir * step).clamp(-ALPHA_LIMIT, ALPHA_LIMIT);
        if next == b {
            return Err(Error::NoConvergence(format!(
                "no departure direction reaches {:.6} from {:.6}",
                p_b.theta, p_a.theta
            )));
        }
        let f_next = residual(next)?;
        if f_next.signum() != fa.signum() || f_next == 0.0 {
            b = next;
            fb = f_next;
            found = true;
        } else {
            a = next;
            fa = f_next;
            b = next;
            fb = f_next;
            step *= 2.0;
        }
    }
    let alpha = if fa == 0.0 {
        a
    } else if fb == 0.0 {
        b
    } else {
        illinois(a, fa, b, fb, ftol, settings.max_iterations, residual)?
    };
    finish_outer(p_a, p_b, alpha, cfg, settings)
}

fn finish_outer(p_a: &BoundaryPoint, p_b: &BoundaryPoint, alpha: f64, cfg: &PotentialConfig, settings: &OuterSettings) -> Result<OuterSolution> {
    let shot = shoot(p_a, alpha, cfg, settings, true)?;
    let end = shot.arc.end();
    let arrival_error = (end.position - p_b.position(cfg.radius)).norm();
    if arrival_error > 100.0 * settings.position_tol {
        return Err(Error::NoConvergence(format!("arrival error {arrival_error:.3e}")));
    }
    let arc = shot.arc;
    Ok(OuterSolution {
        t_ext: arc.duration,
        departure: *p_a,
        arrival: BoundaryPoint::new(end.position.y.atan2(end.position.x)),
        alpha,
        terminal_angular_speed: angular_speed(&end.position, &end.velocity)?,
        jacobi_length: arc.jacobi_length(),
        residual: arrival_error,
        arc,
    })
}

/// Secant iteration from a warm start; `None` when it does not settle.
pub(crate) fn secant<F>(x0: f64, f0: f64, h: f64, ftol: f64, max_step: f64, mut f: F) -> Option<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if f0.abs() <= ftol {
        return Some(x0);
    }
    let (mut a, mut fa) = (x0, f0);
    let mut b = x0 + h;
    let mut fb = f(b).ok()?;
    for _ in 0..12 {
        if fb.abs() <= ftol {
            return Some(b);
        }
        if (fb - fa).abs() > 1.0 {
            return None;
        }
        let slope = (fb - fa) / (b - a);
        if !slope.is_finite() || slope == 0.0 {
            return None;
        }
        (a, fa) = (b, fb);
        b += (-fb / slope).clamp(-max_step, max_step);
        fb = f(b).ok()?;
    }
    None
}

/// Illinois-modified regula falsi on a sign-changing bracket.
pub(crate) fn illinois<F>(mut a: f64, mut fa: f64, mut b: f64, mut fb: f64, ftol: f64, max_iter: usize, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut side = 0i32;
    let mut best = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    for _ in 0..max_iter {
        if best.1.abs() <= ftol {
            return Ok(best.0);
        }
        let mut x = (a * fb - b * fa) / (fb - fa);
        if !(x > a.min(b) && x < a.max(b)) {
            x = 0.5 * (a + b);
        }
        let fx = f(x)?;
        if fx.abs() < best.1.abs() {
            best = (x, fx);
        }
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == fa.signum() {
            a = x;
            fa = fx;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            fb = fx;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(1e-3) {
            return Ok(best.0);
        }
    }
    if best.1.abs() <= ftol * 100.0 {
        Ok(best.0)
    } else {
        Err(Error::NoConvergence(format!("residual {:.3e} after {max_iter} iterations", best.1)))
    }
}

/// Angular speed at the arrival state.
pub fn terminal_angular_speed(sol: &OuterSolution) -> f64 {
    sol.terminal_angular_speed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub theta_start: f64,
    pub theta_end: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Row {
    pub epsilon: f64,
    /// Empirical `C1(eps)`: minimum over pairs of `|theta_dot_ext(T_ext)|`.
    pub min_abs_theta_dot: f64,
    pub max_abs_theta_dot: f64,
    /// `(theta_start, theta_end)` attaining the minimum.
    pub argmin: (f64, f64),
    pub evaluated: usize,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Report {
    pub delta: f64,
    pub rows: Vec<C1Row>,
    /// The rotation-invariant value at `eps = 0`.
    pub c2: f64,
}

impl C1Report {
    pub fn row(&self, epsilon: f64) -> Option<&C1Row> {
        self.rows.iter().find(|r| r.epsilon == epsilon)
    }

    /// Smallest `C1(eps)` over the listed positive epsilons.
    pub fn c1(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.epsilon > 0.0)
            .map(|r| r.min_abs_theta_dot)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Endpoint pairs at chord `delta`, stratified in the midpoint angle, both orientations.
pub fn chord_pairs(delta: f64, radius: f64, n_pairs: usize) -> Vec<(BoundaryPoint, BoundaryPoint)> {
    let half = (delta / (2.0 * radius)).asin();
    let mut out = Vec::with_capacity(2 * n_pairs);
    for k in 0..n_pairs {
        let mid = TAU * (k as f64 + 0.5) / n_pairs as f64;
        out.push((BoundaryPoint::new(mid - half), BoundaryPoint::new(mid + half)));
        out.push((BoundaryPoint::new(mid + half), BoundaryPoint::new(mid - half)));
    }
    out
}

fn sweep_row(
    epsilon: f64,
    pairs: &[(BoundaryPoint, BoundaryPoint)],
    cfg: &PotentialConfig,
    settings: &OuterSettings,
    exec_mode: Execution,
) -> C1Row {
    let cfg_e = cfg.with_epsilon(epsilon);
    let results = exec::map(exec_mode, pairs, |(a, b)| {
        solve_outer_with(a, b, &cfg_e, settings, None).map(|s| s.terminal_angular_speed.abs())
    });
    let mut row = C1Row {
        epsilon,
        min_abs_theta_dot: f64::INFINITY,
        max_abs_theta_dot: 0.0,
        argmin: (f64::NAN, f64::NAN),
        evaluated: 0,
        failures: Vec::new(),
    };
    for ((a, b), r) in pairs.iter().zip(results) {
        match r {
            Ok(v) => {
                row.evaluated += 1;
                if v < row.min_abs_theta_dot {
                    row.min_abs_theta_dot = v;
                    row.argmin = (a.theta, b.theta);
                }
                row.max_abs_theta_dot = row.max_abs_theta_dot.max(v);
            }
            Err(e) => row.failures.push(PairFailure {
                theta_start: a.theta,
                theta_end: b.theta,
                message: e.to_string(),
            }),
        }
    }
    row
}

/// Terminal angular speeds of outer arcs joining points at chord `delta`.
pub fn c1_sweep(
    delta: f64,
    epsilons: &[f64],
    n_pairs: usize,
    cfg: &PotentialConfig,
    settings: &OuterSettings,
    exec_mode: Execution,
) -> Result<C1Report> {
    if n_pairs < 16 {
        return Err(Error::InvalidConfig("c1_sweep needs at least 16 pairs".into()));
    }
    let pairs = chord_pairs(delta, cfg.radius, n_pairs);
    let rows: Vec<C1Row> = epsilons
        .iter()
        .map(|&e| sweep_row(e, &pairs, cfg, settings, exec_mode))
        .collect();
    let c2 = match rows.iter().find(|r| r.epsilon == 0.0) {
        Some(r) => r.min_abs_theta_dot,
        None => {
            let (a, b) = pairs[0];
            solve_outer_with(&a, &b, &cfg.with_epsilon(0.0), settings, None)?
                .terminal_angular_speed
                .abs()
        }
    };
    Ok(C1Report { delta, rows, c2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::jacobi_length_of_arc;
    use crate::potential::Centre;

    fn cfg(eps: f64) -> PotentialConfig {
        PotentialConfig::default().with_epsilon(eps)
    }

    fn half_angle(c: &PotentialConfig) -> f64 {
        (c.delta / (2.0 * c.radius)).asin()
    }

    #[test]
    fn wraps() {
        assert!((wrap_pi(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_pi(PI), PI);
        assert_eq!(BoundaryPoint::new(-0.5).theta, TAU - 0.5);
    }

    #[test]
    fn reaches_target_and_stays_outside() {
        let c = cfg(0.05);
        let h = half_angle(&c);
        let sol = solve_outer(&BoundaryPoint::new(1.0 - h), &BoundaryPoint::new(1.0 + h), &c, 1e-9).unwrap();
        assert!(sol.residual <= 1e-9);
        assert!(sol.arc.min_radius() >= c.radius - 1e-9);
        let start = sol.arc.start();
        let end = sol.arc.end();
        assert!(start.position.dot(&start.velocity) >= 0.0);
        assert!(end.position.dot(&end.velocity) <= 0.0);
        assert!(sol.arc.max_energy_residual <= 1e-8);
        assert!(sol.terminal_angular_speed > 0.0);
    }

    #[test]
    fn symmetric_endpoints_give_symmetric_arc() {
        let c = cfg(0.0);
        let h = half_angle(&c);
        let ab = solve_outer(&BoundaryPoint::new(-h), &BoundaryPoint::new(h), &c, 1e-9).unwrap();
        let ba = solve_outer(&BoundaryPoint::new(h), &BoundaryPoint::new(-h), &c, 1e-9).unwrap();
        assert!((ab.t_ext - ba.t_ext).abs() <= 1e-8);
        assert!((ab.terminal_angular_speed + ba.terminal_angular_speed).abs() <= 1e-8);
        // reflection about the x-axis maps the arc to its time reversal
        let mid = ab.arc.state_at(&c, 0.5 * ab.t_ext).position;
        assert!(mid.y.abs() < 1e-8, "{mid}");
    }

    #[test]
    fn rotation_invariance_at_zero_epsilon() {
        let c = cfg(0.0);
        let h = half_angle(&c);
        let base = solve_outer(&BoundaryPoint::new(-h), &BoundaryPoint::new(h), &c, 1e-9).unwrap();
        for k in 1..6 {
            let phi = 1.1 * k as f64;
            let s = solve_outer(&BoundaryPoint::new(phi - h), &BoundaryPoint::new(phi + h), &c, 1e-9).unwrap();
            assert!((s.t_ext - base.t_ext).abs() <= 1e-8);
            assert!((s.jacobi_length - base.jacobi_length).abs() <= 1e-8);
            assert!((s.terminal_angular_speed - base.terminal_angular_speed).abs() <= 1e-8);
        }
    }

    #[test]
    fn reflection_flips_terminal_angular_speed() {
        let layout = PotentialConfig::new(
            vec![Centre::new(0.7, 0.4, 0.35), Centre::new(-0.2, -0.9, 0.4), Centre::new(-0.8, 0.3, 0.25)],
            0.05,
            0.4,
            0.08,
        );
        let mirror = PotentialConfig::new(
            layout.centres.iter().map(|c| Centre::new(c.base_position[0], -c.base_position[1], c.mass)).collect(),
            0.05,
            0.4,
            0.08,
        );
        let h = half_angle(&layout);
        for k in 0..20 {
            let mid = 0.31 * k as f64;
            let a = solve_outer(&BoundaryPoint::new(mid - h), &BoundaryPoint::new(mid + h), &layout, 1e-9).unwrap();
            let b = solve_outer(&BoundaryPoint::new(-mid + h), &BoundaryPoint::new(-mid - h), &mirror, 1e-9).unwrap();
            assert!((a.terminal_angular_speed + b.terminal_angular_speed).abs() < 1e-7);
        }
    }

    #[test]
    fn length_quadratures_agree() {
        let c = cfg(0.05);
        let sol = solve_outer(&BoundaryPoint::new(2.0), &BoundaryPoint::new(2.15), &c, 1e-9).unwrap();
        let q = jacobi_length_of_arc(&sol.arc, &c);
        assert!(q.relative_gap() < 1e-6);
        assert!((q.potential_form - sol.jacobi_length).abs() < 1e-8 * sol.jacobi_length);
    }

    #[test]
    fn endpoint_derivative_matches_velocity() {
        let c = cfg(0.05);
        let a = BoundaryPoint::new(0.7);
        let theta_b = 0.85;
        let h = 1e-5;
        let len = |t: f64| solve_outer(&a, &BoundaryPoint::new(t), &c, 1e-10).unwrap().jacobi_length;
        let fd = (len(theta_b + h) - len(theta_b - h)) / (2.0 * h);
        let sol = solve_outer(&a, &BoundaryPoint::new(theta_b), &c, 1e-10).unwrap();
        let analytic = c.radius / 2f64.sqrt() * sol.arrival_velocity().dot(&tangent(theta_b));
        assert!((fd - analytic).abs() <= 1e-4 * analytic.abs(), "{fd} vs {analytic}");
    }

    #[test]
    fn sweep_zero_row_is_flat() {
        let c = cfg(0.05);
        let report = c1_sweep(c.delta, &[0.0, 0.05], 16, &c, &OuterSettings::default(), Execution::Sequential).unwrap();
        let zero = report.row(0.0).unwrap();
        assert!((zero.max_abs_theta_dot - zero.min_abs_theta_dot).abs() <= 1e-7);
        assert_eq!(report.c2, zero.min_abs_theta_dot);
        assert!(report.row(0.05).unwrap().min_abs_theta_dot > 0.0);
        assert!(report.rows.iter().all(|r| r.failures.is_empty()));
    }

    #[test]
    fn too_few_pairs_rejected() {
        let c = cfg(0.05);
        assert!(c1_sweep(c.delta, &[0.0], 8, &c, &OuterSettings::default(), Execution::Sequential).is_err());
    }
}
