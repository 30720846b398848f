//! Adaptive Dormand-Prince 5(4) integration of `x'' = grad V(x)` on the energy
//! shell, with circle-crossing events and Jacobi-length bookkeeping.
//!
//! The state carries the accumulated Jacobi length as a fifth component
//! (`dL/dt = sqrt(2) (V - 1)`), so lengths are integrated with the same
//! error control as positions.

use std::f64::consts::SQRT_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{PotentialConfig, Vec2, ENERGY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl State {
    pub fn new(position: Vec2, velocity: Vec2) -> Self {
        Self { position, velocity }
    }

    pub fn energy_residual(&self, cfg: &PotentialConfig) -> f64 {
        cfg.energy_residual(&self.position, &self.velocity)
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.position, -self.velocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArcKind {
    Outer,
    Inner,
    LocalGeodesic,
}

impl ArcKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArcKind::Outer => "outer",
            ArcKind::Inner => "inner",
            ArcKind::LocalGeodesic => "local_geodesic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub position: Vec2,
    pub velocity: Vec2,
    /// Jacobi length accumulated since the start of the arc.
    pub length: f64,
}

impl Sample {
    pub fn state(&self) -> State {
        State::new(self.position, self.velocity)
    }
}

/// A time-parametrized solution segment starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub samples: Vec<Sample>,
    pub kind: ArcKind,
    pub duration: f64,
    pub max_energy_residual: f64,
}

impl Arc {
    pub fn new(samples: Vec<Sample>, kind: ArcKind, cfg: &PotentialConfig) -> Self {
        let duration = samples.last().map_or(0.0, |s| s.t);
        let max_energy_residual = samples
            .iter()
            .map(|s| cfg.energy_residual(&s.position, &s.velocity).abs())
            .fold(0.0, f64::max);
        Self {
            samples,
            kind,
            duration,
            max_energy_residual,
        }
    }

    pub fn start(&self) -> State {
        self.samples[0].state()
    }

    pub fn end(&self) -> State {
        self.samples[self.samples.len() - 1].state()
    }

    /// Accumulated Jacobi length carried by the samples.
    pub fn jacobi_length(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.length)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.samples.len() >= 2
            && self.samples.windows(2).all(|w| w[1].t > w[0].t)
            && self.samples[0].t == 0.0
            && self.max_energy_residual <= tol
    }

    /// Smallest distance from the origin along the samples.
    pub fn min_radius(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.position.norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Hermite-interpolated state at time `t` (clamped to the arc).
    pub fn state_at(&self, cfg: &PotentialConfig, t: f64) -> State {
        let t = t.clamp(0.0, self.duration);
        let k = self.samples.partition_point(|s| s.t <= t).clamp(1, self.samples.len() - 1);
        let (a, b) = (&self.samples[k - 1], &self.samples[k]);
        let h = b.t - a.t;
        if h <= 0.0 {
            return b.state();
        }
        let (x, v) = hermite(
            &a.position,
            &a.velocity,
            &cfg.gradient_unchecked(&a.position),
            &b.position,
            &b.velocity,
            &cfg.gradient_unchecked(&b.position),
            h,
            (t - a.t) / h,
        );
        State::new(x, v)
    }

    /// The same path traversed backwards in time.
    pub fn reversed(&self) -> Arc {
        let total = self.jacobi_length();
        let samples = self
            .samples
            .iter()
            .rev()
            .map(|s| Sample {
                t: self.duration - s.t,
                position: s.position,
                velocity: -s.velocity,
                length: total - s.length,
            })
            .collect();
        Arc {
            samples,
            kind: self.kind,
            duration: self.duration,
            max_energy_residual: self.max_energy_residual,
        }
    }

    /// Restriction to `[0, t_end]`.
    pub fn truncated(&self, cfg: &PotentialConfig, t_end: f64) -> Arc {
        let t_end = t_end.clamp(0.0, self.duration);
        let mut samples: Vec<Sample> = self.samples.iter().take_while(|s| s.t < t_end).copied().collect();
        let st = self.state_at(cfg, t_end);
        let length = self.length_at(cfg, t_end);
        samples.push(Sample {
            t: t_end,
            position: st.position,
            velocity: st.velocity,
            length,
        });
        Arc::new(samples, self.kind, cfg)
    }

    /// Jacobi length accumulated up to time `t`, using the Hermite-corrected
    /// trapezoid rule inside the bracketing step.
    pub fn length_at(&self, cfg: &PotentialConfig, t: f64) -> f64 {
        let t = t.clamp(0.0, self.duration);
        let k = self.samples.partition_point(|s| s.t <= t).clamp(1, self.samples.len() - 1);
        let a = &self.samples[k - 1];
        if t <= a.t {
            return a.length;
        }
        let b = self.state_at(cfg, t);
        let sample_b = Sample {
            t,
            position: b.position,
            velocity: b.velocity,
            length: 0.0,
        };
        a.length + hermite_step(cfg, a, &sample_b, potential_form)
    }
}

/// Settings of the adaptive integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSettings {
    /// Relative/absolute local error target of the embedded pair.
    pub rk_tol: f64,
    /// Steps whose energy residual exceeds this are rejected.
    pub energy_tol: f64,
    pub max_steps: usize,
    pub initial_step: f64,
    /// Insert interpolated samples so that chords stay within `dense_tol` of the path.
    pub dense_tol: Option<f64>,
}

impl IntegratorSettings {
    /// Settings whose accepted arcs keep the energy residual below `tol`.
    pub fn from_tol(tol: f64) -> Self {
        Self {
            rk_tol: (tol * 1e-4).max(1e-14),
            energy_tol: tol,
            max_steps: 200_000,
            initial_step: 1e-4,
            dense_tol: None,
        }
    }

    pub fn dense(mut self, chord_tol: f64) -> Self {
        self.dense_tol = Some(chord_tol);
        self
    }
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self::from_tol(1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Outward,
    Inward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingEvent {
    pub time: f64,
    pub radius: f64,
    pub direction: Direction,
    pub state: State,
}

type Y = [f64; 5];

fn rhs(cfg: &PotentialConfig, y: &Y) -> Y {
    let x = Vec2::new(y[0], y[1]);
    let a = cfg.gradient_unchecked(&x);
    let dl = SQRT_2 * (cfg.potential_unchecked(&x) + ENERGY);
    [y[2], y[3], a.x, a.y, dl]
}

fn axpy(y: &Y, h: f64, terms: &[(f64, &Y)]) -> Y {
    let mut out = *y;
    for (c, k) in terms {
        if *c != 0.0 {
            for i in 0..5 {
                out[i] += h * c * k[i];
            }
        }
    }
    out
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// One Dormand-Prince step; returns the new state, its derivative and the error norm.
fn dopri_step(cfg: &PotentialConfig, y: &Y, k1: &Y, h: f64, tol: f64) -> (Y, Y, f64) {
    let _ = C2 + C3 + C4 + C5;
    let k2 = rhs(cfg, &axpy(y, h, &[(A21, k1)]));
    let k3 = rhs(cfg, &axpy(y, h, &[(A31, k1), (A32, &k2)]));
    let k4 = rhs(cfg, &axpy(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]));
    let k5 = rhs(cfg, &axpy(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
    let k6 = rhs(
        cfg,
        &axpy(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
    );
    let y_new = axpy(y, h, &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = rhs(cfg, &y_new);
    let mut err = 0.0f64;
    for i in 0..5 {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let scale = tol * (1.0 + y[i].abs().max(y_new[i].abs()));
        err = err.max((e / scale).abs());
    }
    (y_new, k7, err)
}

/// Cubic/quintic Hermite interpolation on a step using positions, velocities and accelerations.
#[allow(clippy::too_many_arguments)]
fn hermite(x0: &Vec2, v0: &Vec2, a0: &Vec2, x1: &Vec2, v1: &Vec2, a1: &Vec2, h: f64, s: f64) -> (Vec2, Vec2) {
    // Quintic Hermite basis on [0, 1].
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s3 * s;
    let s5 = s4 * s;
    let h00 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5;
    let h10 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5;
    let h20 = 0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5;
    let h01 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5;
    let h11 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5;
    let h21 = 0.5 * s3 - s4 + 0.5 * s5;
    let d00 = -30.0 * s2 + 60.0 * s3 - 30.0 * s4;
    let d10 = 1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4;
    let d20 = s - 4.5 * s2 + 6.0 * s3 - 2.5 * s4;
    let d01 = 30.0 * s2 - 60.0 * s3 + 30.0 * s4;
    let d11 = -12.0 * s2 + 28.0 * s3 - 15.0 * s4;
    let d21 = 1.5 * s2 - 4.0 * s3 + 2.5 * s4;
    let x = x0 * h00 + v0 * (h * h10) + a0 * (h * h * h20) + x1 * h01 + v1 * (h * h11) + a1 * (h * h * h21);
    let v = x0 * (d00 / h) + v0 * d10 + a0 * (h * d20) + x1 * (d01 / h) + v1 * d11 + a1 * (h * d21);
    (x, v)
}

fn to_y(s: &State, length: f64) -> Y {
    [s.position.x, s.position.y, s.velocity.x, s.velocity.y, length]
}

fn pos(y: &Y) -> Vec2 {
    Vec2::new(y[0], y[1])
}

fn vel(y: &Y) -> Vec2 {
    Vec2::new(y[2], y[3])
}

fn sample(t: f64, y: &Y) -> Sample {
    Sample {
        t,
        position: pos(y),
        velocity: vel(y),
        length: y[4],
    }
}

/// What ends an integration.
#[derive(Debug, Clone, Copy)]
enum Stop {
    Time(f64),
    Crossing {
        radius: f64,
        direction: Direction,
        max_time: f64,
    },
}

struct Outcome {
    samples: Vec<Sample>,
    event: Option<CrossingEvent>,
}

fn check_collision(cfg: &PotentialConfig, x: &Vec2) -> Result<()> {
    let (index, distance) = cfg.nearest_centre(x);
    let limit = cfg.collision_radius();
    if !cfg.centres.is_empty() && distance < limit {
        return Err(Error::CollisionProximity { index, distance, limit });
    }
    Ok(())
}

fn propagate(start: &State, stop: Stop, cfg: &PotentialConfig, settings: &IntegratorSettings) -> Result<Outcome> {
    let residual = start.energy_residual(cfg);
    if !(residual.abs() <= settings.energy_tol) {
        return Err(Error::OffShell { residual });
    }
    check_collision(cfg, &start.position)?;
    let max_time = match stop {
        Stop::Time(t) => t,
        Stop::Crossing { max_time, .. } => max_time,
    };
    let mut t = 0.0;
    let mut y = to_y(start, 0.0);
    let mut k1 = rhs(cfg, &y);
    let mut h = settings.initial_step.min(max_time);
    let mut samples = vec![sample(0.0, &y)];
    let event_fn = |y: &Y, r: f64| pos(y).norm() - r;
    let mut steps = 0usize;
    while t < max_time {
        if steps >= settings.max_steps {
            return Err(Error::StepExhaustion { steps, time: t });
        }
        steps += 1;
        let h_try = h.min(max_time - t);
        let (y_new, k7, err) = dopri_step(cfg, &y, &k1, h_try, settings.rk_tol);
        let x_new = pos(&y_new);
        let e_res = cfg.energy_residual(&x_new, &vel(&y_new));
        let factor = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
        if !(err <= 1.0) || !(e_res.abs() <= settings.energy_tol) {
            h = h_try * factor.clamp(0.1, 0.9);
            if h < 1e-14 * (1.0 + t) {
                return Err(Error::StepExhaustion { steps, time: t });
            }
            continue;
        }
        check_collision(cfg, &x_new)?;
        if cfg.potential_unchecked(&x_new) + ENERGY < 0.0 {
            return Err(Error::HillBoundary {
                excess: cfg.potential_unchecked(&x_new) + ENERGY,
            });
        }

        if let Stop::Crossing { radius, direction, .. } = stop {
            let g0 = event_fn(&y, radius);
            let g1 = event_fn(&y_new, radius);
            let crossed = match direction {
                Direction::Inward => g0 > 0.0 && g1 <= 0.0,
                Direction::Outward => g0 < 0.0 && g1 >= 0.0,
            };
            if crossed {
                let (tau, y_ev) = refine_crossing(cfg, &y, &k1, &y_new, h_try, radius, settings.rk_tol);
                if let Some(tol) = settings.dense_tol {
                    push_dense(cfg, &mut samples, t, &y, &y_ev, tau, tol);
                }
                samples.push(sample(t + tau, &y_ev));
                let state = State::new(pos(&y_ev), vel(&y_ev));
                return Ok(Outcome {
                    samples,
                    event: Some(CrossingEvent {
                        time: t + tau,
                        radius,
                        direction,
                        state,
                    }),
                });
            }
        }

        if let Some(tol) = settings.dense_tol {
            push_dense(cfg, &mut samples, t, &y, &y_new, h_try, tol);
        }
        t += h_try;
        y = y_new;
        k1 = k7;
        samples.push(sample(t, &y));
        h = h_try * factor.clamp(0.2, 5.0);
    }
    match stop {
        Stop::Time(_) => Ok(Outcome { samples, event: None }),
        Stop::Crossing { radius, .. } => Err(Error::NoCrossing { radius, max_time }),
    }
}

/// Inserts Hermite-interpolated samples strictly inside `(t, t + h)`.
fn push_dense(cfg: &PotentialConfig, samples: &mut Vec<Sample>, t: f64, y0: &Y, y1: &Y, h: f64, tol: f64) {
    let a0 = cfg.gradient_unchecked(&pos(y0));
    let a1 = cfg.gradient_unchecked(&pos(y1));
    let acc = a0.norm().max(a1.norm());
    // Chord deviation of a curve with acceleration |a| over a time step dt is about |a| dt^2 / 8.
    let pieces = (h * (acc / (8.0 * tol)).sqrt()).ceil().max(1.0) as usize;
    for j in 1..pieces {
        let s = j as f64 / pieces as f64;
        let (x, v) = hermite(&pos(y0), &vel(y0), &a0, &pos(y1), &vel(y1), &a1, h, s);
        let l = y0[4] + (y1[4] - y0[4]) * s;
        samples.push(Sample {
            t: t + s * h,
            position: x,
            velocity: v,
            length: l,
        });
    }
    // Lengths of the inserted samples are refined by quadrature.
    let n = samples.len();
    if pieces > 1 {
        let first = n - (pieces - 1);
        let mut prev = sample(t, y0);
        for i in first..n {
            let mut cur = samples[i];
            cur.length = prev.length + hermite_step(cfg, &prev, &cur, potential_form);
            samples[i] = cur;
            prev = cur;
        }
    }
}

/// Locates the crossing inside a step by Hermite bisection followed by secant
/// iteration on exact single steps of the embedded pair.
fn refine_crossing(cfg: &PotentialConfig, y0: &Y, k1: &Y, y1: &Y, h: f64, radius: f64, rk_tol: f64) -> (f64, Y) {
    let g = |y: &Y| pos(y).norm() - radius;
    let a0 = cfg.gradient_unchecked(&pos(y0));
    let a1 = cfg.gradient_unchecked(&pos(y1));
    // Bracket on the interpolant.
    let (mut lo, mut hi) = (0.0, 1.0);
    let g_lo0 = g(y0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let (x, _) = hermite(&pos(y0), &vel(y0), &a0, &pos(y1), &vel(y1), &a1, h, mid);
        let gm = x.norm() - radius;
        if (gm > 0.0) == (g_lo0 > 0.0) && gm != 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let exact = |tau: f64| -> Y {
        if tau <= 0.0 {
            *y0
        } else {
            dopri_step(cfg, y0, k1, tau, rk_tol).0
        }
    };
    // Secant (Illinois) on the true flow, bracket [0, h].
    let mut a = 0.0;
    let mut fa = g_lo0;
    let mut b = h;
    let mut fb = g(y1);
    let mut tau = 0.5 * (lo + hi) * h;
    let mut y_tau = exact(tau);
    let mut f_tau = g(&y_tau);
    let mut side = 0i32;
    for _ in 0..60 {
        if f_tau.abs() <= 1e-14 {
            break;
        }
        if (f_tau > 0.0) == (fa > 0.0) {
            a = tau;
            fa = f_tau;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = tau;
            fb = f_tau;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        let next = (a * fb - b * fa) / (fb - fa);
        tau = if next > a && next < b { next } else { 0.5 * (a + b) };
        y_tau = exact(tau);
        f_tau = g(&y_tau);
        if (b - a).abs() < 1e-16 * (1.0 + h) {
            break;
        }
    }
    (tau, y_tau)
}

/// Adaptive solution of the equation of motion on `[0, max_time]`.
pub fn integrate(start: &State, max_time: f64, cfg: &PotentialConfig, tol: f64) -> Result<Arc> {
    let settings = IntegratorSettings::from_tol(tol).dense(10.0 * tol);
    integrate_with(start, max_time, cfg, &settings, ArcKind::Outer)
}

pub fn integrate_with(
    start: &State,
    max_time: f64,
    cfg: &PotentialConfig,
    settings: &IntegratorSettings,
    kind: ArcKind,
) -> Result<Arc> {
    let out = propagate(start, Stop::Time(max_time), cfg, settings)?;
    Ok(Arc::new(out.samples, kind, cfg))
}

/// Integrates until `|x|` crosses `radius` in the given direction.
pub fn integrate_until_crossing(
    start: &State,
    radius: f64,
    direction: Direction,
    max_time: f64,
    cfg: &PotentialConfig,
    tol: f64,
) -> Result<(Arc, CrossingEvent)> {
    let settings = IntegratorSettings::from_tol(tol).dense(10.0 * tol);
    crossing_with(start, radius, direction, max_time, cfg, &settings, ArcKind::Outer)
}

pub fn crossing_with(
    start: &State,
    radius: f64,
    direction: Direction,
    max_time: f64,
    cfg: &PotentialConfig,
    settings: &IntegratorSettings,
    kind: ArcKind,
) -> Result<(Arc, CrossingEvent)> {
    let out = propagate(
        start,
        Stop::Crossing {
            radius,
            direction,
            max_time,
        },
        cfg,
        settings,
    )?;
    let event = out.event.expect("crossing stop yields an event");
    Ok((Arc::new(out.samples, kind, cfg), event))
}

fn potential_form(cfg: &PotentialConfig, s: &Sample) -> (f64, f64) {
    // f = sqrt(2) (V - 1), f' = sqrt(2) <grad V, v>
    let f = SQRT_2 * (cfg.potential_unchecked(&s.position) + ENERGY);
    let df = SQRT_2 * cfg.gradient_unchecked(&s.position).dot(&s.velocity);
    (f, df)
}

fn weight_speed_form(cfg: &PotentialConfig, s: &Sample) -> (f64, f64) {
    // f = w |v|, with w = sqrt(V - 1) and the acceleration taken from the field.
    let excess = (cfg.potential_unchecked(&s.position) + ENERGY).max(0.0);
    let w = excess.sqrt();
    let grad_v = cfg.gradient_unchecked(&s.position);
    let speed = s.velocity.norm();
    let f = w * speed;
    if w == 0.0 || speed == 0.0 {
        return (f, 0.0);
    }
    let dw = grad_v.dot(&s.velocity) / (2.0 * w);
    let dspeed = s.velocity.dot(&grad_v) / speed;
    (f, dw * speed + w * dspeed)
}

/// Two-point Hermite rule `h/2 (f0 + f1) + h^2/12 (f0' - f1')`.
fn hermite_step(cfg: &PotentialConfig, a: &Sample, b: &Sample, form: fn(&PotentialConfig, &Sample) -> (f64, f64)) -> f64 {
    let h = b.t - a.t;
    let (fa, da) = form(cfg, a);
    let (fb, db) = form(cfg, b);
    0.5 * h * (fa + fb) + h * h / 12.0 * (da - db)
}

/// The two quadratures of the Jacobi length of an arc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobiLengths {
    /// `int sqrt(V - 1) |v| dt`.
    pub weight_speed: f64,
    /// `sqrt(2) int (V - 1) dt`.
    pub potential_form: f64,
}

impl JacobiLengths {
    pub fn relative_gap(&self) -> f64 {
        (self.weight_speed - self.potential_form).abs() / self.potential_form.abs().max(1e-300)
    }
}

pub fn jacobi_length_of_arc(arc: &Arc, cfg: &PotentialConfig) -> JacobiLengths {
    let mut ws = 0.0;
    let mut pf = 0.0;
    for w in arc.samples.windows(2) {
        ws += hermite_step(cfg, &w[0], &w[1], weight_speed_form);
        pf += hermite_step(cfg, &w[0], &w[1], potential_form);
    }
    JacobiLengths {
        weight_speed: ws,
        potential_form: pf,
    }
}

/// Writes `t,x,y,vx,vy,kind,arc_id` rows.
pub fn write_arc_csv<W: Write>(out: &mut W, arc: &Arc, arc_id: usize, header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "t,x,y,vx,vy,kind,arc_id")?;
    }
    for s in &arc.samples {
        writeln!(
            out,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            s.t,
            s.position.x,
            s.position.y,
            s.velocity.x,
            s.velocity.y,
            arc.kind.as_str(),
            arc_id
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::Centre;
    use std::f64::consts::PI;

    fn kepler() -> PotentialConfig {
        PotentialConfig::new(vec![Centre::new(0.0, 0.0, 1.0)], 0.0, 0.4, 0.08)
    }

    fn circular() -> State {
        State::new(Vec2::new(0.5, 0.0), Vec2::new(0.0, SQRT_2))
    }

    #[test]
    fn circular_orbit_full_and_half_turn() {
        let full = integrate(&circular(), PI / SQRT_2, &kepler(), 1e-9).unwrap();
        assert!((full.end().position - circular().position).norm() < 1e-6);
    }

    #[test]
    fn circular_orbit_half_turn() {
        // period of the r = 1/2 orbit is 2 pi (1/2) / sqrt(2) = pi / sqrt(2)
        let arc = integrate(&circular(), PI / (2.0 * SQRT_2), &kepler(), 1e-9).unwrap();
        let end = arc.end().position;
        assert!((end - Vec2::new(-0.5, 0.0)).norm() < 1e-6, "{end}");
        assert!(arc.max_energy_residual <= 1e-9);
        assert!(arc.is_valid(1e-9));
    }

    #[test]
    fn dense_samples_follow_the_path() {
        let arc = integrate(&circular(), 1.0, &kepler(), 1e-9).unwrap();
        for w in arc.samples.windows(2) {
            let mid = 0.5 * (w[0].position + w[1].position);
            // all samples lie on the circle r = 1/2; chord sag measures interpolation error
            assert!((0.5 - mid.norm()) <= 1e-8);
        }
    }

    #[test]
    fn time_reversal_retraces() {
        let cfg = PotentialConfig::new(
            vec![Centre::new(1.0, 0.0, 0.5), Centre::new(-1.0, 0.0, 0.5)],
            0.05,
            0.4,
            0.08,
        );
        let x = Vec2::new(0.3, 0.2);
        let s = cfg.speed_from_energy(&x).unwrap();
        let start = State::new(x, s * Vec2::new(0.6, 0.8));
        let fwd = integrate(&start, 0.7, &cfg, 1e-9).unwrap();
        let back = integrate(&fwd.end().reversed(), 0.7, &cfg, 1e-9).unwrap();
        assert!((back.end().position - x).norm() <= 1e-7);
        assert!((back.end().velocity + start.velocity).norm() <= 1e-7);
    }

    #[test]
    fn radial_fall_matches_quadrature() {
        let cfg = kepler();
        let r0 = 0.4;
        let start = State::new(Vec2::new(r0, 0.0), Vec2::new(-cfg.speed_from_energy(&Vec2::new(r0, 0.0)).unwrap(), 0.0));
        let (arc, ev) = integrate_until_crossing(&start, 0.2, Direction::Inward, 5.0, &cfg, 1e-9).unwrap();
        // t = int_{0.2}^{0.4} dr / sqrt(2 (1/r - 1)), closed form via r = sin^2(u).
        let prim = |r: f64| {
            let u = r.sqrt().asin();
            (u - u.sin() * u.cos()) / SQRT_2
        };
        let expected = prim(0.4) - prim(0.2);
        assert!((ev.time - expected).abs() < 1e-9, "{} vs {expected}", ev.time);
        assert!((ev.state.position.norm() - 0.2).abs() <= 1e-10);
        assert!(ev.state.energy_residual(&cfg).abs() <= 1e-9);
        assert_eq!(arc.duration, ev.time);
    }

    #[test]
    fn outer_return_crossing() {
        let cfg = kepler();
        let x = Vec2::new(0.4, 0.0);
        let s = cfg.speed_from_energy(&x).unwrap();
        let start = State::new(x, s * Vec2::new(0.98, 0.2f64.sin()));
        let start = State::new(x, start.velocity.normalize() * s);
        let (_, ev) = integrate_until_crossing(&start, 0.4, Direction::Inward, 10.0, &cfg, 1e-9).unwrap();
        assert!((ev.state.position.norm() - 0.4).abs() <= 1e-10);
        assert!(ev.state.position.dot(&ev.state.velocity) < 0.0);
    }

    #[test]
    fn no_crossing_is_an_error() {
        let err = integrate_until_crossing(&circular(), 0.1, Direction::Inward, 2.0, &kepler(), 1e-9).unwrap_err();
        assert!(matches!(err, Error::NoCrossing { .. }));
    }

    #[test]
    fn collision_is_rejected() {
        let cfg = PotentialConfig::new(vec![Centre::new(0.0, 0.0, 1.0)], 0.05, 0.4, 0.08);
        let x = Vec2::new(0.4, 0.0);
        let s = cfg.speed_from_energy(&x).unwrap();
        let err = integrate(&State::new(x, Vec2::new(-s, 0.0)), 2.0, &cfg, 1e-9).unwrap_err();
        assert!(matches!(err, Error::CollisionProximity { index: 0, .. }));
    }

    #[test]
    fn quarter_circle_jacobi_length() {
        let arc = integrate(&circular(), PI / (4.0 * SQRT_2), &kepler(), 1e-9).unwrap();
        let l = jacobi_length_of_arc(&arc, &kepler());
        assert!((l.weight_speed - PI / 4.0).abs() < 1e-9);
        assert!((l.potential_form - PI / 4.0).abs() < 1e-9);
        assert!((arc.jacobi_length() - PI / 4.0).abs() < 1e-9);
    }

    #[test]
    fn lengths_are_additive() {
        let cfg = PotentialConfig::default();
        let x = Vec2::new(0.0, 0.4);
        let s = cfg.speed_from_energy(&x).unwrap();
        let start = State::new(x, s * Vec2::new(0.3, 0.954).normalize());
        let whole = integrate(&start, 1.2, &cfg, 1e-9).unwrap();
        let first = integrate(&start, 0.5, &cfg, 1e-9).unwrap();
        let second = integrate(&first.end(), 0.7, &cfg, 1e-9).unwrap();
        let lw = jacobi_length_of_arc(&whole, &cfg).potential_form;
        let ls = jacobi_length_of_arc(&first, &cfg).potential_form + jacobi_length_of_arc(&second, &cfg).potential_form;
        assert!((lw - ls).abs() < 1e-9, "{lw} vs {ls}");
    }

    #[test]
    fn reflected_layout_reflects_arcs() {
        let cfg = PotentialConfig::new(
            vec![Centre::new(0.8, 0.5, 0.3), Centre::new(-0.6, -0.2, 0.7)],
            0.08,
            0.4,
            0.08,
        );
        let mirror = PotentialConfig::new(
            cfg.centres.iter().map(|c| Centre::new(c.base_position[0], -c.base_position[1], c.mass)).collect(),
            0.08,
            0.4,
            0.08,
        );
        let x = Vec2::new(0.35, 0.1);
        let v = cfg.speed_from_energy(&x).unwrap() * Vec2::new(-0.8, 0.6);
        let a = integrate(&State::new(x, v), 1.0, &cfg, 1e-9).unwrap();
        let b = integrate(&State::new(Vec2::new(x.x, -x.y), Vec2::new(v.x, -v.y)), 1.0, &mirror, 1e-9).unwrap();
        let (pa, pb) = (a.end().position, b.end().position);
        assert!((pa.x - pb.x).abs() < 1e-7 && (pa.y + pb.y).abs() < 1e-7);
    }
}
