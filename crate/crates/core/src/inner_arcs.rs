//! Inner arcs: Jacobi-metric geodesics through the centre region constrained
//! to split the centres according to a partition symbol, their Maupertuis
//! time reparametrization, local geodesics near the gluing circle and the
//! truncation points used by the junction functionals.
//!
//! Discrete geodesics are polylines whose length `sum_k w(m_k) |x_{k+1} - x_k|`
//! (midpoint weights) is minimized over interior vertices moving along their
//! normals. Exact inner arcs are then recovered by shooting the equation of
//! motion from the discrete departure direction.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::integrator::{crossing_with, integrate_with, Arc, ArcKind, Direction, IntegratorSettings, Sample, State};
use crate::outer_arcs::{illinois, secant, wrap_pi, BoundaryPoint};
use crate::potential::{angular_speed, on_circle, tangent, PotentialConfig, Vec2};

// ---------------------------------------------------------------------------
// Partitions and homotopy classes

/// An unordered two-block split of the centre indices. An inner arc realizes
/// the split when it separates the blocks, with either block on its left.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Partition {
    /// The block containing centre 0.
    block: Vec<usize>,
    n_centres: usize,
}

impl Partition {
    pub fn new(block: impl IntoIterator<Item = usize>, n_centres: usize) -> Result<Self> {
        let block: BTreeSet<usize> = block.into_iter().collect();
        if block.is_empty() || block.len() >= n_centres {
            return Err(Error::InvalidPartition("both blocks must be non-empty".into()));
        }
        if let Some(&i) = block.iter().find(|&&i| i >= n_centres) {
            return Err(Error::InvalidPartition(format!("centre {i} does not exist")));
        }
        let block: Vec<usize> = if block.contains(&0) {
            block.into_iter().collect()
        } else {
            (0..n_centres).filter(|i| !block.contains(i)).collect()
        };
        Ok(Self { block, n_centres })
    }

    /// The two blocks, the one containing centre 0 first.
    pub fn blocks(&self) -> (Vec<usize>, Vec<usize>) {
        let other = (0..self.n_centres).filter(|i| !self.block.contains(i)).collect();
        (self.block.clone(), other)
    }

    pub fn n_centres(&self) -> usize {
        self.n_centres
    }

    /// All `2^(n-1) - 1` splits of `n` centres.
    pub fn all_two_block(n_centres: usize) -> Vec<Partition> {
        if !(2..=20).contains(&n_centres) {
            return Vec::new();
        }
        (1..(1u32 << n_centres) - 1)
            .filter(|mask| mask & 1 == 1)
            .map(|mask| Partition {
                block: (0..n_centres).filter(|i| mask & (1 << i) != 0).collect(),
                n_centres,
            })
            .collect()
    }

    /// Whether `left` (the centres on the left of a path) is one of the blocks.
    pub fn realized_by(&self, left: &[usize]) -> bool {
        let (a, b) = self.blocks();
        left == a || left == b
    }

    pub fn label(&self) -> String {
        let fmt = |b: &[usize]| b.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        let (a, b) = self.blocks();
        format!("{{{}}}|{{{}}}", fmt(&a), fmt(&b))
    }

    /// Parses labels of the form `{0,2}|{1}` or `1|0,2`.
    pub fn parse(text: &str, n_centres: usize) -> Result<Self> {
        let mut parts = text.split('|');
        let first = parts.next().unwrap_or("");
        let second = parts.next();
        let parse_block = |s: &str| -> Result<Vec<usize>> {
            s.trim()
                .trim_start_matches('{')
                .trim_end_matches('}')
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidPartition(format!("bad centre index '{t}' in '{text}'")))
                })
                .collect()
        };
        let first = parse_block(first)?;
        let p = Partition::new(first.iter().copied(), n_centres)?;
        if let Some(r) = second {
            let mut r = parse_block(r)?;
            r.sort_unstable();
            let mut f = first;
            f.sort_unstable();
            let (a, b) = p.blocks();
            if !((f == a && r == b) || (f == b && r == a)) {
                return Err(Error::InvalidPartition(format!("'{text}' is not a split of {n_centres} centres")));
            }
        }
        Ok(p)
    }
}

/// Signed angle subtended at `c` by the segment `a -> b`.
fn subtended(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    let u = a - c;
    let v = b - c;
    (u.x * v.y - u.y * v.x).atan2(u.dot(&v))
}

/// Winding numbers around each centre of the loop formed by `points`
/// (from a point at angle `theta_start` on the circle to one at `theta_end`)
/// closed by the counter-clockwise boundary arc from `theta_end` back to `theta_start`.
pub fn winding_numbers(points: &[Vec2], theta_start: f64, theta_end: f64, cfg: &PotentialConfig) -> Vec<i32> {
    let sweep = (theta_start - theta_end).rem_euclid(TAU);
    let pieces = ((sweep / 0.05).ceil() as usize).max(1);
    let arc: Vec<Vec2> = (0..=pieces)
        .map(|k| on_circle(cfg.radius, theta_end + sweep * k as f64 / pieces as f64))
        .collect();
    cfg.centre_positions()
        .iter()
        .map(|c| {
            let mut total = 0.0;
            for w in points.windows(2) {
                total += subtended(&w[0], &w[1], c);
            }
            total += subtended(&points[points.len() - 1], &arc[0], c);
            for w in arc.windows(2) {
                total += subtended(&w[0], &w[1], c);
            }
            total += subtended(&arc[arc.len() - 1], &points[0], c);
            (total / TAU).round() as i32
        })
        .collect()
}

/// The block on the left of the path, if the path splits the centres into two
/// blocks whose winding numbers differ by exactly one.
pub fn separated_left_block(windings: &[i32]) -> Option<Vec<usize>> {
    let lo = *windings.iter().min()?;
    let hi = *windings.iter().max()?;
    if hi - lo != 1 {
        return None;
    }
    Some((0..windings.len()).filter(|&i| windings[i] == hi).collect())
}

/// Class membership test for a path between two points of the gluing circle.
pub fn in_class(points: &[Vec2], theta_start: f64, theta_end: f64, partition: &Partition, cfg: &PotentialConfig) -> bool {
    if points.len() < 2 || cfg.centres.len() != partition.n_centres() {
        return false;
    }
    let w = winding_numbers(points, theta_start, theta_end, cfg);
    separated_left_block(&w).is_some_and(|left| partition.realized_by(&left))
}

/// Unit normal `u` and offset of the widest line separating the two blocks
/// (`<u, c> < offset` on the left block), together with its margin.
fn separating_line(left: &[usize], right: &[usize], cfg: &PotentialConfig) -> Result<(Vec2, f64, f64)> {
    let pos = cfg.centre_positions();
    let margin_at = |phi: f64| -> (f64, f64) {
        let u = Vec2::new(phi.cos(), phi.sin());
        let max_left = left.iter().map(|&i| u.dot(&pos[i])).fold(f64::NEG_INFINITY, f64::max);
        let min_right = right.iter().map(|&i| u.dot(&pos[i])).fold(f64::INFINITY, f64::min);
        (min_right - max_left, 0.5 * (min_right + max_left))
    };
    let n = 3600;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..n {
        let phi = TAU * k as f64 / n as f64;
        let (m, _) = margin_at(phi);
        if m > best.0 {
            best = (m, phi);
        }
    }
    // golden-section refinement of the margin
    let (mut a, mut b) = (best.1 - TAU / n as f64, best.1 + TAU / n as f64);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if margin_at(c).0 > margin_at(d).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let phi = 0.5 * (a + b);
    let (margin, offset) = margin_at(phi);
    if !(margin > 0.0) {
        return Err(Error::InfeasiblePartition);
    }
    Ok((Vec2::new(phi.cos(), phi.sin()), offset, margin))
}

// ---------------------------------------------------------------------------
// Discrete geodesics

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicPath {
    pub vertices: Vec<Vec2>,
    pub jacobi_length: f64,
    /// Homotopy constraint; `None` for local geodesics.
    pub partition: Option<Partition>,
}

impl GeodesicPath {
    pub fn start(&self) -> Vec2 {
        self.vertices[0]
    }

    pub fn end(&self) -> Vec2 {
        self.vertices[self.vertices.len() - 1]
    }

    fn boundary_angles(&self) -> (f64, f64) {
        let (a, b) = (self.start(), self.end());
        (a.y.atan2(a.x), b.y.atan2(b.x))
    }

    /// Whether the path still realizes its partition (always true without one).
    pub fn respects_class(&self, cfg: &PotentialConfig) -> bool {
        match &self.partition {
            None => true,
            Some(p) => {
                let (a, b) = self.boundary_angles();
                in_class(&self.vertices, a, b, p, cfg)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicSettings {
    pub initial_vertices: usize,
    pub max_vertices: usize,
    /// Bound on the normal component of the length gradient at interior vertices.
    pub grad_tol: f64,
    /// Relative length change allowed when the vertex count doubles.
    pub refine_tol: f64,
    pub energy_iterations: usize,
    pub newton_iterations: usize,
}

impl GeodesicSettings {
    pub fn from_tol(tol: f64) -> Self {
        Self {
            initial_vertices: 129,
            max_vertices: 8193,
            grad_tol: tol,
            refine_tol: 1e-8,
            energy_iterations: 200,
            newton_iterations: 60,
        }
    }

    /// A cheap setting used to seed shooting.
    pub fn coarse() -> Self {
        Self {
            initial_vertices: 129,
            max_vertices: 513,
            grad_tol: 1e-8,
            refine_tol: 1e-4,
            energy_iterations: 100,
            newton_iterations: 40,
        }
    }
}

impl Default for GeodesicSettings {
    fn default() -> Self {
        Self::from_tol(1e-9)
    }
}

/// Weight field of a length functional `int w(x) |dx|`.
pub trait LengthWeight {
    /// `(w, grad w, hess w)` at `x`.
    fn weight_derivatives(&self, x: &Vec2) -> Result<(f64, Vec2, Matrix2<f64>)>;

    fn weight(&self, x: &Vec2) -> Result<f64> {
        Ok(self.weight_derivatives(x)?.0)
    }

    /// The collision error if `x` is inside an excluded region.
    fn excluded(&self, _x: &Vec2) -> Option<Error> {
        None
    }
}

impl LengthWeight for PotentialConfig {
    fn weight_derivatives(&self, x: &Vec2) -> Result<(f64, Vec2, Matrix2<f64>)> {
        self.jacobi_weight_derivatives(x)
    }

    fn weight(&self, x: &Vec2) -> Result<f64> {
        self.jacobi_weight(x)
    }

    fn excluded(&self, x: &Vec2) -> Option<Error> {
        if self.centres.is_empty() {
            return None;
        }
        let (index, distance) = self.nearest_centre(x);
        let limit = self.collision_radius();
        (distance < limit).then_some(Error::CollisionProximity { index, distance, limit })
    }
}

/// The Euclidean metric.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitWeight;

impl LengthWeight for UnitWeight {
    fn weight_derivatives(&self, _x: &Vec2) -> Result<(f64, Vec2, Matrix2<f64>)> {
        Ok((1.0, Vec2::zeros(), Matrix2::zeros()))
    }
}

/// `sum_k w(midpoint_k) |segment_k|`.
pub fn discrete_length<W: LengthWeight + ?Sized>(vertices: &[Vec2], cfg: &W) -> Result<f64> {
    let mut total = 0.0;
    for w in vertices.windows(2) {
        let m = 0.5 * (w[0] + w[1]);
        total += cfg.weight(&m)? * (w[1] - w[0]).norm();
    }
    Ok(total)
}

fn perp(v: &Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

fn vertex_normals(v: &[Vec2]) -> Vec<Vec2> {
    let n = v.len();
    let mut out = vec![Vec2::zeros(); n];
    for k in 1..n - 1 {
        let d = v[k + 1] - v[k - 1];
        let norm = d.norm();
        out[k] = if norm > 0.0 { perp(&d) / norm } else { Vec2::zeros() };
    }
    out
}

struct SegmentTerms {
    /// gradient contribution to the first / second vertex
    g0: Vec2,
    g1: Vec2,
    /// Hessian blocks d g0/d x0, d g1/d x1, d g0/d x1
    h00: Matrix2<f64>,
    h11: Matrix2<f64>,
    h01: Matrix2<f64>,
}

fn segment_terms<W: LengthWeight + ?Sized>(x0: &Vec2, x1: &Vec2, cfg: &W) -> Result<SegmentTerms> {
    let m = 0.5 * (x0 + x1);
    let (w, gw, hw) = cfg.weight_derivatives(&m)?;
    let e = x1 - x0;
    let l = e.norm();
    if l == 0.0 {
        let z = Matrix2::zeros();
        return Ok(SegmentTerms {
            g0: Vec2::zeros(),
            g1: Vec2::zeros(),
            h00: z,
            h11: z,
            h01: z,
        });
    }
    let u = e / l;
    let p = (Matrix2::identity() - u * u.transpose()) / l;
    let a = hw * (0.25 * l) + p * w;
    let s = (gw * u.transpose() + u * gw.transpose()) * 0.5;
    let k = (gw * u.transpose() - u * gw.transpose()) * 0.5;
    Ok(SegmentTerms {
        g0: 0.5 * gw * l - w * u,
        g1: 0.5 * gw * l + w * u,
        h00: a - s,
        h11: a + s,
        // d g0 / d x1 = hw l/4 + (gw u^T - u gw^T)/2 - w P
        h01: hw * (0.25 * l) + k - p * w,
    })
}

/// Normal components of the length gradient at interior vertices.
pub fn projected_gradient<W: LengthWeight + ?Sized>(vertices: &[Vec2], cfg: &W) -> Result<Vec<f64>> {
    let n = vertices.len();
    let normals = vertex_normals(vertices);
    let mut grad = vec![Vec2::zeros(); n];
    for k in 0..n - 1 {
        let t = segment_terms(&vertices[k], &vertices[k + 1], cfg)?;
        grad[k] += t.g0;
        grad[k + 1] += t.g1;
    }
    Ok((1..n - 1).map(|k| grad[k].dot(&normals[k])).collect())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Gradient and tridiagonal Hessian in normal coordinates.
fn normal_system<W: LengthWeight + ?Sized>(vertices: &[Vec2], normals: &[Vec2], cfg: &W) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = vertices.len();
    let m = n - 2;
    let mut grad = vec![Vec2::zeros(); n];
    let mut diag_blocks = vec![Matrix2::zeros(); n];
    let mut off = vec![0.0; m.saturating_sub(1)];
    for k in 0..n - 1 {
        let t = segment_terms(&vertices[k], &vertices[k + 1], cfg)?;
        grad[k] += t.g0;
        grad[k + 1] += t.g1;
        diag_blocks[k] += t.h00;
        diag_blocks[k + 1] += t.h11;
        // coupling between interior unknowns k-1 and k (indices shifted by one)
        if k >= 1 && k + 1 <= n - 2 {
            off[k - 1] = normals[k].dot(&(t.h01 * normals[k + 1]));
        }
    }
    let g: Vec<f64> = (1..n - 1).map(|k| grad[k].dot(&normals[k])).collect();
    let d: Vec<f64> = (1..n - 1).map(|k| normals[k].dot(&(diag_blocks[k] * normals[k]))).collect();
    Ok((g, d, off))
}

/// Solves a symmetric tridiagonal system; `None` if a pivot is not positive.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if !(piv > 0.0) {
        return None;
    }
    c[0] = if n > 1 { off[0] / piv } else { 0.0 };
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - off[i - 1] * c[i - 1];
        if !(piv > 0.0) {
            return None;
        }
        if i < n - 1 {
            c[i] = off[i] / piv;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / piv;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Some(x)
}

fn displaced(vertices: &[Vec2], normals: &[Vec2], step: &[f64], scale: f64) -> Vec<Vec2> {
    let mut out = vertices.to_vec();
    for k in 1..vertices.len() - 1 {
        out[k] += normals[k] * (scale * step[k - 1]);
    }
    out
}

fn admissible<W: LengthWeight + ?Sized>(v: &[Vec2], cfg: &W, class_ok: &dyn Fn(&[Vec2]) -> bool) -> Result<()> {
    if let Some(e) = v.iter().find_map(|x| cfg.excluded(x)) {
        return Err(e);
    }
    if class_ok(v) {
        Ok(())
    } else {
        Err(Error::ClassEscape)
    }
}

/// Solves a symmetric positive definite block-tridiagonal system with 2x2
/// blocks (`diag[i]`, `upper[i]` coupling `i` and `i + 1`).
fn solve_block_tridiagonal(diag: &[Matrix2<f64>], upper: &[Matrix2<f64>], rhs: &[Vec2]) -> Option<Vec<Vec2>> {
    let n = diag.len();
    let mut inv = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (s, r) = if i == 0 {
            (diag[0], rhs[0])
        } else {
            let lt = upper[i - 1].transpose() * inv[i - 1];
            (diag[i] - lt * upper[i - 1], rhs[i] - lt * y[i - 1])
        };
        if !(s[(0, 0)] > 0.0 && s.determinant() > 0.0) {
            return None;
        }
        inv.push(s.try_inverse()?);
        y.push(r);
    }
    let mut x = vec![Vec2::zeros(); n];
    x[n - 1] = inv[n - 1] * y[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = inv[i] * (y[i] - upper[i] * x[i + 1]);
    }
    Some(x)
}

/// `sum_k (w(m_k) l_k)^2`, whose minimizers are discrete geodesics with
/// vertices equidistributed in Jacobi length.
fn discrete_energy<W: LengthWeight + ?Sized>(v: &[Vec2], cfg: &W) -> Result<f64> {
    let mut total = 0.0;
    for w in v.windows(2) {
        let q = cfg.weight(&(0.5 * (w[0] + w[1])))? * (w[1] - w[0]).norm();
        total += q * q;
    }
    Ok(total)
}

/// Damped Newton descent of the discrete energy over all interior coordinates.
fn energy_descent<W: LengthWeight + ?Sized>(
    mut v: Vec<Vec2>,
    cfg: &W,
    settings: &GeodesicSettings,
    class_ok: &dyn Fn(&[Vec2]) -> bool,
) -> Result<(Vec<Vec2>, Option<Error>)> {
    let n = v.len();
    let m = n - 2;
    let mut energy = discrete_energy(&v, cfg)?;
    let mut lambda = 1e-6;
    let mut rejection = None;
    for _ in 0..settings.energy_iterations {
        let mut grad = vec![Vec2::zeros(); n];
        let mut diag = vec![Matrix2::zeros(); n];
        let mut upper = vec![Matrix2::zeros(); n];
        for k in 0..n - 1 {
            let t = segment_terms(&v[k], &v[k + 1], cfg)?;
            let q = cfg.weight(&(0.5 * (v[k] + v[k + 1])))? * (v[k + 1] - v[k]).norm();
            grad[k] += 2.0 * q * t.g0;
            grad[k + 1] += 2.0 * q * t.g1;
            diag[k] += 2.0 * (t.g0 * t.g0.transpose() + t.h00 * q);
            diag[k + 1] += 2.0 * (t.g1 * t.g1.transpose() + t.h11 * q);
            upper[k] = 2.0 * (t.g0 * t.g1.transpose() + t.h01 * q);
        }
        let g: Vec<Vec2> = grad[1..n - 1].to_vec();
        let gmax = g.iter().fold(0.0f64, |a, x| a.max(x.norm()));
        if gmax <= 1e-3 * settings.grad_tol * energy.sqrt() {
            break;
        }
        let scale = diag[1..n - 1].iter().fold(0.0f64, |a, d| a.max(d.trace()));
        let rhs: Vec<Vec2> = g.iter().map(|x| -x).collect();
        let mut accepted = false;
        for _ in 0..40 {
            let shifted: Vec<Matrix2<f64>> = diag[1..n - 1]
                .iter()
                .map(|d| d + Matrix2::identity() * (lambda * scale))
                .collect();
            let Some(step) = solve_block_tridiagonal(&shifted, &upper[1..m.max(1)], &rhs) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = v.clone();
            for k in 1..n - 1 {
                trial[k] += step[k - 1];
            }
            match admissible(&trial, cfg, class_ok) {
                Err(e) => rejection = Some(e),
                Ok(()) => if let Ok(e) = discrete_energy(&trial, cfg) {
                    if e < energy {
                        let done = (energy - e) <= 1e-15 * energy;
                        v = trial;
                        energy = e;
                        accepted = true;
                        lambda = (lambda * 0.3).max(1e-14);
                        if done {
                            return Ok((v, None));
                        }
                        break;
                    }
                },
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok((v, rejection))
}

/// Newton descent of the discrete energy (all coordinates) followed by a
/// tridiagonal Newton polish of the discrete length along vertex normals.
fn relax<W: LengthWeight + ?Sized>(
    v: Vec<Vec2>,
    cfg: &W,
    settings: &GeodesicSettings,
    class_ok: &dyn Fn(&[Vec2]) -> bool,
) -> Result<(Vec<Vec2>, f64)> {
    if v.len() < 3 {
        let l = discrete_length(&v, cfg)?;
        return Ok((v, l));
    }
    let (mut v, mut rejection) = energy_descent(v, cfg, settings, class_ok)?;
    let mut length = discrete_length(&v, cfg)?;

    let mut lambda = 0.0f64;
    let mut stalls = 0;
    for _ in 0..settings.newton_iterations {
        let normals = vertex_normals(&v);
        let (g, d, off) = normal_system(&v, &normals, cfg)?;
        let gmax = max_abs(&g);
        if gmax <= settings.grad_tol {
            return Ok((v, length));
        }
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let step = loop {
            let shifted: Vec<f64> = d.iter().map(|x| x + lambda * scale).collect();
            match solve_tridiagonal(&shifted, &off, &rhs) {
                Some(s) => break s,
                None => lambda = if lambda == 0.0 { 1e-8 } else { lambda * 10.0 },
            }
            if lambda > 1e3 {
                return Err(Error::NoConvergence("geodesic Hessian could not be regularized".into()));
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = displaced(&v, &normals, &step, t);
            match admissible(&trial, cfg, class_ok) {
                Err(e) => rejection = Some(e),
                Ok(()) => if let Ok(l) = discrete_length(&trial, cfg) {
                    let gnew = projected_gradient(&trial, cfg).map(|g| max_abs(&g)).unwrap_or(f64::INFINITY);
                    if l <= length + 1e-13 * length.abs() || gnew < 0.5 * gmax {
                        v = trial;
                        length = l;
                        accepted = true;
                        break;
                    }
                },
            }
            t *= 0.5;
        }
        if accepted {
            rejection = None;
            lambda *= 0.1;
            if lambda < 1e-12 {
                lambda = 0.0;
            }
        } else {
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 100.0 };
            stalls += 1;
            if stalls > 8 {
                break;
            }
        }
    }
    let g = projected_gradient(&v, cfg)?;
    if max_abs(&g) <= settings.grad_tol {
        Ok((v, length))
    } else if let Some(e) = rejection {
        Err(e)
    } else {
        Err(Error::NoConvergence(format!("geodesic gradient {:.3e} above tolerance", max_abs(&g))))
    }
}

fn class_predicate<'a>(
    partition: &'a Option<Partition>,
    theta_start: f64,
    theta_end: f64,
    cfg: &'a PotentialConfig,
) -> impl Fn(&[Vec2]) -> bool + 'a {
    move |v: &[Vec2]| match partition {
        None => true,
        Some(p) => in_class(v, theta_start, theta_end, p, cfg),
    }
}

/// Minimizes the discrete length of `vertices` for an arbitrary weight, with
/// fixed endpoints and no class constraint. Returns the vertices and the length.
pub fn relax_polyline<W: LengthWeight + ?Sized>(vertices: Vec<Vec2>, weight: &W, settings: &GeodesicSettings) -> Result<(Vec<Vec2>, f64)> {
    relax(vertices, weight, settings, &|_| true)
}

/// Polygonal initial path through the gap between the partition blocks, the
/// shorter of the two orientations.
pub fn seed_path(p1: &BoundaryPoint, p2: &BoundaryPoint, partition: &Partition, cfg: &PotentialConfig) -> Result<GeodesicPath> {
    oriented_seeds(p1, p2, partition, cfg)?
        .into_iter()
        .min_by(|a, b| a.jacobi_length.total_cmp(&b.jacobi_length))
        .ok_or(Error::InfeasiblePartition)
}

/// One seed per orientation (each block on the left in turn) that can be routed.
pub fn oriented_seeds(p1: &BoundaryPoint, p2: &BoundaryPoint, partition: &Partition, cfg: &PotentialConfig) -> Result<Vec<GeodesicPath>> {
    if p1.theta == p2.theta {
        return Err(Error::InvalidPartition("degenerate endpoints".into()));
    }
    if partition.n_centres() != cfg.centres.len() {
        return Err(Error::InvalidPartition("partition does not match the centre count".into()));
    }
    let (a, b) = partition.blocks();
    let mut seeds = Vec::new();
    for (left, right) in [(&a, &b), (&b, &a)] {
        if let Some(seed) = oriented_seed(p1, p2, left, right, partition, cfg)? {
            seeds.push(seed);
        }
    }
    if seeds.is_empty() {
        return Err(Error::InfeasiblePartition);
    }
    Ok(seeds)
}

fn oriented_seed(
    p1: &BoundaryPoint,
    p2: &BoundaryPoint,
    left: &[usize],
    right: &[usize],
    partition: &Partition,
    cfg: &PotentialConfig,
) -> Result<Option<GeodesicPath>> {
    let (u, offset, _margin) = separating_line(left, right, cfg)?;
    let pos = cfg.centre_positions();
    let centroid = pos.iter().fold(Vec2::zeros(), |a, b| a + b) / pos.len() as f64;
    let gap = centroid + u * (offset - u.dot(&centroid));
    // Direction of travel with the left block (smaller <u, c>) on the left.
    let t = perp(&u);
    let cluster = pos.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let half = (2.0 * cluster + gap.norm()).max(0.05 * cfg.radius).min(0.7 * cfg.radius);
    let gate_a = gap - t * half;
    let gate_b = gap + t * half;
    let r_mid = 0.5 * (gate_a.norm().max(gate_b.norm()) + cfg.radius);
    let x1 = p1.position(cfg.radius);
    let x2 = p2.position(cfg.radius);
    let phi_a = gate_a.y.atan2(gate_a.x);
    let phi_b = gate_b.y.atan2(gate_b.x);

    let arc_points = |from: f64, to: f64, ccw: bool| -> Vec<Vec2> {
        let sweep = if ccw { (to - from).rem_euclid(TAU) } else { -(from - to).rem_euclid(TAU) };
        let pieces = ((sweep.abs() / 0.05).ceil() as usize).max(1);
        (0..=pieces)
            .map(|k| on_circle(r_mid, from + sweep * k as f64 / pieces as f64))
            .collect()
    };

    let mut best: Option<(f64, Vec<Vec2>)> = None;
    for ccw_in in [true, false] {
        for ccw_out in [true, false] {
            let mut poly = vec![x1];
            poly.extend(arc_points(p1.theta, phi_a, ccw_in));
            poly.push(gate_a);
            poly.push(gate_b);
            poly.extend(arc_points(phi_b, p2.theta, ccw_out));
            poly.push(x2);
            let dense = resample_uniform(&poly, 257);
            let w = winding_numbers(&dense, p1.theta, p2.theta, cfg);
            if separated_left_block(&w).as_deref() != Some(left) {
                continue;
            }
            let l = discrete_length(&dense, cfg)?;
            if best.as_ref().is_none_or(|(bl, _)| l < *bl) {
                best = Some((l, dense));
            }
        }
    }
    Ok(best.map(|(jacobi_length, vertices)| GeodesicPath {
        vertices,
        jacobi_length,
        partition: Some(partition.clone()),
    }))
}

/// Equal Euclidean spacing along a polyline.
fn resample_uniform(poly: &[Vec2], n: usize) -> Vec<Vec2> {
    let mut cum = vec![0.0];
    for w in poly.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while j + 1 < cum.len() - 1 && cum[j + 1] < target {
            j += 1;
        }
        let span = cum[j + 1] - cum[j];
        let s = if span > 0.0 { ((target - cum[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(poly[j] + (poly[j + 1] - poly[j]) * s);
    }
    out[0] = poly[0];
    out[n - 1] = poly[poly.len() - 1];
    out
}

/// Minimizes the discrete Jacobi length with fixed endpoints inside the seed's
/// class, doubling the vertex count until the length settles.
pub fn minimize_geodesic(seed: &GeodesicPath, cfg: &PotentialConfig, tol: f64) -> Result<GeodesicPath> {
    minimize_geodesic_with(seed, cfg, &GeodesicSettings::from_tol(tol))
}

pub fn minimize_geodesic_with(seed: &GeodesicPath, cfg: &PotentialConfig, settings: &GeodesicSettings) -> Result<GeodesicPath> {
    let (ts, te) = seed.boundary_angles();
    let class_ok = class_predicate(&seed.partition, ts, te, cfg);
    admissible(&seed.vertices, cfg, &class_ok)?;
    let mut n = settings.initial_vertices.max(3);
    let (mut v, mut length) = relax(resample_uniform(&seed.vertices, n), cfg, settings, &class_ok)?;
    while 2 * n - 1 <= settings.max_vertices {
        let (fine, fine_len) = relax(refine_midpoints(&v), cfg, settings, &class_ok)?;
        let change = (fine_len - length).abs() / length;
        v = fine;
        length = fine_len;
        n = 2 * n - 1;
        if change <= settings.refine_tol {
            break;
        }
    }
    Ok(GeodesicPath {
        vertices: v,
        jacobi_length: length,
        partition: seed.partition.clone(),
    })
}

fn refine_midpoints(v: &[Vec2]) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(2 * v.len() - 1);
    for w in v.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    out.push(v[v.len() - 1]);
    out
}

/// Unit tangent at vertex `k` from the parabola through three neighbouring vertices.
fn vertex_tangent(v: &[Vec2], k: usize) -> Vec2 {
    let n = v.len();
    let (i0, i1, i2) = if k == 0 {
        (0, 1, 2)
    } else if k == n - 1 {
        (n - 3, n - 2, n - 1)
    } else {
        (k - 1, k, k + 1)
    };
    let s1 = (v[i1] - v[i0]).norm();
    let s2 = s1 + (v[i2] - v[i1]).norm();
    let s = [0.0, s1, s2][k - i0];
    // derivative of the Lagrange interpolant at parameter s
    let (a, b, c) = (0.0, s1, s2);
    let l0 = ((s - b) + (s - c)) / ((a - b) * (a - c));
    let l1 = ((s - a) + (s - c)) / ((b - a) * (b - c));
    let l2 = ((s - a) + (s - b)) / ((c - a) * (c - b));
    let d = v[i0] * l0 + v[i1] * l1 + v[i2] * l2;
    d.normalize()
}

/// Time parametrization `dt = ds / sqrt(2 (V - 1))` of a discrete geodesic.
pub fn reparametrize_maupertuis(path: &GeodesicPath, cfg: &PotentialConfig) -> Result<Arc> {
    let v = &path.vertices;
    if v.len() < 3 {
        return Err(Error::DegenerateWeight);
    }
    let mut t = 0.0;
    let mut length = 0.0;
    let mut samples = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        if k > 0 {
            let (a, b) = (v[k - 1], v[k]);
            let ds = (b - a).norm();
            let m = 0.5 * (a + b);
            let inv = |x: &Vec2| -> Result<f64> {
                let s = cfg.speed_from_energy(x).map_err(|_| Error::DegenerateWeight)?;
                Ok(1.0 / s)
            };
            t += ds / 6.0 * (inv(&a)? + 4.0 * inv(&m)? + inv(&b)?);
            length += cfg.jacobi_weight(&m)? * ds;
        }
        let speed = cfg.speed_from_energy(&v[k]).map_err(|_| Error::DegenerateWeight)?;
        samples.push(Sample {
            t,
            position: v[k],
            velocity: speed * vertex_tangent(v, k),
            length,
        });
    }
    Ok(Arc::new(samples, ArcKind::Inner, cfg))
}

/// Largest relative violation `|x'' - grad V| / |grad V|` over interior
/// samples, with accelerations from three-point differences of the velocities.
pub fn ode_residual(arc: &Arc, cfg: &PotentialConfig) -> f64 {
    let s = &arc.samples;
    let mut worst = 0.0f64;
    for k in 1..s.len().saturating_sub(1) {
        let h0 = s[k].t - s[k - 1].t;
        let h1 = s[k + 1].t - s[k].t;
        if h0 <= 0.0 || h1 <= 0.0 {
            continue;
        }
        let acc = ((s[k + 1].velocity - s[k].velocity) * (h0 * h0) + (s[k].velocity - s[k - 1].velocity) * (h1 * h1))
            / (h0 * h1 * (h0 + h1));
        let g = cfg.gradient_unchecked(&s[k].position);
        worst = worst.max((acc - g).norm() / g.norm());
    }
    worst
}

// ---------------------------------------------------------------------------
// Exact inner arcs

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSettings {
    pub integrator: IntegratorSettings,
    pub position_tol: f64,
    pub max_time: f64,
    pub geodesic: GeodesicSettings,
}

impl InnerSettings {
    pub fn from_tol(tol: f64) -> Self {
        Self {
            integrator: IntegratorSettings::from_tol(tol),
            position_tol: 1e-11,
            max_time: 20.0,
            geodesic: GeodesicSettings::coarse(),
        }
    }
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self::from_tol(1e-9)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub arc: Arc,
    pub partition: Partition,
    pub departure: BoundaryPoint,
    pub arrival: BoundaryPoint,
    /// Departure direction measured from the inward normal.
    pub beta: f64,
    pub jacobi_length: f64,
    /// Distance between the computed arrival and the requested endpoint.
    pub residual: f64,
}

impl InnerSolution {
    pub fn departure_velocity(&self) -> Vec2 {
        self.arc.start().velocity
    }

    pub fn arrival_velocity(&self) -> Vec2 {
        self.arc.end().velocity
    }

    pub fn initial_angular_speed(&self) -> f64 {
        let s = self.arc.start();
        angular_speed(&s.position, &s.velocity).unwrap_or(0.0)
    }

    /// First time the arc reaches radius `R/2`, if it does.
    pub fn half_radius_time(&self, cfg: &PotentialConfig) -> Option<f64> {
        let target = 0.5 * cfg.radius;
        let s = &self.arc.samples;
        let k = s.iter().position(|x| x.position.norm() <= target)?;
        if k == 0 {
            return Some(0.0);
        }
        let (mut a, mut b) = (s[k - 1].t, s[k].t);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if self.arc.state_at(cfg, m).position.norm() > target {
                a = m;
            } else {
                b = m;
            }
        }
        Some(0.5 * (a + b))
    }
}

struct InnerShot {
    arc: Arc,
    miss: f64,
}

fn shoot_inner(
    p1: &BoundaryPoint,
    p2: &BoundaryPoint,
    partition: &Partition,
    beta: f64,
    cfg: &PotentialConfig,
    settings: &InnerSettings,
    dense: bool,
) -> Result<InnerShot> {
    let x = p1.position(cfg.radius);
    let speed = cfg.speed_from_energy(&x)?;
    let inward = -x / cfg.radius;
    let v = speed * (beta.cos() * inward + beta.sin() * tangent(p1.theta));
    let mut integ = settings.integrator;
    if dense {
        integ = integ.dense(10.0 * integ.energy_tol);
    }
    let (arc, ev) = crossing_with(
        &State::new(x, v),
        cfg.radius,
        Direction::Outward,
        settings.max_time,
        cfg,
        &integ,
        ArcKind::Inner,
    )?;
    let points: Vec<Vec2> = arc.samples.iter().map(|s| s.position).collect();
    let exit = ev.state.position;
    if !in_class(&points, p1.theta, exit.y.atan2(exit.x), partition, cfg) {
        return Err(Error::ClassEscape);
    }
    let miss = wrap_pi(exit.y.atan2(exit.x) - p2.theta);
    Ok(InnerShot { arc, miss })
}

/// Departure direction of a discrete geodesic relative to the inward normal.
fn departure_beta(path: &GeodesicPath, theta: f64) -> f64 {
    let t = vertex_tangent(&path.vertices, 0);
    let inward = -Vec2::new(theta.cos(), theta.sin());
    t.dot(&tangent(theta)).atan2(t.dot(&inward))
}

/// Exact inner arc: discrete minimizer in the class, then shooting on the
/// departure direction.
pub fn solve_inner(
    p1: &BoundaryPoint,
    p2: &BoundaryPoint,
    partition: &Partition,
    cfg: &PotentialConfig,
    settings: &InnerSettings,
) -> Result<InnerSolution> {
    let mut best: Option<InnerSolution> = None;
    let mut first_error = None;
    for seed in oriented_seeds(p1, p2, partition, cfg)? {
        match solve_oriented(p1, p2, partition, &seed, cfg, settings) {
            Ok(sol) => {
                if best.as_ref().is_none_or(|b| sol.jacobi_length < b.jacobi_length) {
                    best = Some(sol);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_error.unwrap_or(Error::InfeasiblePartition))
}

fn solve_oriented(
    p1: &BoundaryPoint,
    p2: &BoundaryPoint,
    partition: &Partition,
    seed: &GeodesicPath,
    cfg: &PotentialConfig,
    settings: &InnerSettings,
) -> Result<InnerSolution> {
    let geo = minimize_geodesic_with(seed, cfg, &settings.geodesic)?;
    let beta0 = departure_beta(&geo, p1.theta);
    let sol = shoot_from(p1, p2, partition, cfg, settings, beta0, 1e-4)?;
    // the shot must reproduce the discrete minimizer, not a neighbouring geodesic
    let gap = (sol.jacobi_length - geo.jacobi_length).abs() / geo.jacobi_length;
    if gap > 1e-2 {
        return Err(Error::NoConvergence(format!(
            "shooting converged to a geodesic {gap:.2e} away in length from the discrete minimizer"
        )));
    }
    Ok(sol)
}

/// Shooting warm-started from a known departure direction.
pub fn solve_inner_from(
    p1: &BoundaryPoint,
    p2: &BoundaryPoint,
    partition: &Partition,
    cfg: &PotentialConfig,
    settings: &InnerSettings,
    beta_guess: f64,
) -> Result<InnerSolution> {
    shoot_from(p1, p2, partition, cfg, settings, beta_guess, 1e-6)
}

fn shoot_from(
    p1: &BoundaryPoint,
    p2: &BoundaryPoint,
    partition: &Partition,
    cfg: &PotentialConfig,
    settings: &InnerSettings,
    beta0: f64,
    first_step: f64,
) -> Result<InnerSolution> {
    let eval = |b: f64| shoot_inner(p1, p2, partition, b, cfg, settings, false).map(|s| s.miss);
    let f0 = eval(beta0)?;
    let ftol = settings.position_tol / cfg.radius;
    if first_step <= 1e-6 {
        if let Some(beta) = secant(beta0, f0, 1e-7, ftol, 0.05, eval) {
            if let Ok(sol) = finish_inner(p1, p2, partition, cfg, settings, beta) {
                return Ok(sol);
            }
        }
    }
    let mut bracket = None;
    if f0 == 0.0 {
        bracket = Some((beta0, f0, beta0, f0));
    }
    let mut step = first_step;
    let mut lo = (beta0, f0);
    let mut hi = (beta0, f0);
    let mut lo_open = true;
    let mut hi_open = true;
    while bracket.is_none() && step < 0.5 && (lo_open || hi_open) {
        if hi_open {
            let b = beta0 + step;
            match eval(b) {
                Ok(f) if f.signum() != hi.1.signum() && (f - hi.1).abs() < PI => bracket = Some((hi.0, hi.1, b, f)),
                Ok(f) => hi = (b, f),
                Err(_) => hi_open = false,
            }
        }
        if bracket.is_none() && lo_open {
            let b = beta0 - step;
            match eval(b) {
                Ok(f) if f.signum() != lo.1.signum() && (f - lo.1).abs() < PI => bracket = Some((b, f, lo.0, lo.1)),
                Ok(f) => lo = (b, f),
                Err(_) => lo_open = false,
            }
        }
        step *= 2.0;
    }
    let (a, fa, b, fb) = bracket.ok_or_else(|| Error::NoConvergence("inner shooting bracket not found".into()))?;
    let beta = if fa == 0.0 {
        a
    } else if fb == 0.0 {
        b
    } else {
        illinois(a, fa, b, fb, ftol, 200, eval)?
    };
    finish_inner(p1, p2, partition, cfg, settings, beta)
}

fn finish_inner(
    p1: &BoundaryPoint,
    p2: &BoundaryPoint,
    partition: &Partition,
    cfg: &PotentialConfig,
    settings: &InnerSettings,
    beta: f64,
) -> Result<InnerSolution> {
    let shot = shoot_inner(p1, p2, partition, beta, cfg, settings, true)?;
    let end = shot.arc.end().position;
    let residual = (end - p2.position(cfg.radius)).norm();
    if residual > 100.0 * settings.position_tol {
        return Err(Error::NoConvergence(format!("inner arrival error {residual:.3e}")));
    }
    Ok(InnerSolution {
        jacobi_length: shot.arc.jacobi_length(),
        arrival: BoundaryPoint::new(end.y.atan2(end.x)),
        departure: *p1,
        partition: partition.clone(),
        beta,
        residual,
        arc: shot.arc,
    })
}

// ---------------------------------------------------------------------------
// Local geodesics and truncation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexNeighborhood {
    pub center: [f64; 2],
    pub radius: f64,
}

impl ConvexNeighborhood {
    pub fn new(center: Vec2, radius: f64) -> Self {
        Self {
            center: [center.x, center.y],
            radius,
        }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.center[0], self.center[1])
    }

    pub fn contains(&self, x: &Vec2) -> bool {
        (x - self.center()).norm() < self.radius
    }

    fn check(&self, x: &Vec2) -> Result<()> {
        let distance = (x - self.center()).norm();
        if distance < self.radius {
            Ok(())
        } else {
            Err(Error::NeighborhoodExit {
                distance,
                radius: self.radius,
            })
        }
    }

    /// Multi-start uniqueness probe between points on an inner circle.
    pub fn validate(&self, cfg: &PotentialConfig, tol: f64) -> Result<()> {
        let c = self.center();
        let probes: Vec<Vec2> = (0..4)
            .map(|k| c + 0.6 * self.radius * Vec2::new((k as f64 * PI / 2.0 + 0.3).cos(), (k as f64 * PI / 2.0 + 0.3).sin()))
            .collect();
        for i in 0..probes.len() {
            for j in i + 1..probes.len() {
                local_geodesic(&probes[i], &probes[j], self, cfg, tol)?;
            }
        }
        Ok(())
    }

    /// Starts at `0.1 R` and halves the radius until the probe passes.
    pub fn establish(center: Vec2, cfg: &PotentialConfig, tol: f64) -> Result<Self> {
        let mut nb = Self::new(center, 0.1 * cfg.radius);
        for _ in 0..8 {
            match nb.validate(cfg, tol) {
                Ok(()) => return Ok(nb),
                Err(Error::UniquenessFailure { .. }) => nb.radius *= 0.5,
                Err(e) => return Err(e),
            }
        }
        Err(Error::UniquenessFailure { spread: f64::NAN })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGeodesic {
    /// Discrete minimizer certified by multi-start agreement.
    pub path: GeodesicPath,
    /// Exact solution of the equation of motion between the two ends.
    pub arc: Option<Arc>,
    pub jacobi_length: f64,
}

impl LocalGeodesic {
    pub fn departure_velocity(&self) -> Vec2 {
        self.arc.as_ref().map_or(Vec2::zeros(), |a| a.start().velocity)
    }

    pub fn arrival_velocity(&self) -> Vec2 {
        self.arc.as_ref().map_or(Vec2::zeros(), |a| a.end().velocity)
    }
}

const LOCAL_VERTICES: usize = 65;

/// The minimal geodesic from `p` to `q` inside a strongly convex neighbourhood.
pub fn local_geodesic(p: &Vec2, q: &Vec2, nbhd: &ConvexNeighborhood, cfg: &PotentialConfig, tol: f64) -> Result<LocalGeodesic> {
    nbhd.check(p)?;
    nbhd.check(q)?;
    if (p - q).norm() == 0.0 {
        return Ok(LocalGeodesic {
            path: GeodesicPath {
                vertices: vec![*p, *q],
                jacobi_length: 0.0,
                partition: None,
            },
            arc: None,
            jacobi_length: 0.0,
        });
    }
    let settings = GeodesicSettings {
        grad_tol: 1e-11,
        ..GeodesicSettings::from_tol(tol)
    };
    let chord = q - p;
    let normal = perp(&chord);
    let inside = |v: &[Vec2]| v.iter().all(|x| (x - nbhd.center()).norm() < nbhd.radius * 1.5);
    let mut paths = Vec::new();
    for bow in [0.0, 0.15, -0.15] {
        let seed: Vec<Vec2> = (0..LOCAL_VERTICES)
            .map(|k| {
                let s = k as f64 / (LOCAL_VERTICES - 1) as f64;
                p + chord * s + normal * (bow * (PI * s).sin())
            })
            .collect();
        let (v, l) = relax(seed, cfg, &settings, &inside)?;
        paths.push((v, l));
    }
    let spread = paths[1..]
        .iter()
        .flat_map(|(v, _)| v.iter().zip(&paths[0].0).map(|(a, b)| (a - b).norm()))
        .fold(0.0f64, f64::max);
    if spread > 1e-8 {
        return Err(Error::UniquenessFailure { spread });
    }
    let (vertices, jacobi_length) = paths.swap_remove(0);
    let path = GeodesicPath {
        vertices,
        jacobi_length,
        partition: None,
    };
    let arc = shoot_to_point(p, q, &path, cfg, tol)?;
    Ok(LocalGeodesic {
        jacobi_length: arc.jacobi_length(),
        path,
        arc: Some(arc),
    })
}

/// Two-parameter Newton shooting on `(direction, duration)` from `p` to `q`.
fn shoot_to_point(p: &Vec2, q: &Vec2, guide: &GeodesicPath, cfg: &PotentialConfig, tol: f64) -> Result<Arc> {
    let guide_arc = reparametrize_maupertuis(guide, cfg)?;
    let t0 = vertex_tangent(&guide.vertices, 0);
    let mut angle = t0.y.atan2(t0.x);
    let mut duration = guide_arc.duration;
    let speed = cfg.speed_from_energy(p)?;
    let settings = IntegratorSettings::from_tol(tol);
    let run = |angle: f64, duration: f64, dense: bool| -> Result<Arc> {
        let v = speed * Vec2::new(angle.cos(), angle.sin());
        let s = if dense { settings.dense(10.0 * tol) } else { settings };
        integrate_with(&State::new(*p, v), duration, cfg, &s, ArcKind::LocalGeodesic)
    };
    let scale = (q - p).norm();
    for _ in 0..30 {
        let arc = run(angle, duration, false)?;
        let end = arc.end();
        let res = end.position - q;
        if res.norm() <= 1e-13 + 1e-12 * scale {
            return run(angle, duration, true);
        }
        let h = 1e-7;
        let plus = run(angle + h, duration, false)?.end().position;
        let minus = run(angle - h, duration, false)?.end().position;
        let d_angle = (plus - minus) / (2.0 * h);
        let jac = Matrix2::from_columns(&[d_angle, end.velocity]);
        let step = jac
            .try_inverse()
            .ok_or_else(|| Error::NoConvergence("singular shooting Jacobian".into()))?
            * (-res);
        angle += step.x;
        duration = (duration + step.y).max(0.1 * duration);
    }
    Err(Error::NoConvergence("local geodesic shooting".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPoint {
    pub t_star: f64,
    pub point: Vec2,
}

/// Cuts the start of `arc` where its Jacobi length reaches half the
/// neighbourhood radius and checks the three placement conditions.
pub fn truncation_point(arc: &Arc, nbhd: &ConvexNeighborhood, cfg: &PotentialConfig) -> Result<TruncationPoint> {
    let target = 0.5 * nbhd.radius;
    if arc.jacobi_length() <= target {
        return Err(Error::ConditionViolation("arc shorter than the truncation length".into()));
    }
    let (mut a, mut b) = (0.0, arc.duration);
    let k = arc.samples.partition_point(|s| s.length < target);
    if k > 0 && k < arc.samples.len() {
        a = arc.samples[k - 1].t;
        b = arc.samples[k].t;
    }
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if arc.length_at(cfg, m) < target {
            a = m;
        } else {
            b = m;
        }
        if b - a <= 1e-15 * arc.duration {
            break;
        }
    }
    let t_star = 0.5 * (a + b);
    let point = arc.state_at(cfg, t_star).position;
    if !nbhd.contains(&point) {
        return Err(Error::ConditionViolation("truncation point outside the convex neighbourhood".into()));
    }
    if !(point.norm() < cfg.radius) {
        return Err(Error::ConditionViolation("truncation point not inside B_R".into()));
    }
    let half = 0.5 * cfg.radius;
    let escaped = arc
        .samples
        .iter()
        .take_while(|s| s.t <= t_star)
        .any(|s| s.position.norm() <= half || s.position.norm() > cfg.radius + 1e-9);
    if escaped {
        return Err(Error::ConditionViolation("initial segment leaves the annulus R/2 < |x| < R".into()));
    }
    Ok(TruncationPoint { t_star, point })
}

/// Sup-distance between a local geodesic (time-parametrized from the same
/// start) and the restriction of `arc` to `[0, t_star]`.
pub fn restriction_mismatch(arc: &Arc, local: &LocalGeodesic, cfg: &PotentialConfig) -> f64 {
    let Some(la) = &local.arc else { return 0.0 };
    let mut worst = 0.0f64;
    for s in &la.samples {
        worst = worst.max((arc.state_at(cfg, s.t).position - s.position).norm());
    }
    worst
}

// ---------------------------------------------------------------------------
// Angular-momentum sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerCase {
    pub theta_start: f64,
    pub theta_end: f64,
    pub partition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerCaseFailure {
    pub case: InnerCase,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerMomentumRow {
    pub epsilon: f64,
    /// Largest `|theta_dot(0)|` over the sampled inner arcs.
    pub max_abs_theta_dot: f64,
    pub worst_case: Option<InnerCase>,
    /// Smallest time to reach `R/2` (the lower bound `C` of the exit time).
    pub min_half_radius_time: f64,
    pub evaluated: usize,
    pub failures: Vec<InnerCaseFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerMomentumReport {
    pub rows: Vec<InnerMomentumRow>,
}

impl InnerMomentumReport {
    /// Largest grid epsilon with `max |theta_dot(0)| < lambda`.
    pub fn epsilon5(&self, lambda: f64) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.evaluated > 0 && r.max_abs_theta_dot < lambda)
            .map(|r| r.epsilon)
            .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))))
    }

    /// Profile sorted by decreasing epsilon is non-increasing up to `noise` (relative).
    pub fn is_non_increasing(&self, noise: f64) -> bool {
        let mut rows: Vec<&InnerMomentumRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
        rows.windows(2)
            .all(|w| w[1].max_abs_theta_dot <= w[0].max_abs_theta_dot * (1.0 + noise))
    }
}

/// Deterministic endpoint pairs: starting angles on a uniform grid, each paired
/// with a target a quarter to three quarters of a turn away.
pub fn inner_pairs(count: usize) -> Vec<(BoundaryPoint, BoundaryPoint)> {
    let offsets = [PI / 2.0, 3.0 * PI / 4.0, PI, 5.0 * PI / 4.0, 3.0 * PI / 2.0];
    (0..count)
        .map(|i| {
            let a = TAU * i as f64 / count as f64 + 0.1;
            (BoundaryPoint::new(a), BoundaryPoint::new(a + offsets[i % offsets.len()]))
        })
        .collect()
}

pub fn inner_angular_sweep(
    epsilons: &[f64],
    boundary_pairs: usize,
    partitions: &[Partition],
    cfg: &PotentialConfig,
    settings: &InnerSettings,
    exec_mode: Execution,
) -> InnerMomentumReport {
    let pairs = inner_pairs(boundary_pairs);
    let cases: Vec<(BoundaryPoint, BoundaryPoint, Partition)> = pairs
        .iter()
        .flat_map(|(a, b)| partitions.iter().map(move |p| (*a, *b, p.clone())))
        .collect();
    let rows = epsilons
        .iter()
        .map(|&eps| {
            let cfg_e = cfg.with_epsilon(eps);
            let results = exec::map(exec_mode, &cases, |(a, b, p)| {
                solve_inner(a, b, p, &cfg_e, settings).map(|s| (s.initial_angular_speed().abs(), s.half_radius_time(&cfg_e)))
            });
            let mut row = InnerMomentumRow {
                epsilon: eps,
                max_abs_theta_dot: 0.0,
                worst_case: None,
                min_half_radius_time: f64::INFINITY,
                evaluated: 0,
                failures: Vec::new(),
            };
            for ((a, b, p), r) in cases.iter().zip(results) {
                let case = InnerCase {
                    theta_start: a.theta,
                    theta_end: b.theta,
                    partition: p.label(),
                };
                match r {
                    Ok((w, s)) => {
                        row.evaluated += 1;
                        if w >= row.max_abs_theta_dot {
                            row.max_abs_theta_dot = w;
                            row.worst_case = Some(case);
                        }
                        if let Some(s) = s {
                            row.min_half_radius_time = row.min_half_radius_time.min(s);
                        }
                    }
                    Err(e) => row.failures.push(InnerCaseFailure {
                        case,
                        message: e.to_string(),
                    }),
                }
            }
            row
        })
        .collect();
    InnerMomentumReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::jacobi_length_of_arc;
    use crate::potential::Centre;

    fn two(eps: f64) -> PotentialConfig {
        PotentialConfig::default().with_epsilon(eps)
    }

    fn square(eps: f64) -> PotentialConfig {
        let c = |x, y| Centre::new(x, y, 0.25);
        PotentialConfig {
            centres: vec![c(1.0, 1.0), c(-1.0, 1.0), c(-1.0, -1.0), c(1.0, -1.0)],
            ..PotentialConfig::default().with_epsilon(eps)
        }
    }

    fn solve(cfg: &PotentialConfig, a: f64, b: f64, left: &[usize]) -> InnerSolution {
        let p = Partition::new(left.iter().copied(), cfg.centres.len()).unwrap();
        solve_inner(&BoundaryPoint::new(a), &BoundaryPoint::new(b), &p, cfg, &InnerSettings::default()).unwrap()
    }

    #[test]
    fn partition_enumeration_and_labels() {
        assert_eq!(Partition::all_two_block(2).len(), 1);
        assert_eq!(Partition::all_two_block(3).len(), 3);
        assert_eq!(Partition::all_two_block(4).len(), 7);
        assert!(Partition::all_two_block(4).iter().all(|p| p.blocks().0.contains(&0)));
        for p in Partition::all_two_block(4) {
            assert_eq!(Partition::parse(&p.label(), 4).unwrap(), p);
            let (a, b) = p.blocks();
            assert_eq!(Partition::new(b.clone(), 4).unwrap(), p);
            assert!(p.realized_by(&a) && p.realized_by(&b));
        }
        assert_eq!(Partition::parse("1|0,2", 3).unwrap().blocks().0, vec![0, 2]);
        assert!(Partition::new([0, 1], 2).is_err());
        assert!(Partition::new(Vec::<usize>::new(), 2).is_err());
        assert!(Partition::new([3], 3).is_err());
        assert!(Partition::parse("{0}|{2}", 3).is_err());
    }

    #[test]
    fn seed_passes_between_two_centres() {
        let cfg = two(0.05);
        let p = Partition::new([0], 2).unwrap();
        let (a, b) = (BoundaryPoint::new(PI / 2.0), BoundaryPoint::new(3.0 * PI / 2.0));
        let seed = seed_path(&a, &b, &p, &cfg).unwrap();
        assert_eq!(seed.start(), a.position(cfg.radius));
        assert_eq!(seed.end(), b.position(cfg.radius));
        assert!(seed.respects_class(&cfg));
        let crossing = seed
            .vertices
            .windows(2)
            .find(|w| w[0].y >= 0.0 && w[1].y < 0.0)
            .map(|w| w[0].x)
            .unwrap();
        assert!(crossing.abs() < 0.05);
    }

    #[test]
    fn seeds_realize_every_square_partition() {
        let cfg = square(0.05);
        let (a, b) = (BoundaryPoint::new(0.3), BoundaryPoint::new(2.9));
        for p in Partition::all_two_block(4) {
            let crossing_diagonal = p.blocks().0 == [0, 2];
            match seed_path(&a, &b, &p, &cfg) {
                Ok(seed) => {
                    assert!(!crossing_diagonal);
                    assert!(seed.respects_class(&cfg), "{}", p.label());
                    assert_eq!(seed.start(), a.position(cfg.radius));
                    assert_eq!(seed.end(), b.position(cfg.radius));
                }
                Err(e) => {
                    assert!(crossing_diagonal, "{}: {e}", p.label());
                    assert!(matches!(e, Error::InfeasiblePartition));
                }
            }
        }
    }

    #[test]
    fn unit_weight_minimizer_is_the_chord() {
        let p = Vec2::new(0.3, -0.1);
        let q = Vec2::new(-0.2, 0.25);
        let n = 101;
        let bowed: Vec<Vec2> = (0..n)
            .map(|k| {
                let s = k as f64 / (n - 1) as f64;
                p + (q - p) * s + Vec2::new(0.1, 0.2) * (PI * s).sin()
            })
            .collect();
        let (v, l) = relax_polyline(bowed, &UnitWeight, &GeodesicSettings::from_tol(1e-12)).unwrap();
        assert!((l - (q - p).norm()).abs() < 1e-8);
        let d = (q - p).normalize();
        assert!(v.iter().all(|x| (x - p).perp(&d).abs() < 1e-8));
    }

    #[test]
    fn symmetric_endpoints_give_symmetric_minimizer() {
        let cfg = two(0.05);
        let p = Partition::new([0], 2).unwrap();
        let (a, b) = (BoundaryPoint::new(2.0), BoundaryPoint::new(-2.0));
        let seed = seed_path(&a, &b, &p, &cfg).unwrap();
        let geo = minimize_geodesic(&seed, &cfg, 1e-9).unwrap();
        let v = &geo.vertices;
        let n = v.len();
        let worst = (0..n)
            .map(|k| (v[k] - Vec2::new(v[n - 1 - k].x, -v[n - 1 - k].y)).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "mismatch {worst:e}");
        assert!(max_abs(&projected_gradient(v, &cfg).unwrap()) <= 1e-9);
        assert!(geo.respects_class(&cfg));
    }

    #[test]
    fn refinement_converges() {
        let cfg = two(0.05);
        let p = Partition::new([0], 2).unwrap();
        let seed = seed_path(&BoundaryPoint::new(0.9), &BoundaryPoint::new(2.5), &p, &cfg).unwrap();
        let geo = minimize_geodesic(&seed, &cfg, 1e-9).unwrap();
        let doubled = relax_polyline(refine_midpoints(&geo.vertices), &cfg, &GeodesicSettings::default()).unwrap();
        assert!((doubled.1 - geo.jacobi_length).abs() / geo.jacobi_length <= 1e-6);
    }

    #[test]
    fn reparametrized_geodesic_obeys_the_dynamics() {
        let cfg = two(0.05);
        let p = Partition::new([0], 2).unwrap();
        let seed = seed_path(&BoundaryPoint::new(0.9), &BoundaryPoint::new(2.5), &p, &cfg).unwrap();
        let geo = minimize_geodesic(&seed, &cfg, 1e-9).unwrap();
        let arc = reparametrize_maupertuis(&geo, &cfg).unwrap();
        for s in &arc.samples {
            let expected = cfg.speed_from_energy(&s.position).unwrap();
            assert!((s.velocity.norm() - expected).abs() <= 1e-6 * expected);
            assert!(cfg.energy_residual(&s.position, &s.velocity).abs() <= 1e-6);
        }
        assert!(ode_residual(&arc, &cfg) <= 1e-4, "{}", ode_residual(&arc, &cfg));
        let l = jacobi_length_of_arc(&arc, &cfg);
        assert!((l.weight_speed - geo.jacobi_length).abs() <= 1e-6 * geo.jacobi_length);
    }

    #[test]
    fn circular_orbit_reparametrizes_to_kepler() {
        let cfg = PotentialConfig::new(vec![Centre::new(0.0, 0.0, 1.0)], 0.0, 0.4, 0.6);
        let n = 2001;
        let path = GeodesicPath {
            vertices: (0..n)
                .map(|k| on_circle(0.5, PI / 2.0 * k as f64 / (n - 1) as f64))
                .collect(),
            jacobi_length: PI / 4.0,
            partition: None,
        };
        let arc = reparametrize_maupertuis(&path, &cfg).unwrap();
        assert!(ode_residual(&arc, &cfg) <= 1e-6);
        assert!((arc.duration - PI / (4.0 * 2f64.sqrt())).abs() < 1e-7);
    }

    #[test]
    fn inner_arc_reaches_target_in_class() {
        let cfg = two(0.05);
        let sol = solve(&cfg, 0.9, 2.5, &[0]);
        assert!(sol.residual <= 1e-9);
        assert!(sol.arc.max_energy_residual <= 1e-8);
        assert_eq!(sol.arc.kind, ArcKind::Inner);
        let pts: Vec<Vec2> = sol.arc.samples.iter().map(|s| s.position).collect();
        assert!(in_class(&pts, 0.9, 2.5, &sol.partition, &cfg));
        assert!(pts.iter().all(|x| x.norm() <= cfg.radius + 1e-9));
        let seed = seed_path(&sol.departure, &BoundaryPoint::new(2.5), &sol.partition, &cfg).unwrap();
        let geo = minimize_geodesic(&seed, &cfg, 1e-9).unwrap();
        assert!((geo.jacobi_length - sol.jacobi_length).abs() <= 1e-5 * sol.jacobi_length);
    }

    #[test]
    fn symmetric_inner_arc_starts_radially() {
        let cfg = two(0.05);
        let sol = solve(&cfg, PI / 2.0, 3.0 * PI / 2.0, &[0]);
        assert!(sol.initial_angular_speed().abs() <= 1e-9);
        assert!(sol.beta.abs() <= 1e-9);
    }

    #[test]
    fn reflection_reverses_inner_angular_speed() {
        let cfg = two(0.05);
        let a = solve(&cfg, 0.9, 2.5, &[0]);
        let b = solve(&cfg, -0.9, -2.5, &[1]);
        assert!((a.initial_angular_speed() + b.initial_angular_speed()).abs() < 1e-7);
        assert!((a.jacobi_length - b.jacobi_length).abs() < 1e-8);
    }

    #[test]
    fn warm_start_matches_cold_solve() {
        let cfg = two(0.05);
        let cold = solve(&cfg, 0.9, 2.5, &[0]);
        let p = Partition::new([0], 2).unwrap();
        let warm = solve_inner_from(
            &BoundaryPoint::new(0.9),
            &BoundaryPoint::new(2.5),
            &p,
            &cfg,
            &InnerSettings::default(),
            cold.beta + 1e-3,
        )
        .unwrap();
        assert!((warm.beta - cold.beta).abs() < 1e-9);
    }

    #[test]
    fn overlapping_blocks_are_infeasible() {
        let cfg = square(0.05);
        let p = Partition::new([0, 2], 4).unwrap();
        let r = solve_inner(&BoundaryPoint::new(0.3), &BoundaryPoint::new(2.9), &p, &cfg, &InnerSettings::default());
        assert!(matches!(r, Err(Error::InfeasiblePartition)));
    }

    #[test]
    fn degenerate_local_geodesic() {
        let cfg = two(0.05);
        let c = on_circle(cfg.radius, 0.7);
        let nb = ConvexNeighborhood::new(c, 0.04);
        let x = c * 0.95;
        let g = local_geodesic(&x, &x, &nb, &cfg, 1e-10).unwrap();
        assert_eq!(g.jacobi_length, 0.0);
        assert!(matches!(
            local_geodesic(&(c * 0.5), &x, &nb, &cfg, 1e-10),
            Err(Error::NeighborhoodExit { .. })
        ));
    }

    #[test]
    fn local_geodesic_matches_fine_discrete_minimizer() {
        let cfg = two(0.05);
        let c = on_circle(cfg.radius, 0.7);
        let nb = ConvexNeighborhood::new(c, 0.04);
        let p = c + Vec2::new(-0.01, 0.012);
        let q = c + Vec2::new(-0.025, -0.02);
        let g = local_geodesic(&p, &q, &nb, &cfg, 1e-10).unwrap();
        let arc = g.arc.as_ref().unwrap();
        assert!(arc.max_energy_residual <= 1e-8);
        assert!((arc.end().position - q).norm() < 1e-11);
        let n = 2049;
        let line: Vec<Vec2> = (0..n).map(|k| p + (q - p) * (k as f64 / (n - 1) as f64)).collect();
        let settings = GeodesicSettings {
            grad_tol: 1e-11,
            ..GeodesicSettings::default()
        };
        let (_, l) = relax_polyline(line, &cfg, &settings).unwrap();
        assert!((l - g.jacobi_length).abs() <= 1e-8, "{l} vs {}", g.jacobi_length);
    }

    #[test]
    fn local_geodesic_endpoint_derivative() {
        let cfg = two(0.05);
        let c = on_circle(cfg.radius, 2.0);
        let nb = ConvexNeighborhood::new(c, 0.04);
        let p = c * 0.97;
        let q = c * 0.93 + perp(&c) * 0.05;
        let g = local_geodesic(&p, &q, &nb, &cfg, 1e-10).unwrap();
        for dir in [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(0.6, -0.8)] {
            let h = 1e-4;
            let lp = local_geodesic(&p, &(q + dir * h), &nb, &cfg, 1e-10).unwrap().jacobi_length;
            let lm = local_geodesic(&p, &(q - dir * h), &nb, &cfg, 1e-10).unwrap().jacobi_length;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = g.arrival_velocity().dot(&dir) / 2f64.sqrt();
            assert!((fd - analytic).abs() <= 1e-3 * analytic.abs().max(1e-2), "{fd} vs {analytic}");
            assert!((lp - g.jacobi_length).abs() < 1e-3);
        }
    }

    #[test]
    fn neighbourhood_is_established() {
        let cfg = two(0.05);
        let nb = ConvexNeighborhood::establish(on_circle(cfg.radius, 0.9), &cfg, 1e-10).unwrap();
        assert!(nb.radius <= 0.1 * cfg.radius && nb.radius > 0.0);
    }

    #[test]
    fn truncation_conditions_and_consistency() {
        let cfg = two(0.05);
        let sol = solve(&cfg, 0.9, 2.5, &[0]);
        let start = sol.arc.start().position;
        let nb = ConvexNeighborhood::new(start, 0.1 * cfg.radius);
        let tp = truncation_point(&sol.arc, &nb, &cfg).unwrap();
        assert!(tp.point.norm() < cfg.radius);
        assert!(nb.contains(&tp.point));
        assert!((sol.arc.length_at(&cfg, tp.t_star) - 0.5 * nb.radius).abs() < 1e-10);
        let local = local_geodesic(&start, &tp.point, &nb, &cfg, 1e-10).unwrap();
        assert!(restriction_mismatch(&sol.arc, &local, &cfg) <= 1e-5);
        assert!((local.jacobi_length - 0.5 * nb.radius).abs() < 1e-8);

        let reversed = sol.arc.reversed();
        let nb_end = ConvexNeighborhood::new(reversed.start().position, 0.1 * cfg.radius);
        assert!(truncation_point(&reversed, &nb_end, &cfg).is_ok());
    }

    #[test]
    fn truncation_rejects_short_or_misplaced_arcs() {
        let cfg = two(0.05);
        let sol = solve(&cfg, 0.9, 2.5, &[0]);
        let far = ConvexNeighborhood::new(on_circle(cfg.radius, 3.5), 0.04);
        assert!(matches!(truncation_point(&sol.arc, &far, &cfg), Err(Error::ConditionViolation(_))));
        let huge = ConvexNeighborhood::new(sol.arc.start().position, 10.0);
        assert!(matches!(truncation_point(&sol.arc, &huge, &cfg), Err(Error::ConditionViolation(_))));
    }

    #[test]
    fn sweep_profile_and_crossover() {
        let cfg = PotentialConfig::default();
        let parts = Partition::all_two_block(2);
        let report = inner_angular_sweep(&[0.1, 0.025], 4, &parts, &cfg, &InnerSettings::default(), Execution::Sequential);
        assert!(report.is_non_increasing(0.05));
        assert!(report.rows.iter().all(|r| r.evaluated > 0 && r.min_half_radius_time > 0.0));
        let big = report.rows[0].max_abs_theta_dot;
        assert_eq!(report.epsilon5(big * 1.01), Some(0.1));
        assert_eq!(report.epsilon5(0.0), None);
    }
}
