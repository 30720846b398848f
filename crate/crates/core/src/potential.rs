//! The N-centre potential `V(x) = sum_i m_i / |x - eps c_i|` at fixed energy -1,
//! together with the Jacobi weight `sqrt(V - 1)` and the polar quantities used
//! by the angular-momentum estimates.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Total energy of every arc.
pub const ENERGY: f64 = -1.0;

/// Outer radius of the region that must lie strictly inside the Hill region.
pub const OUTER_EXTENT: f64 = 0.95;

const MASS_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centre {
    /// Position before scaling by epsilon; lies in the closed unit disc.
    pub base_position: [f64; 2],
    pub mass: f64,
}

impl Centre {
    pub fn new(x: f64, y: f64, mass: f64) -> Self {
        Self {
            base_position: [x, y],
            mass,
        }
    }

    pub fn base(&self) -> Vec2 {
        Vec2::new(self.base_position[0], self.base_position[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialConfig {
    pub centres: Vec<Centre>,
    pub epsilon: f64,
    /// Radius `R` of the gluing circle.
    pub radius: f64,
    /// Chord bound between the two ends of an outer arc.
    pub delta: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self {
            centres: vec![Centre::new(1.0, 0.0, 0.5), Centre::new(-1.0, 0.0, 0.5)],
            epsilon: 0.05,
            radius: 0.4,
            delta: 0.6,
        }
    }
}

impl PotentialConfig {
    pub fn new(centres: Vec<Centre>, epsilon: f64, radius: f64, delta: f64) -> Self {
        Self {
            centres,
            epsilon,
            radius,
            delta,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    /// Every violated invariant, in a fixed order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.centres.is_empty() {
            out.push("at least one centre is required".to_string());
        }
        for (i, c) in self.centres.iter().enumerate() {
            if !(c.mass > 0.0) {
                out.push(format!("centre {i}: mass must be positive"));
            }
            if c.base().norm() > 1.0 + 1e-12 {
                out.push(format!("centre {i}: base position must lie in the unit disc"));
            }
        }
        let total: f64 = self.centres.iter().map(|c| c.mass).sum();
        if !self.centres.is_empty() && (total - 1.0).abs() > MASS_SUM_TOL {
            out.push(format!("masses must sum to 1 (got {total})"));
        }
        if !(self.epsilon >= 0.0) {
            out.push("epsilon must be non-negative".to_string());
        }
        if !(self.radius > 0.0) {
            out.push("R must be positive".to_string());
        }
        if !(self.delta > 0.0 && self.delta < 2.0 * self.radius) {
            out.push("delta must satisfy 0 < delta < 2R".to_string());
        }
        if self.radius > 0.0 && !(self.epsilon < 0.5 * self.radius) {
            out.push("epsilon must be smaller than R/2".to_string());
        }
        if out.is_empty() {
            // V is harmonic outside the centres, so its minimum over the disc sits on the rim.
            let min_v = (0..720)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::TAU / 720.0;
                    self.potential_unchecked(&(OUTER_EXTENT * Vec2::new(a.cos(), a.sin())))
                })
                .fold(f64::INFINITY, f64::min);
            if !(min_v > 1.0) {
                out.push(format!(
                    "disc of radius {OUTER_EXTENT} leaves the Hill region (min V = {min_v:.6})"
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }

    /// Effective position `eps * c_i`.
    pub fn centre_position(&self, index: usize) -> Vec2 {
        self.epsilon * self.centres[index].base()
    }

    pub fn centre_positions(&self) -> Vec<Vec2> {
        (0..self.centres.len()).map(|i| self.centre_position(i)).collect()
    }

    /// Arcs closer than this to a centre are rejected.
    pub fn collision_radius(&self) -> f64 {
        (self.epsilon / 10.0).max(1e-6)
    }

    /// Index and distance of the nearest centre.
    pub fn nearest_centre(&self, x: &Vec2) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.centres.len() {
            let d = (x - self.centre_position(i)).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn check_regular(&self, x: &Vec2) -> Result<()> {
        for i in 0..self.centres.len() {
            if (x - self.centre_position(i)).norm_squared() == 0.0 {
                return Err(Error::Singularity { index: i });
            }
        }
        Ok(())
    }

    pub(crate) fn potential_unchecked(&self, x: &Vec2) -> f64 {
        self.centres
            .iter()
            .map(|c| c.mass / (x - self.epsilon * c.base()).norm())
            .sum()
    }

    pub(crate) fn gradient_unchecked(&self, x: &Vec2) -> Vec2 {
        let mut g = Vec2::zeros();
        for c in &self.centres {
            let d = self.epsilon * c.base() - x;
            let r = d.norm();
            g += d * (c.mass / (r * r * r));
        }
        g
    }

    /// `V_eps(x)`.
    pub fn potential(&self, x: &Vec2) -> Result<f64> {
        self.check_regular(x)?;
        Ok(self.potential_unchecked(x))
    }

    /// `grad V_eps(x)`, the acceleration of the equation of motion.
    pub fn gradient(&self, x: &Vec2) -> Result<Vec2> {
        self.check_regular(x)?;
        Ok(self.gradient_unchecked(x))
    }

    /// Hessian of `V_eps`.
    pub fn hessian(&self, x: &Vec2) -> Result<Matrix2<f64>> {
        self.check_regular(x)?;
        let mut h = Matrix2::zeros();
        for c in &self.centres {
            let d = x - self.epsilon * c.base();
            let r2 = d.norm_squared();
            let r = r2.sqrt();
            let r3 = r2 * r;
            let r5 = r3 * r2;
            h += (3.0 * d * d.transpose() / r5 - Matrix2::identity() / r3) * c.mass;
        }
        Ok(h)
    }

    /// Jacobi weight `sqrt(V - 1)`.
    pub fn jacobi_weight(&self, x: &Vec2) -> Result<f64> {
        let excess = self.potential(x)? + ENERGY;
        if excess > 0.0 {
            Ok(excess.sqrt())
        } else {
            Err(Error::HillBoundary { excess })
        }
    }

    /// Weight, its gradient and Hessian in one pass.
    pub fn jacobi_weight_derivatives(&self, x: &Vec2) -> Result<(f64, Vec2, Matrix2<f64>)> {
        let w = self.jacobi_weight(x)?;
        let gv = self.gradient_unchecked(x);
        let hv = self.hessian(x)?;
        let gw = gv / (2.0 * w);
        let hw = hv / (2.0 * w) - gv * gv.transpose() / (4.0 * w * w * w);
        Ok((w, gw, hw))
    }

    /// Speed on the energy shell, `sqrt(2 (V - 1))`.
    pub fn speed_from_energy(&self, x: &Vec2) -> Result<f64> {
        Ok(std::f64::consts::SQRT_2 * self.jacobi_weight(x)?)
    }

    /// `|v|^2 / 2 - V(x) + 1`; zero on the energy shell.
    pub fn energy_residual(&self, x: &Vec2, v: &Vec2) -> f64 {
        0.5 * v.norm_squared() - self.potential_unchecked(x) - ENERGY
    }
}

/// `theta_dot = (x1 v2 - x2 v1) / |x|^2`.
pub fn angular_speed(x: &Vec2, v: &Vec2) -> Result<f64> {
    let r2 = x.norm_squared();
    if r2 == 0.0 {
        return Err(Error::Origin);
    }
    Ok((x.x * v.y - x.y * v.x) / r2)
}

/// Counter-clockwise unit tangent to the circle at angle `theta`.
pub fn tangent(theta: f64) -> Vec2 {
    Vec2::new(-theta.sin(), theta.cos())
}

pub fn on_circle(radius: f64, theta: f64) -> Vec2 {
    radius * Vec2::new(theta.cos(), theta.sin())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarState {
    pub r: f64,
    pub theta: f64,
    pub r_dot: f64,
    pub theta_dot: f64,
}

impl PolarState {
    pub fn from_cartesian(x: &Vec2, v: &Vec2) -> Result<Self> {
        let r = x.norm();
        if r == 0.0 {
            return Err(Error::Origin);
        }
        Ok(Self {
            r,
            theta: x.y.atan2(x.x),
            r_dot: x.dot(v) / r,
            theta_dot: angular_speed(x, v)?,
        })
    }

    /// `x = r e^{i theta}`, `v = (r_dot + i r theta_dot) e^{i theta}`.
    pub fn to_cartesian(&self) -> (Vec2, Vec2) {
        let e = Vec2::new(self.theta.cos(), self.theta.sin());
        let t = tangent(self.theta);
        (self.r * e, self.r_dot * e + self.r * self.theta_dot * t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single() -> PotentialConfig {
        PotentialConfig::new(vec![Centre::new(0.0, 0.0, 1.0)], 0.05, 0.4, 0.08)
    }

    fn pair(eps: f64) -> PotentialConfig {
        PotentialConfig::new(
            vec![Centre::new(1.0, 0.0, 0.5), Centre::new(-1.0, 0.0, 0.5)],
            eps,
            0.4,
            0.08,
        )
    }

    fn random_point(rng: &mut ChaCha8Rng, cfg: &PotentialConfig) -> Vec2 {
        loop {
            let x = Vec2::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
            if x.norm() < 0.9 && cfg.nearest_centre(&x).1 > 1e-3 {
                return x;
            }
        }
    }

    #[test]
    fn closed_form_values() {
        assert_relative_eq!(single().potential(&Vec2::new(0.5, 0.0)).unwrap(), 2.0);
        let v = pair(0.1).potential(&Vec2::new(0.0, 0.4)).unwrap();
        assert_relative_eq!(v, 1.0 / 0.17f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(v, 2.42536, epsilon = 1e-5);
        let collapsed = PotentialConfig::new(
            vec![
                Centre::new(0.3, -0.7, 0.2),
                Centre::new(-1.0, 0.0, 0.5),
                Centre::new(0.0, 1.0, 0.3),
            ],
            0.0,
            0.4,
            0.08,
        );
        assert_relative_eq!(collapsed.potential(&Vec2::new(0.25, 0.0)).unwrap(), 4.0, epsilon = 1e-14);
    }

    #[test]
    fn singular_points_are_reported() {
        let cfg = pair(0.1);
        assert_eq!(
            cfg.potential(&Vec2::new(-0.1, 0.0)),
            Err(Error::Singularity { index: 1 })
        );
        assert!(matches!(cfg.gradient(&Vec2::new(0.1, 0.0)), Err(Error::Singularity { index: 0 })));
    }

    #[test]
    fn gradient_of_single_centre() {
        let g = single().with_epsilon(0.0).gradient(&Vec2::new(1.0, 0.0)).unwrap();
        assert_relative_eq!(g.x, -1.0, epsilon = 1e-15);
        assert_eq!(g.y, 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = PotentialConfig::new(
            vec![
                Centre::new(1.0, 0.0, 0.2),
                Centre::new(-0.5, 0.8, 0.3),
                Centre::new(-0.3, -0.9, 0.5),
            ],
            0.1,
            0.4,
            0.08,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..100 {
            let x = random_point(&mut rng, &cfg);
            let g = cfg.gradient(&x).unwrap();
            let fd = Vec2::new(
                (cfg.potential(&(x + Vec2::x() * h)).unwrap() - cfg.potential(&(x - Vec2::x() * h)).unwrap()) / (2.0 * h),
                (cfg.potential(&(x + Vec2::y() * h)).unwrap() - cfg.potential(&(x - Vec2::y() * h)).unwrap()) / (2.0 * h),
            );
            assert!((g - fd).norm() <= 1e-5 * g.norm().max(1.0), "{x}: {g} vs {fd}");
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let cfg = pair(0.1);
        let x = Vec2::new(0.13, -0.21);
        let h = 1e-6;
        let hv = cfg.hessian(&x).unwrap();
        for k in 0..2 {
            let e = if k == 0 { Vec2::x() } else { Vec2::y() };
            let col = (cfg.gradient(&(x + e * h)).unwrap() - cfg.gradient(&(x - e * h)).unwrap()) / (2.0 * h);
            assert!((hv.column(k) - col).norm() < 1e-5 * col.norm());
        }
    }

    #[test]
    fn gradient_symmetric_on_bisector() {
        let cfg = pair(0.1);
        let g = cfg.gradient(&Vec2::new(0.0, 0.27)).unwrap();
        assert!(g.x.abs() < 1e-15);
        assert!(g.y < 0.0);
    }

    #[test]
    fn weight_and_speed() {
        let cfg = single().with_epsilon(0.0);
        assert_relative_eq!(cfg.jacobi_weight(&Vec2::new(0.5, 0.0)).unwrap(), 1.0);
        assert_relative_eq!(cfg.speed_from_energy(&Vec2::new(0.5, 0.0)).unwrap(), 2f64.sqrt());
        // V = 1.5 at r = 2/3
        assert_relative_eq!(cfg.speed_from_energy(&Vec2::new(0.0, 2.0 / 3.0)).unwrap(), 1.0, epsilon = 1e-14);
        assert!(matches!(cfg.jacobi_weight(&Vec2::new(1.0, 0.0)), Err(Error::HillBoundary { .. })));
        assert!(matches!(cfg.speed_from_energy(&Vec2::new(0.0, 1.2)), Err(Error::HillBoundary { .. })));
    }

    #[test]
    fn energy_identity_and_weight_speed_ratio() {
        let cfg = pair(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = random_point(&mut rng, &cfg);
            let s = cfg.speed_from_energy(&x).unwrap();
            let v = cfg.potential(&x).unwrap();
            assert!((0.5 * s * s - v + 1.0).abs() <= 1e-12 * v);
            assert_eq!(cfg.jacobi_weight(&x).unwrap() * 2f64.sqrt(), s);
        }
    }

    #[test]
    fn collapse_limit_is_monotone() {
        let base = PotentialConfig::new(
            vec![Centre::new(0.6, 0.2, 0.4), Centre::new(-0.9, 0.1, 0.6)],
            0.0,
            0.4,
            0.08,
        );
        for x in [Vec2::new(0.3, 0.1), Vec2::new(-0.2, 0.25), Vec2::new(0.0, -0.5)] {
            let kepler = 1.0 / x.norm();
            let gaps: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
                .iter()
                .map(|&e| (base.with_epsilon(e).potential(&x).unwrap() - kepler).abs())
                .collect();
            assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        }
    }

    #[test]
    fn angular_speed_cases() {
        let r = 0.4;
        assert_relative_eq!(angular_speed(&Vec2::new(r, 0.0), &Vec2::new(0.0, 1.3)).unwrap(), 1.3 / r);
        assert_eq!(angular_speed(&Vec2::new(r, 0.0), &Vec2::new(1.3, 0.0)).unwrap(), 0.0);
        assert_eq!(angular_speed(&Vec2::zeros(), &Vec2::x()), Err(Error::Origin));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let v = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let rot = nalgebra::Rotation2::new(rng.gen_range(0.0..6.3));
            let a = angular_speed(&x, &v).unwrap();
            let b = angular_speed(&(rot * x), &(rot * v)).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn polar_round_trip() {
        let x = Vec2::new(-0.3, 0.2);
        let v = Vec2::new(0.7, 1.1);
        let p = PolarState::from_cartesian(&x, &v).unwrap();
        let (x2, v2) = p.to_cartesian();
        assert!((x - x2).norm() < 1e-15 && (v - v2).norm() < 1e-15);
    }

    #[test]
    fn validation_collects_everything() {
        let cfg = PotentialConfig::new(
            vec![Centre::new(1.0, 0.0, 0.45), Centre::new(-1.0, 0.0, 0.45)],
            0.3,
            0.4,
            0.9,
        );
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v[0].contains("masses must sum to 1"));
        assert!(PotentialConfig::default().validate().is_ok());
    }
}
