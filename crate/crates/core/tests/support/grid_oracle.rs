//! Shortest paths on a lattice graph of the disk, with edge cost
//! `w(midpoint) * |edge|` and a homotopy constraint tracked by signed crossing
//! counts of one ray per centre.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::f64::consts::TAU;

use ncentre_core::inner_arcs::Partition;
use ncentre_core::potential::{on_circle, PotentialConfig, Vec2};

const MAX_STEP: i32 = 5;

fn gcd(a: i32, b: i32) -> i32 {
    if b == 0 { a.abs() } else { gcd(b, a % b) }
}

fn offsets() -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    for dx in -MAX_STEP..=MAX_STEP {
        for dy in -MAX_STEP..=MAX_STEP {
            if (dx, dy) != (0, 0) && dx * dx + dy * dy <= MAX_STEP * MAX_STEP && gcd(dx, dy) == 1 {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Signed crossing of segment `a -> b` with the ray `c + s d`, `s > 0`
/// (+1 when the segment passes counter-clockwise around `c`).
fn ray_crossing(a: &Vec2, b: &Vec2, c: &Vec2, d: &Vec2) -> i32 {
    let sa = cross(d, &(a - c));
    let sb = cross(d, &(b - c));
    if (sa < 0.0) == (sb < 0.0) {
        return 0;
    }
    let t = sa / (sa - sb);
    let hit = a + (b - a) * t;
    if (hit - c).dot(d) <= 0.0 {
        return 0;
    }
    if sa < 0.0 { 1 } else { -1 }
}

pub struct Oracle<'a> {
    cfg: &'a PotentialConfig,
    spacing: f64,
    half: i32,
    index: Vec<Option<usize>>,
    nodes: Vec<Vec2>,
    rays: Vec<(Vec2, Vec2)>,
    offsets: Vec<(i32, i32)>,
}

impl<'a> Oracle<'a> {
    pub fn new(cfg: &'a PotentialConfig, spacing: f64) -> Self {
        let half = (cfg.radius / spacing).floor() as i32;
        let side = (2 * half + 1) as usize;
        let mut index = vec![None; side * side];
        let mut nodes = Vec::new();
        let limit = cfg.collision_radius().max(spacing);
        for i in -half..=half {
            for j in -half..=half {
                let x = Vec2::new(i as f64 * spacing, j as f64 * spacing);
                if x.norm() <= cfg.radius && cfg.nearest_centre(&x).1 > limit {
                    index[(i + half) as usize * side + (j + half) as usize] = Some(nodes.len());
                    nodes.push(x);
                }
            }
        }
        let rays = cfg
            .centre_positions()
            .into_iter()
            .map(|c| {
                let d = if c.norm() > 0.0 { c.normalize() } else { Vec2::new(1.0, 0.0) };
                (c, d)
            })
            .collect();
        Self { cfg, spacing, half, index, nodes, rays, offsets: offsets() }
    }

    fn node_at(&self, i: i32, j: i32) -> Option<usize> {
        if i.abs() > self.half || j.abs() > self.half {
            return None;
        }
        let side = 2 * self.half + 1;
        self.index[((i + self.half) * side + (j + self.half)) as usize]
    }

    fn nearest_node(&self, x: &Vec2) -> usize {
        let mut best = (f64::INFINITY, 0);
        let (ci, cj) = ((x.x / self.spacing).round() as i32, (x.y / self.spacing).round() as i32);
        for i in ci - 3..=ci + 3 {
            for j in cj - 3..=cj + 3 {
                if let Some(k) = self.node_at(i, j) {
                    let d = (self.nodes[k] - x).norm();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
        }
        best.1
    }

    fn cost(&self, a: &Vec2, b: &Vec2) -> Option<f64> {
        self.cfg.jacobi_weight(&(0.5 * (a + b))).ok().map(|w| w * (b - a).norm())
    }

    fn crossings(&self, a: &Vec2, b: &Vec2, counts: &mut [i32]) {
        for (k, (c, d)) in self.rays.iter().enumerate() {
            counts[k] += ray_crossing(a, b, c, d);
        }
    }

    /// Windings of the ccw boundary arc from `theta_end` to `theta_start`.
    fn closing_counts(&self, theta_start: f64, theta_end: f64) -> Vec<i32> {
        let sweep = (theta_start - theta_end).rem_euclid(TAU);
        let n = ((sweep / 0.01).ceil() as usize).max(1);
        let mut counts = vec![0; self.rays.len()];
        for k in 0..n {
            let a = on_circle(self.cfg.radius * 1.000001, theta_end + sweep * k as f64 / n as f64);
            let b = on_circle(self.cfg.radius * 1.000001, theta_end + sweep * (k + 1) as f64 / n as f64);
            self.crossings(&a, &b, &mut counts);
        }
        counts
    }

    /// Shortest lattice path between two boundary points whose loop windings
    /// realize `partition`.
    pub fn shortest(&self, theta_start: f64, theta_end: f64, partition: &Partition) -> Option<f64> {
        let m = self.rays.len();
        let encode = |counts: &[i32]| -> Option<usize> {
            let mut s = 0usize;
            for &c in counts.iter().rev() {
                if !(-1..=1).contains(&c) {
                    return None;
                }
                s = s * 3 + (c + 1) as usize;
            }
            Some(s)
        };
        let decode = |mut s: usize| -> Vec<i32> {
            (0..m)
                .map(|_| {
                    let c = (s % 3) as i32 - 1;
                    s /= 3;
                    c
                })
                .collect()
        };
        let layers = 3usize.pow(m as u32);
        let p1 = on_circle(self.cfg.radius, theta_start);
        let p2 = on_circle(self.cfg.radius, theta_end);
        let n1 = self.nearest_node(&p1);
        let n2 = self.nearest_node(&p2);
        let closing = self.closing_counts(theta_start, theta_end);

        let w_min = (0..720)
            .map(|k| self.cfg.jacobi_weight(&on_circle(self.cfg.radius, TAU * k as f64 / 720.0)).unwrap())
            .fold(f64::INFINITY, f64::min)
            * 0.999;
        let target = self.nodes[n2];
        let heuristic = |k: usize| w_min * (self.nodes[k] - target).norm();

        let mut dist = vec![f64::INFINITY; self.nodes.len() * layers];
        let mut heap = BinaryHeap::new();
        let mut counts = vec![0; m];
        self.crossings(&p1, &self.nodes[n1], &mut counts);
        let s0 = n1 * layers + encode(&counts)?;
        dist[s0] = self.cost(&p1, &self.nodes[n1])?;
        heap.push(Reverse(((dist[s0] + heuristic(n1)).to_bits(), s0)));
        let mut best = f64::INFINITY;
        while let Some(Reverse((key, state))) = heap.pop() {
            if f64::from_bits(key) >= best {
                break;
            }
            let (node, layer) = (state / layers, state % layers);
            let d = dist[state];
            if f64::from_bits(key) > d + heuristic(node) + 1e-15 {
                continue;
            }
            let x = self.nodes[node];
            if node == n2 {
                let mut c = decode(layer);
                self.crossings(&x, &p2, &mut c);
                let windings: Vec<i32> = c.iter().zip(&closing).map(|(a, b)| a + b).collect();
                let lo = *windings.iter().min().unwrap();
                let hi = *windings.iter().max().unwrap();
                if hi - lo == 1 {
                    let left: Vec<usize> = (0..m).filter(|&i| windings[i] == hi).collect();
                    if partition.realized_by(&left) {
                        if let Some(tail) = self.cost(&x, &p2) {
                            best = best.min(d + tail);
                        }
                    }
                }
            }
            let (i, j) = ((x.x / self.spacing).round() as i32, (x.y / self.spacing).round() as i32);
            for &(dx, dy) in &self.offsets {
                let Some(next) = self.node_at(i + dx, j + dy) else { continue };
                let y = self.nodes[next];
                let Some(c) = self.cost(&x, &y) else { continue };
                let mut cnt = decode(layer);
                self.crossings(&x, &y, &mut cnt);
                let Some(l) = encode(&cnt) else { continue };
                let ns = next * layers + l;
                let nd = d + c;
                if nd < dist[ns] {
                    dist[ns] = nd;
                    heap.push(Reverse(((nd + heuristic(next)).to_bits(), ns)));
                }
            }
        }
        best.is_finite().then_some(best)
    }
}
