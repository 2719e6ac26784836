//! Dense vector helpers and Euclidean ball geometry.

use serde::{Deserialize, Serialize};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(alpha: f64, a: &mut [f64]) {
    for v in a {
        *v *= alpha;
    }
}

/// `(1 - t) a + t b`
pub fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `v / temperature`.
pub fn softmax(v: &[f64], temperature: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = v.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let s: f64 = p.iter().sum();
    scale(1.0 / s, &mut p);
    p
}

/// Closed Euclidean ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

const SLACK: f64 = 1e-9;

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Membership with a small relative slack for rounding.
    pub fn contains(&self, x: &[f64]) -> bool {
        dist(x, &self.center) <= self.radius * (1.0 + SLACK) + 1e-14
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = dist(x, &self.center);
        if d <= self.radius {
            return x.to_vec();
        }
        let t = self.radius / d;
        self.center
            .iter()
            .zip(x)
            .map(|(c, xi)| c + t * (xi - c))
            .collect()
    }

    pub fn project_in_place(&self, x: &mut [f64]) {
        let d = dist(x, &self.center);
        if d > self.radius {
            let t = self.radius / d;
            for (xi, c) in x.iter_mut().zip(&self.center) {
                *xi = c + t * (*xi - c);
            }
        }
    }
}

/// Euclidean projection onto the intersection of two balls, assumed nonempty.
pub fn project_two_balls(p: &[f64], a: &Ball, b: &Ball) -> Vec<f64> {
    if a.contains(p) && b.contains(p) {
        return p.to_vec();
    }
    let pa = a.project(p);
    if b.contains(&pa) {
        return pa;
    }
    let pb = b.project(p);
    if a.contains(&pb) {
        return pb;
    }
    // Both constraints are active: the answer lies on the intersection of the two spheres.
    let u = sub(&b.center, &a.center);
    let d = norm(&u);
    if d == 0.0 {
        return if a.radius <= b.radius { pa } else { pb };
    }
    let e: Vec<f64> = u.iter().map(|v| v / d).collect();
    let h = (d * d + a.radius * a.radius - b.radius * b.radius) / (2.0 * d);
    let rho_sq = a.radius * a.radius - h * h;
    let c0: Vec<f64> = a.center.iter().zip(&e).map(|(c, ei)| c + h * ei).collect();
    if rho_sq <= 0.0 {
        return c0;
    }
    let rho = rho_sq.sqrt();
    let mut w = sub(p, &c0);
    let along = dot(&w, &e);
    axpy(-along, &e, &mut w);
    let wn = norm(&w);
    if wn <= 1e-300 {
        // Any point of the circle is optimal; pick one orthogonal to the axis.
        let k = e
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
            .map(|(k, _)| k)
            .unwrap_or(0);
        w = vec![0.0; e.len()];
        w[k] = 1.0;
        let along = e[k];
        axpy(-along, &e, &mut w);
        let wn = norm(&w);
        if wn == 0.0 {
            return c0;
        }
        return c0.iter().zip(&w).map(|(c, wi)| c + rho * wi / wn).collect();
    }
    c0.iter().zip(&w).map(|(c, wi)| c + rho * wi / wn).collect()
}
