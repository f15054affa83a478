//! Gauss-Legendre rules, sphere product rules and momentum-space quadrature.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::Vec3;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped to `[a, b]`.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        GaussRule { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Iterates `(x, w)` pairs on `[a, b]`.
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(move |(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.on(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

/// Which part of a sphere centred at `x` is integrated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    /// The whole sphere.
    Full,
    /// Points with `y3 > 0`.
    Upper,
    /// Points with `y3 < 0`.
    Lower,
}

/// Product rule on the unit sphere: Gauss-Legendre in `cos(theta)`,
/// trapezoid in `phi`, with the `cos(theta)` range clipped analytically.
#[derive(Clone, Debug)]
pub struct SphereRule {
    pub n_theta: usize,
    pub n_phi: usize,
    gauss: GaussRule,
    cos_phi: Vec<f64>,
    sin_phi: Vec<f64>,
}

impl SphereRule {
    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        assert!(n_theta > 0 && n_phi > 0);
        let (cos_phi, sin_phi) = (0..n_phi)
            .map(|k| {
                let p = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
                (p.cos(), p.sin())
            })
            .unzip();
        SphereRule {
            n_theta,
            n_phi,
            gauss: GaussRule::new(n_theta),
            cos_phi,
            sin_phi,
        }
    }

    /// Range of `cos(theta)` for the given part of the sphere of radius `r`
    /// centred at height `x3`. Returns `None` when the part is empty.
    pub fn cos_range(hemisphere: Hemisphere, x3: f64, r: f64) -> Option<(f64, f64)> {
        if r <= 0.0 {
            return None;
        }
        let cut = (-x3 / r).clamp(-1.0, 1.0);
        let (a, b) = match hemisphere {
            Hemisphere::Full => (-1.0, 1.0),
            Hemisphere::Upper => (cut, 1.0),
            Hemisphere::Lower => (-1.0, cut),
        };
        if b > a {
            Some((a, b))
        } else {
            None
        }
    }

    /// Visits `(omega, weight)` over the directions within `[c_lo, c_hi]` in `cos(theta)`.
    /// Weights integrate to the solid angle of the band.
    pub fn for_each_in_band<F: FnMut(Vec3, f64)>(&self, c_lo: f64, c_hi: f64, mut f: F) {
        let dphi = 2.0 * PI / self.n_phi as f64;
        for (c, wc) in self.gauss.on(c_lo, c_hi) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for k in 0..self.n_phi {
                let om = Vec3::new(s * self.cos_phi[k], s * self.sin_phi[k], c);
                f(om, wc * dphi);
            }
        }
    }

    /// Integral over the chosen part of the unit sphere of `f(omega)` (solid angle measure).
    pub fn integrate_directions<F: FnMut(Vec3) -> f64>(
        &self,
        hemisphere: Hemisphere,
        x3: f64,
        r: f64,
        mut f: F,
    ) -> f64 {
        let Some((a, b)) = Self::cos_range(hemisphere, x3, r) else {
            return 0.0;
        };
        let mut acc = 0.0;
        self.for_each_in_band(a, b, |om, w| acc += w * f(om));
        acc
    }
}

/// Product momentum rule: Gauss-Legendre in `|v|` on `[0, v_max]`,
/// Gauss-Legendre in `cos(theta)`, trapezoid in `phi`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentumQuadrature {
    pub n_radial: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    pub v_max: f64,
    /// The polar rule is applied separately on `cos(theta) < 0` and `> 0`.
    #[serde(default)]
    pub split_polar: bool,
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl MomentumQuadrature {
    pub fn new(n_radial: usize, n_theta: usize, n_phi: usize, v_max: f64) -> Self {
        Self::build(n_radial, n_theta, n_phi, v_max, false)
    }

    /// Same product rule with `n_theta / 2` polar nodes on each hemisphere, so
    /// integrands that jump across `v3 = 0` (wall data) are integrated at full order.
    pub fn new_split(n_radial: usize, n_theta: usize, n_phi: usize, v_max: f64) -> Self {
        Self::build(n_radial, n_theta, n_phi, v_max, true)
    }

    /// Polar nodes and weights in `cos(theta)`, increasing.
    pub fn polar_rule(&self) -> Vec<(f64, f64)> {
        if self.split_polar {
            let half = GaussRule::new((self.n_theta / 2).max(1));
            half.on(-1.0, 0.0).chain(half.on(0.0, 1.0)).collect()
        } else {
            GaussRule::new(self.n_theta).on(-1.0, 1.0).collect()
        }
    }

    fn build(n_radial: usize, n_theta: usize, n_phi: usize, v_max: f64, split_polar: bool) -> Self {
        let mut q = MomentumQuadrature {
            n_radial,
            n_theta,
            n_phi,
            v_max,
            split_polar,
            nodes: Vec::new(),
            weights: Vec::new(),
        };
        let radial = GaussRule::new(n_radial);
        let polar = q.polar_rule();
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity(n_radial * polar.len() * n_phi);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for (r, wr) in radial.on(0.0, v_max) {
            for &(c, wc) in &polar {
                let s = (1.0 - c * c).max(0.0).sqrt();
                for k in 0..n_phi {
                    let p = dphi * (k as f64 + 0.5);
                    nodes.push([r * s * p.cos(), r * s * p.sin(), r * c]);
                    weights.push(wr * r * r * wc * dphi);
                }
            }
        }
        q.nodes = nodes;
        q.weights = weights;
        q
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, k: usize) -> Vec3 {
        Vec3::from(self.nodes[k])
    }

    /// Smallest `v_max` such that `exp(-a (v0 - m))` has decayed by `tail` relative to rest.
    pub fn v_max_for_tail(a: f64, m: f64, tail: f64) -> f64 {
        let de = -tail.ln() / a;
        ((m + de) * (m + de) - m * m).sqrt()
    }
}
