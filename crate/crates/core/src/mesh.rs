//! Tensor-product spatial meshes and grid-valued fields with trilinear interpolation.

use serde::{Deserialize, Serialize};

use crate::characteristics::FieldEval;
use crate::error::{Error, Result};
use crate::Vec3;

/// Node layout along one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AxisSpec {
    /// `n` equally spaced nodes on `[lo, hi]`.
    Uniform { lo: f64, hi: f64, n: usize },
    /// `n` nodes on `[0, hi]` with geometric spacing starting at `first`.
    Stretched { hi: f64, n: usize, first: f64 },
}

/// Monotone node coordinates along one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub nodes: Vec<f64>,
}

impl Axis {
    pub fn from_spec(spec: &AxisSpec) -> Result<Self> {
        match *spec {
            AxisSpec::Uniform { lo, hi, n } => Self::uniform(lo, hi, n),
            AxisSpec::Stretched { hi, n, first } => Self::stretched(hi, n, first),
        }
    }

    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(Error::ConfigInvalid(format!(
                "uniform axis needs n >= 2 and hi > lo (n={n}, [{lo}, {hi}])"
            )));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        nodes[n - 1] = hi;
        Ok(Axis { nodes })
    }

    pub fn stretched(hi: f64, n: usize, first: f64) -> Result<Self> {
        if n < 2 || !(hi > 0.0) || !(first > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "stretched axis needs n >= 2, hi > 0, first > 0 (n={n})"
            )));
        }
        let cells = (n - 1) as f64;
        if first * cells >= hi {
            return Self::uniform(0.0, hi, n);
        }
        // Ratio q > 1 with first (q^cells - 1)/(q - 1) = hi.
        let total = |q: f64| first * (q.powf(cells) - 1.0) / (q - 1.0);
        let (mut lo_q, mut hi_q) = (1.0 + 1e-12, 2.0);
        while total(hi_q) < hi {
            hi_q *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo_q + hi_q);
            if total(mid) < hi {
                lo_q = mid;
            } else {
                hi_q = mid;
            }
        }
        let q = 0.5 * (lo_q + hi_q);
        let mut nodes = Vec::with_capacity(n);
        let mut x = 0.0;
        let mut h = first;
        for _ in 0..n {
            nodes.push(x);
            x += h;
            h *= q;
        }
        nodes[n - 1] = hi;
        Ok(Axis { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.len() - 1]
    }

    /// Cell index and local coordinate in `[0, 1]`, or `None` outside the axis.
    #[inline]
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let n = self.nodes.len();
        if !(x >= self.nodes[0] && x <= self.nodes[n - 1]) {
            return None;
        }
        let i = self
            .nodes
            .partition_point(|a| *a <= x)
            .saturating_sub(1)
            .min(n - 2);
        let (a, b) = (self.nodes[i], self.nodes[i + 1]);
        Some((i, (x - a) / (b - a)))
    }

    /// Trapezoid weights for integrating over the axis.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let n = self.len();
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let h = self.nodes[i + 1] - self.nodes[i];
            w[i] += 0.5 * h;
            w[i + 1] += 0.5 * h;
        }
        w
    }
}

/// Tensor mesh on `[x-axis] x [y-axis] x [z-axis]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh3 {
    pub ax: [Axis; 3],
}

impl Mesh3 {
    pub fn new(ax: Axis, ay: Axis, az: Axis) -> Self {
        Mesh3 { ax: [ax, ay, az] }
    }

    /// Square box `[-half, half]^2 x [0, height]` with a stretched vertical axis.
    pub fn slab(half: f64, n_par: usize, height: f64, n_z: usize, first_z: f64) -> Result<Self> {
        Ok(Mesh3::new(
            Axis::uniform(-half, half, n_par)?,
            Axis::uniform(-half, half, n_par)?,
            Axis::stretched(height, n_z, first_z)?,
        ))
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.ax[0].len(), self.ax[1].len(), self.ax[2].len()]
    }

    pub fn n_nodes(&self) -> usize {
        let d = self.dims();
        d[0] * d[1] * d[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let d = self.dims();
        (i * d[1] + j) * d[2] + k
    }

    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let d = self.dims();
        [idx / (d[1] * d[2]), (idx / d[2]) % d[1], idx % d[2]]
    }

    pub fn node(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.unindex(idx);
        Vec3::new(
            self.ax[0].nodes[i],
            self.ax[1].nodes[j],
            self.ax[2].nodes[k],
        )
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.ax[a].lo() && x[a] <= self.ax[a].hi())
    }

    /// Trilinear stencil: eight `(node index, weight)` pairs, or `None` outside.
    #[inline]
    pub fn stencil(&self, x: &Vec3) -> Option<[(usize, f64); 8]> {
        let (i, fx) = self.ax[0].locate(x[0])?;
        let (j, fy) = self.ax[1].locate(x[1])?;
        let (k, fz) = self.ax[2].locate(x[2])?;
        let d = self.dims();
        let base = (i * d[1] + j) * d[2] + k;
        let (sy, sx) = (d[2], d[1] * d[2]);
        let w = |a: usize, b: usize, c: usize| {
            (if a == 0 { 1.0 - fx } else { fx })
                * (if b == 0 { 1.0 - fy } else { fy })
                * (if c == 0 { 1.0 - fz } else { fz })
        };
        Some([
            (base, w(0, 0, 0)),
            (base + 1, w(0, 0, 1)),
            (base + sy, w(0, 1, 0)),
            (base + sy + 1, w(0, 1, 1)),
            (base + sx, w(1, 0, 0)),
            (base + sx + 1, w(1, 0, 1)),
            (base + sx + sy, w(1, 1, 0)),
            (base + sx + sy + 1, w(1, 1, 1)),
        ])
    }

    /// Cell-volume (trapezoid) weights of every node.
    pub fn volume_weights(&self) -> Vec<f64> {
        let w: Vec<Vec<f64>> = self.ax.iter().map(|a| a.trapezoid_weights()).collect();
        (0..self.n_nodes())
            .map(|idx| {
                let [i, j, k] = self.unindex(idx);
                w[0][i] * w[1][j] * w[2][k]
            })
            .collect()
    }
}

/// `N` scalar values per mesh node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<const N: usize> {
    pub mesh: Mesh3,
    #[serde(with = "serde_arrays")]
    pub values: Vec<[f64; N]>,
}

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(
        v: &[[f64; N]],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|a| a.to_vec())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        d: D,
    ) -> Result<Vec<[f64; N]>, D::Error> {
        let raw: Vec<Vec<f64>> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|r| {
                r.try_into()
                    .map_err(|_| serde::de::Error::custom("wrong component count"))
            })
            .collect()
    }
}

impl<const N: usize> Grid<N> {
    pub fn zeros(mesh: Mesh3) -> Self {
        let n = mesh.n_nodes();
        Grid {
            mesh,
            values: vec![[0.0; N]; n],
        }
    }

    /// Trilinear interpolation; zero outside the mesh.
    #[inline]
    pub fn interp(&self, x: &Vec3) -> [f64; N] {
        let mut out = [0.0; N];
        if let Some(st) = self.mesh.stencil(x) {
            for (idx, w) in st {
                if w != 0.0 {
                    let v = &self.values[idx];
                    for c in 0..N {
                        out[c] += w * v[c];
                    }
                }
            }
        }
        out
    }

    /// Largest Euclidean norm over component groups `[a, b)` at any node.
    pub fn sup_norm(&self, a: usize, b: usize) -> f64 {
        self.values
            .iter()
            .map(|v| v[a..b].iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|c| *c == 0.0))
    }

    /// Flattened component-major copy, for snapshots.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn from_flat(mesh: Mesh3, flat: &[f64]) -> Result<Self> {
        if flat.len() != mesh.n_nodes() * N {
            return Err(Error::IoFailure(format!(
                "grid length {} does not match mesh {}x{N}",
                flat.len(),
                mesh.n_nodes()
            )));
        }
        let values = flat
            .chunks_exact(N)
            .map(|c| c.try_into().expect("chunk length"))
            .collect();
        Ok(Grid { mesh, values })
    }
}

/// Electric and magnetic fields stored on a mesh, `[E1, E2, E3, B1, B2, B3]` per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub grid: Grid<6>,
}

impl FieldGrid {
    pub fn zeros(mesh: Mesh3) -> Self {
        FieldGrid {
            grid: Grid::zeros(mesh),
        }
    }

    #[inline]
    pub fn eb(&self, x: &Vec3) -> (Vec3, Vec3) {
        let v = self.grid.interp(x);
        (Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    pub fn sup_e(&self) -> f64 {
        self.grid.sup_norm(0, 3)
    }

    pub fn sup_b(&self) -> f64 {
        self.grid.sup_norm(3, 6)
    }
}

impl FieldEval for FieldGrid {
    fn eval(&self, _t: f64, x: &Vec3) -> Result<(Vec3, Vec3)> {
        Ok(self.eb(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stretched_axis_endpoints() {
        let a = Axis::stretched(1.5, 12, 1e-3).unwrap();
        assert_eq!(a.nodes[0], 0.0);
        assert_eq!(a.hi(), 1.5);
        assert_relative_eq!(a.nodes[1], 1e-3, max_relative = 1e-9);
        assert!(a.nodes.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn trilinear_reproduces_linear_functions() {
        let mesh = Mesh3::slab(2.0, 5, 1.0, 6, 0.05).unwrap();
        let mut g: Grid<1> = Grid::zeros(mesh.clone());
        for idx in 0..mesh.n_nodes() {
            let x = mesh.node(idx);
            g.values[idx] = [1.0 + 2.0 * x[0] - x[1] + 3.0 * x[2]];
        }
        let p = Vec3::new(0.3, -1.1, 0.77);
        assert_relative_eq!(
            g.interp(&p)[0],
            1.0 + 0.6 + 1.1 + 2.31,
            max_relative = 1e-13
        );
        assert_eq!(g.interp(&Vec3::new(0.0, 0.0, 2.0))[0], 0.0);
    }

    #[test]
    fn volume_weights_sum_to_box() {
        let mesh = Mesh3::slab(1.0, 4, 0.5, 5, 0.01).unwrap();
        let vol: f64 = mesh.volume_weights().iter().sum();
        assert_relative_eq!(vol, 2.0, max_relative = 1e-12);
    }
}
