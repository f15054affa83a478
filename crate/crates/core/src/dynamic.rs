//! Perturbation dynamics around a steady state: phase-grid evolution along
//! characteristics and retarded half-space field assembly over the backward light cone.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{propagate, Direction, FieldEval, ForceField, SumField, TraceOptions};
use crate::domain::{energy, vhat, ModelParams, Species};
use crate::error::{Error, Result};
use crate::greens::{kirchhoff_hom, reflect, InitialWaveData, Parity};
use crate::kernels::{
    kernel_ae, kernel_b1_magnetic, kernel_b2, kernel_bt, kernel_direction, kernel_et, kernel_k,
    KernelPoint,
};
use crate::mesh::{FieldGrid, Grid, Mesh3};
use crate::quadrature::{GaussRule, MomentumQuadrature, SphereRule};
use crate::steady::{cauchy_weight, MomentumSpec, SampleCloud, SlabSpec, SteadyState};
use crate::{Mat3, Vec3};

/// Compact bump `(1 - |x - c|^2/R^2)^3`, twice continuously differentiable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub center: Vec3,
    pub radius: f64,
}

impl Bump {
    fn q(&self, x: &Vec3) -> (Vec3, f64) {
        let d = x - self.center;
        (d, 1.0 - d.norm_squared() / (self.radius * self.radius))
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let (_, q) = self.q(x);
        if q <= 0.0 {
            0.0
        } else {
            q * q * q
        }
    }

    pub fn grad(&self, x: &Vec3) -> Vec3 {
        let (d, q) = self.q(x);
        if q <= 0.0 {
            return Vec3::zeros();
        }
        -6.0 * q * q * d / (self.radius * self.radius)
    }

    pub fn hessian(&self, x: &Vec3) -> Mat3 {
        let (d, q) = self.q(x);
        if q <= 0.0 {
            return Mat3::zeros();
        }
        let r2 = self.radius * self.radius;
        24.0 * q * d * d.transpose() / (r2 * r2) - 6.0 * q * q / r2 * Mat3::identity()
    }

    /// `max |grad psi| = 96/(25 sqrt 5 R)`, attained at `|x - c| = R/sqrt 5`.
    pub fn grad_sup(&self) -> f64 {
        96.0 / (25.0 * 5f64.sqrt() * self.radius)
    }
}

/// Initial perturbation: compact densities and compact divergence-free fields.
///
/// `f_in = A bump(x) exp(-decay beta (v0 + m g x3))`, `E_in = A_E curl(psi e1)`,
/// `B_in = A_B curl(psi e2)` with `psi` a bump held away from the wall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    pub f_amplitude: [f64; 2],
    pub f_center: [f64; 3],
    pub f_radius: f64,
    /// Energy decay of `f_in` in units of `beta`; at least 1.
    pub f_decay: f64,
    pub e_amplitude: f64,
    pub b_amplitude: f64,
    pub field_center: [f64; 3],
    pub field_radius: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            f_amplitude: [1e-4, 1e-4],
            f_center: [0.0, 0.0, 0.0],
            f_radius: 1.0,
            f_decay: 1.0,
            e_amplitude: 2e-3,
            b_amplitude: 2e-3,
            field_center: [0.0, 0.0, 2.0],
            field_radius: 1.0,
        }
    }
}

impl PerturbationSpec {
    /// The identically vanishing perturbation.
    pub fn zero() -> Self {
        PerturbationSpec {
            f_amplitude: [0.0, 0.0],
            e_amplitude: 0.0,
            b_amplitude: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationInit {
    pub spec: PerturbationSpec,
    pub beta: f64,
    pub g: f64,
    pub masses: [f64; 2],
    pub f_bump: Bump,
    pub field_bump: Bump,
}

impl PerturbationInit {
    pub fn new(spec: PerturbationSpec, params: &ModelParams) -> Result<Self> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(spec.f_radius > 0.0) || !(spec.field_radius > 0.0) {
            return bad("perturbation radii must be positive".into());
        }
        if spec
            .f_amplitude
            .iter()
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return bad("density amplitudes must be finite and non-negative".into());
        }
        if !spec.e_amplitude.is_finite() || !spec.b_amplitude.is_finite() {
            return bad("field amplitudes must be finite".into());
        }
        if !(spec.f_decay >= 1.0) {
            return bad(format!("f_decay must be at least 1, got {}", spec.f_decay));
        }
        if spec.field_center[2] - spec.field_radius <= 0.0
            && (spec.e_amplitude != 0.0 || spec.b_amplitude != 0.0)
        {
            return bad("initial fields must be supported away from the wall".into());
        }
        // Divergence-free compact fields are only compatible with a vanishing
        // initial charge density, which needs identical species data.
        let [ap, am] = spec.f_amplitude;
        if (ap != am || params.m_plus != params.m_minus) && (ap != 0.0 || am != 0.0) {
            return bad("initial charge density must vanish: equal species amplitudes and masses are required".into());
        }
        Ok(PerturbationInit {
            beta: params.beta,
            g: params.g,
            masses: [params.m_plus, params.m_minus],
            f_bump: Bump {
                center: Vec3::from(spec.f_center),
                radius: spec.f_radius,
            },
            field_bump: Bump {
                center: Vec3::from(spec.field_center),
                radius: spec.field_radius,
            },
            spec,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.spec.f_amplitude == [0.0, 0.0]
            && self.spec.e_amplitude == 0.0
            && self.spec.b_amplitude == 0.0
    }

    pub fn f_in(&self, s: Species, x: &Vec3, v: &Vec3) -> f64 {
        let a = self.spec.f_amplitude[s.index()];
        if a == 0.0 || x[2] < 0.0 {
            return 0.0;
        }
        let m = self.masses[s.index()];
        a * self.f_bump.value(x)
            * (-self.spec.f_decay * self.beta * (energy(m, v) + m * self.g * x[2])).exp()
    }

    pub fn e_in(&self, x: &Vec3) -> Vec3 {
        let p = self.field_bump.grad(x);
        self.spec.e_amplitude * Vec3::new(0.0, p[2], -p[1])
    }

    pub fn b_in(&self, x: &Vec3) -> Vec3 {
        let p = self.field_bump.grad(x);
        self.spec.b_amplitude * Vec3::new(-p[2], 0.0, p[0])
    }

    /// Rows are the gradients of the components of `E_in`.
    pub fn grad_e_in(&self, x: &Vec3) -> Mat3 {
        let h = self.field_bump.hessian(x);
        let a = self.spec.e_amplitude;
        let mut out = Mat3::zeros();
        out.set_row(1, &(a * h.row(2)));
        out.set_row(2, &(-a * h.row(1)));
        out
    }

    pub fn grad_b_in(&self, x: &Vec3) -> Mat3 {
        let h = self.field_bump.hessian(x);
        let a = self.spec.b_amplitude;
        let mut out = Mat3::zeros();
        out.set_row(0, &(-a * h.row(2)));
        out.set_row(2, &(a * h.row(0)));
        out
    }

    /// `curl(A grad psi x a) = A (H a - a tr H)`.
    fn curl(&self, x: &Vec3, a: f64, axis: usize) -> Vec3 {
        let h = self.field_bump.hessian(x);
        let mut e = Vec3::zeros();
        e[axis] = 1.0;
        a * (h * e - e * h.trace())
    }

    /// Initial time derivative of the electric field, `curl B_in - 4 pi J(0)`;
    /// the initial current vanishes for the admissible (neutral) data.
    pub fn e_dot(&self, x: &Vec3) -> Vec3 {
        self.curl(x, self.spec.b_amplitude, 1)
    }

    /// Initial time derivative of the magnetic field, `-curl E_in`.
    pub fn b_dot(&self, x: &Vec3) -> Vec3 {
        -self.curl(x, self.spec.e_amplitude, 0)
    }

    /// Kirchhoff data of field component `c` (`0..3` electric, `3..6` magnetic).
    pub fn wave_data(self: &Arc<Self>, c: usize) -> InitialWaveData {
        let r0 = self.field_bump.center.norm() + self.field_bump.radius;
        let (a, b, g) = (self.clone(), self.clone(), self.clone());
        let i = c % 3;
        if c < 3 {
            InitialWaveData {
                u0: Arc::new(move |y| a.e_in(y)[i]),
                u1: Arc::new(move |y| b.e_dot(y)[i]),
                grad_u0: Arc::new(move |y| g.grad_e_in(y).row(i).transpose()),
                r0,
            }
        } else {
            InitialWaveData {
                u0: Arc::new(move |y| a.b_in(y)[i]),
                u1: Arc::new(move |y| b.b_dot(y)[i]),
                grad_u0: Arc::new(move |y| g.grad_b_in(y).row(i).transpose()),
                r0,
            }
        }
    }

    /// Certified `sup exp(beta (v0 + m g x3) + beta |x_par|/2) f_in`.
    pub fn weighted_norm_cert(&self) -> f64 {
        let rho = (self.f_bump.center[0].powi(2) + self.f_bump.center[1].powi(2)).sqrt()
            + self.f_bump.radius;
        Species::BOTH
            .iter()
            .map(|s| {
                let m = self.masses[s.index()];
                self.spec.f_amplitude[s.index()]
                    * ((1.0 - self.spec.f_decay) * self.beta * m + self.beta * rho / 2.0).exp()
            })
            .fold(0.0, f64::max)
    }

    /// Certified `sup |E_in|, |B_in|`.
    pub fn field_sup_cert(&self) -> f64 {
        self.spec.e_amplitude.abs().max(self.spec.b_amplitude.abs()) * self.field_bump.grad_sup()
    }
}

/// Phase grid: spatial mesh times momentum quadrature nodes, one value per pair.
#[derive(Clone, Debug)]
pub struct PhaseGrid {
    pub mesh: Mesh3,
    pub quad: MomentumQuadrature,
    /// Rate of the exponential profile assumed across vertical cells.
    pub kappa: f64,
    radial: Vec<f64>,
    polar: Vec<f64>,
    vol: Vec<f64>,
}

/// Indices and weights bracketing `x` in ascending `nodes`, clamped at both ends.
fn bracket(nodes: &[f64], x: f64) -> (usize, usize, f64) {
    let n = nodes.len();
    if n == 1 || x <= nodes[0] {
        return (0, 0, 0.0);
    }
    if x >= nodes[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let i = nodes
        .partition_point(|a| *a <= x)
        .saturating_sub(1)
        .min(n - 2);
    (i, i + 1, (x - nodes[i]) / (nodes[i + 1] - nodes[i]))
}

/// Vertical cell integrals of the exponentially fitted interpolant:
/// weights of the lower and upper node over a cell of height `h`.
fn fitted_cell_weights(kappa: f64, h: f64) -> (f64, f64) {
    let kh = kappa * h;
    if kh.abs() < 1e-6 {
        return (0.5 * h * (1.0 - kh / 3.0), 0.5 * h * (1.0 + kh / 3.0));
    }
    let lower = 1.0 / kappa - (-(-kh).exp_m1()) / (kappa * kappa * h);
    let upper = (kh.exp_m1() - kh) / (kappa * kappa * h);
    (lower, upper)
}

impl PhaseGrid {
    pub fn new(mesh: Mesh3, quad: MomentumQuadrature, kappa: f64) -> Self {
        let radial = GaussRule::new(quad.n_radial)
            .on(0.0, quad.v_max)
            .map(|(r, _)| r)
            .collect();
        let polar = quad.polar_rule().into_iter().map(|(c, _)| c).collect();
        let wx = mesh.ax[0].trapezoid_weights();
        let wy = mesh.ax[1].trapezoid_weights();
        let z = &mesh.ax[2].nodes;
        let mut wz = vec![0.0; z.len()];
        for k in 0..z.len() - 1 {
            let (a, b) = fitted_cell_weights(kappa, z[k + 1] - z[k]);
            wz[k] += a;
            wz[k + 1] += b;
        }
        let vol = (0..mesh.n_nodes())
            .map(|idx| {
                let [i, j, k] = mesh.unindex(idx);
                wx[i] * wy[j] * wz[k]
            })
            .collect();
        PhaseGrid {
            mesh,
            quad,
            kappa,
            radial,
            polar,
            vol,
        }
    }

    pub fn n_v(&self) -> usize {
        self.quad.len()
    }

    pub fn len(&self) -> usize {
        self.mesh.n_nodes() * self.n_v()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial node volumes consistent with the interpolant.
    pub fn volume_weights(&self) -> &[f64] {
        &self.vol
    }

    /// Trilinear stencil with exponential fitting in the vertical direction.
    #[inline]
    pub fn spatial_stencil(&self, x: &Vec3) -> Option<[(usize, f64); 8]> {
        let mut st = self.mesh.stencil(x)?;
        if self.kappa != 0.0 {
            let (k, fz) = self.mesh.ax[2].locate(x[2])?;
            let h = self.mesh.ax[2].nodes[k + 1] - self.mesh.ax[2].nodes[k];
            let lo = (-self.kappa * fz * h).exp();
            let hi = (self.kappa * (1.0 - fz) * h).exp();
            for (c, e) in st.iter_mut().enumerate() {
                e.1 *= if c % 2 == 0 { lo } else { hi };
            }
        }
        Some(st)
    }

    /// Momentum stencil: multilinear in `(|v|, cos theta, phi)` on the quadrature nodes,
    /// clamped inside, tapering linearly to zero between the last radial node and `v_max`.
    #[inline]
    pub fn momentum_stencil(&self, v: &Vec3) -> Option<[(usize, f64); 8]> {
        let r = v.norm();
        let vm = self.quad.v_max;
        if !(r < vm) {
            return None;
        }
        let (r0, r1, mut fr) = bracket(&self.radial, r);
        let mut taper = 1.0;
        let r_last = self.radial[self.radial.len() - 1];
        if r > r_last {
            taper = (vm - r) / (vm - r_last);
            fr = 0.0;
        }
        let c = if r > 0.0 { v[2] / r } else { 1.0 };
        let (c0, c1, fc) = bracket(&self.polar, c);
        let nphi = self.quad.n_phi;
        let dphi = 2.0 * PI / nphi as f64;
        let mut phi = v[1].atan2(v[0]);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let u = phi / dphi - 0.5;
        let fl = u.floor();
        let fp = u - fl;
        let p0 = (fl as i64).rem_euclid(nphi as i64) as usize;
        let p1 = (p0 + 1) % nphi;
        let nth = self.polar.len();
        let id = |ir: usize, ic: usize, ip: usize| (ir * nth + ic) * nphi + ip;
        let mut out = [(0usize, 0.0); 8];
        let mut n = 0;
        for (ir, wr) in [(r0, 1.0 - fr), (r1, fr)] {
            for (ic, wc) in [(c0, 1.0 - fc), (c1, fc)] {
                for (ip, wp) in [(p0, 1.0 - fp), (p1, fp)] {
                    out[n] = (id(ir, ic, ip), taper * wr * wc * wp);
                    n += 1;
                }
            }
        }
        Some(out)
    }

    /// Interpolates node values (`node * n_v + k` layout) at `(x, v)`; zero outside the grid.
    #[inline]
    pub fn interp(&self, values: &[f64], x: &Vec3, v: &Vec3) -> f64 {
        let (Some(sx), Some(sv)) = (self.spatial_stencil(x), self.momentum_stencil(v)) else {
            return 0.0;
        };
        let nv = self.n_v();
        let mut acc = 0.0;
        for (i, wi) in sx {
            if wi == 0.0 {
                continue;
            }
            for (k, wk) in sv {
                if wk != 0.0 {
                    acc += wi * wk * values[i * nv + k];
                }
            }
        }
        acc
    }

    /// Vector-valued version of [`PhaseGrid::interp`].
    #[inline]
    pub fn interp3(&self, values: &[[f64; 3]], x: &Vec3, v: &Vec3) -> Vec3 {
        let (Some(sx), Some(sv)) = (self.spatial_stencil(x), self.momentum_stencil(v)) else {
            return Vec3::zeros();
        };
        let nv = self.n_v();
        let mut acc = Vec3::zeros();
        for (i, wi) in sx {
            if wi == 0.0 {
                continue;
            }
            for (k, wk) in sv {
                if wk != 0.0 {
                    acc += wi * wk * Vec3::from(values[i * nv + k]);
                }
            }
        }
        acc
    }

    /// Number density and particle flux `[n, j1, j2, j3]` of one species on every node.
    pub fn moments(&self, values: &[f64], m: f64) -> Vec<[f64; 4]> {
        let nv = self.n_v();
        let vh: Vec<Vec3> = (0..nv).map(|k| vhat(m, &self.quad.node(k))).collect();
        (0..self.mesh.n_nodes())
            .map(|i| {
                let mut out = [0.0; 4];
                for k in 0..nv {
                    let f = self.quad.weights[k] * values[i * nv + k];
                    out[0] += f;
                    for c in 0..3 {
                        out[c + 1] += f * vh[k][c];
                    }
                }
                out
            })
            .collect()
    }

    /// `(integral of f, integral of |f|)` over the grid.
    pub fn content(&self, values: &[f64]) -> (f64, f64) {
        let nv = self.n_v();
        let (mut a, mut b) = (0.0, 0.0);
        for (i, w) in self.vol.iter().enumerate() {
            for k in 0..nv {
                let f = w * self.quad.weights[k] * values[i * nv + k];
                a += f;
                b += f.abs();
            }
        }
        (a, b)
    }

    /// Net outward particle flux through the six faces of the grid box.
    pub fn outflow(&self, values: &[f64], m: f64) -> f64 {
        let (wall, rest) = self.outflow_split(values, m);
        wall + rest
    }

    /// Outward particle flux through the wall face and through the other five faces.
    pub fn outflow_split(&self, values: &[f64], m: f64) -> (f64, f64) {
        let mom = self.moments(values, m);
        let d = self.mesh.dims();
        let w: Vec<Vec<f64>> = self.mesh.ax.iter().map(|a| a.trapezoid_weights()).collect();
        let (mut wall, mut rest) = (0.0, 0.0);
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            for (end, sign) in [(0usize, -1.0), (d[axis] - 1, 1.0)] {
                for i in 0..d[a] {
                    for j in 0..d[b] {
                        let mut ijk = [0usize; 3];
                        ijk[axis] = end;
                        ijk[a] = i;
                        ijk[b] = j;
                        let idx = self.mesh.index(ijk[0], ijk[1], ijk[2]);
                        let flux = sign * w[a][i] * w[b][j] * mom[idx][axis + 1];
                        if axis == 2 && end == 0 {
                            wall += flux;
                        } else {
                            rest += flux;
                        }
                    }
                }
            }
        }
        (wall, rest)
    }
}

/// Steady density and its momentum gradient tabulated on the phase grid.
#[derive(Clone, Debug)]
pub struct SteadyTable {
    pub values: [Vec<f64>; 2],
    pub grad: [Vec<[f64; 3]>; 2],
}

impl SteadyTable {
    pub fn zeros(grid: &PhaseGrid) -> Self {
        let n = grid.len();
        SteadyTable {
            values: [vec![0.0; n], vec![0.0; n]],
            grad: [vec![[0.0; 3]; n], vec![[0.0; 3]; n]],
        }
    }

    pub fn build(state: &SteadyState, grid: &PhaseGrid) -> Result<Self> {
        if state.profile.is_zero() {
            return Ok(Self::zeros(grid));
        }
        let pb = state.evaluator();
        let h = state.config.grad_step;
        let nv = grid.n_v();
        let mut out = Self::zeros(grid);
        for s in Species::BOTH {
            let rows: Result<Vec<(Vec<f64>, Vec<[f64; 3]>)>> = (0..grid.mesh.n_nodes())
                .into_par_iter()
                .map(|i| {
                    let x = grid.mesh.node(i);
                    let mut vals = Vec::with_capacity(nv);
                    let mut grads = Vec::with_capacity(nv);
                    for k in 0..nv {
                        let v = grid.quad.node(k);
                        vals.push(pb.eval(s, &x, &v)?);
                        grads.push(pb.grad_v(s, &x, &v, h)?.into());
                    }
                    Ok((vals, grads))
                })
                .collect();
            for (i, (vals, grads)) in rows?.into_iter().enumerate() {
                out.values[s.index()][i * nv..(i + 1) * nv].copy_from_slice(&vals);
                out.grad[s.index()][i * nv..(i + 1) * nv].copy_from_slice(&grads);
            }
        }
        Ok(out)
    }

    /// Gradient at a spatial point and momentum node `k`.
    #[inline]
    pub fn grad_at_node(&self, grid: &PhaseGrid, s: Species, x: &Vec3, k: usize) -> Vec3 {
        let Some(st) = grid.spatial_stencil(x) else {
            return Vec3::zeros();
        };
        let nv = grid.n_v();
        let g = &self.grad[s.index()];
        st.iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(i, w)| *w * Vec3::from(g[i * nv + k]))
            .sum()
    }

    pub fn grad_at(&self, grid: &PhaseGrid, s: Species, x: &Vec3, v: &Vec3) -> Vec3 {
        grid.interp3(&self.grad[s.index()], x, v)
    }
}

/// Time-ordered snapshots of the density (on the phase grid) and perturbation fields.
/// Snapshot `n` holds time `n dt`. Old density snapshots beyond the cone reach are
/// released; the initial one and all field snapshots are kept.
#[derive(Clone, Debug)]
pub struct History {
    pub dt: f64,
    /// Density snapshots older than `newest - keep` are released.
    pub keep: f64,
    f: Vec<Option<Arc<[Vec<f64>; 2]>>>,
    fields: Vec<FieldGrid>,
}

impl History {
    pub fn new(dt: f64, keep: f64, f0: [Vec<f64>; 2], fields0: FieldGrid) -> Self {
        History {
            dt,
            keep,
            f: vec![Some(Arc::new(f0))],
            fields: vec![fields0],
        }
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn newest_t(&self) -> f64 {
        (self.f.len() - 1) as f64 * self.dt
    }

    /// Oldest retained time after the initial one.
    pub fn oldest_t(&self) -> f64 {
        let n = self
            .f
            .iter()
            .skip(1)
            .position(|s| s.is_some())
            .map(|p| p + 1)
            .unwrap_or(0);
        n as f64 * self.dt
    }

    pub fn push(&mut self, f: [Vec<f64>; 2], fields: FieldGrid) {
        self.f.push(Some(Arc::new(f)));
        self.fields.push(fields);
        let newest = self.newest_t();
        for (n, slot) in self.f.iter_mut().enumerate().skip(1) {
            if ((n + 1) as f64) * self.dt < newest - self.keep {
                *slot = None;
            }
        }
    }

    /// Replaces the newest field snapshot (fields are assembled after the density step).
    pub fn set_newest_fields(&mut self, fields: FieldGrid) {
        let n = self.fields.len() - 1;
        self.fields[n] = fields;
    }

    pub fn f_snapshot(&self, n: usize) -> Option<&[Vec<f64>; 2]> {
        self.f.get(n).and_then(|s| s.as_deref())
    }

    pub fn f_snapshot_mut(&mut self, n: usize) -> Option<&mut [Vec<f64>; 2]> {
        self.f
            .get_mut(n)
            .and_then(|s| s.as_mut())
            .map(Arc::make_mut)
    }

    pub fn field_snapshot(&self, n: usize) -> &FieldGrid {
        &self.fields[n]
    }

    pub fn field_snapshot_mut(&mut self, n: usize) -> &mut FieldGrid {
        &mut self.fields[n]
    }

    /// Two density snapshots and the interpolation weight of the later one.
    pub fn f_bracket(&self, s: f64) -> Result<(&[Vec<f64>; 2], &[Vec<f64>; 2], f64)> {
        let newest = self.newest_t();
        let underrun = || Error::HistoryUnderrun {
            t: s,
            oldest: self.oldest_t(),
            newest,
        };
        if !(s >= -1e-12 * self.dt) || s > newest + 1e-9 * self.dt.max(newest) {
            return Err(underrun());
        }
        let u = (s / self.dt).max(0.0);
        let n0 = (u.floor() as usize).min(self.f.len() - 1);
        let a = if n0 + 1 < self.f.len() {
            u - n0 as f64
        } else {
            0.0
        };
        let f0 = self.f[n0].as_deref().ok_or_else(underrun)?;
        if a <= 0.0 {
            return Ok((f0, f0, 0.0));
        }
        let f1 = self.f[n0 + 1].as_deref().ok_or_else(underrun)?;
        Ok((f0, f1, a))
    }

    /// Perturbation fields at time `s`; times past the newest snapshot use the newest (one-step lag).
    pub fn fields_at(&self, s: f64, x: &Vec3) -> (Vec3, Vec3) {
        let u = (s / self.dt).max(0.0);
        let last = self.fields.len() - 1;
        let n0 = (u.floor() as usize).min(last);
        let a = if n0 < last { u - n0 as f64 } else { 0.0 };
        let (e0, b0) = self.fields[n0].eb(x);
        if a <= 0.0 {
            return (e0, b0);
        }
        let (e1, b1) = self.fields[n0 + 1].eb(x);
        ((1.0 - a) * e0 + a * e1, (1.0 - a) * b0 + a * b1)
    }

    /// Adds `eps` to every history entry farther from `x` than the cone of time `t` allows,
    /// widened by `margin`. Entries inside stay untouched.
    pub fn perturb_outside_cone(
        &mut self,
        grid: &PhaseGrid,
        x: &Vec3,
        t: f64,
        margin: f64,
        eps: f64,
    ) {
        let dt = self.dt;
        let nv = grid.n_v();
        let xb = reflect(x);
        let far = |y: &Vec3, s: f64| (y - x).norm().min((y - xb).norm()) > (t - s) + margin;
        for n in 0..self.f.len() {
            let s = n as f64 * dt;
            if let Some(f) = self.f_snapshot_mut(n) {
                for i in 0..grid.mesh.n_nodes() {
                    if far(&grid.mesh.node(i), s) {
                        for sp in f.iter_mut() {
                            for val in &mut sp[i * nv..(i + 1) * nv] {
                                *val += eps;
                            }
                        }
                    }
                }
            }
            let fg = &mut self.fields[n];
            for i in 0..fg.grid.mesh.n_nodes() {
                if far(&fg.grid.mesh.node(i), s) {
                    for c in fg.grid.values[i].iter_mut() {
                        *c += eps;
                    }
                }
            }
        }
    }
}

/// Perturbation fields read from a history, as a time-dependent field.
pub struct HistoryField<'a>(pub &'a History);

impl FieldEval for HistoryField<'_> {
    fn eval(&self, t: f64, x: &Vec3) -> Result<(Vec3, Vec3)> {
        Ok(self.0.fields_at(t, x))
    }
}

/// Fields seen at a retarded point: total (steady plus perturbation) and perturbation alone.
#[derive(Clone, Copy, Debug)]
pub struct ConeFields {
    pub total_e: Vec3,
    pub total_b: Vec3,
    pub pert_e: Vec3,
    pub pert_b: Vec3,
}

/// Phase-space data seen by the retarded field representations.
pub trait ConeSource: Sync {
    /// Momentum nodes and weights shared by both species.
    fn quadrature(&self) -> &MomentumQuadrature;
    /// `(half, height)` of the box `[-half, half]^2 x [0, height]` holding the density.
    fn support(&self) -> (f64, f64);
    /// Writes `w_k f_s(s, y, v_k)` for each species and node; returns false when all vanish.
    fn densities(&self, s: f64, y: &Vec3, out: &mut [Vec<f64>; 2]) -> Result<bool>;
    fn fields(&self, s: f64, y: &Vec3) -> ConeFields;
    /// Momentum gradient of the steady density at momentum node `k`.
    fn steady_grad(&self, sp: Species, y: &Vec3, k: usize) -> Vec3;
}

/// Cone source backed by the phase-grid history.
pub struct GridSource<'a> {
    pub grid: &'a PhaseGrid,
    pub history: &'a History,
    pub table: &'a SteadyTable,
    pub steady: &'a FieldGrid,
}

impl ConeSource for GridSource<'_> {
    fn quadrature(&self) -> &MomentumQuadrature {
        &self.grid.quad
    }

    fn support(&self) -> (f64, f64) {
        (self.grid.mesh.ax[0].hi(), self.grid.mesh.ax[2].hi())
    }

    fn densities(&self, s: f64, y: &Vec3, out: &mut [Vec<f64>; 2]) -> Result<bool> {
        for o in out.iter_mut() {
            o.iter_mut().for_each(|x| *x = 0.0);
        }
        let Some(st) = self.grid.spatial_stencil(y) else {
            return Ok(false);
        };
        let (f0, f1, a) = self.history.f_bracket(s)?;
        let nv = self.grid.n_v();
        let w = &self.grid.quad.weights;
        let mut any = false;
        for sp in 0..2 {
            let o = &mut out[sp];
            for (i, wi) in st {
                if wi == 0.0 {
                    continue;
                }
                let r0 = &f0[sp][i * nv..(i + 1) * nv];
                if a > 0.0 {
                    let r1 = &f1[sp][i * nv..(i + 1) * nv];
                    for k in 0..nv {
                        o[k] += wi * ((1.0 - a) * r0[k] + a * r1[k]);
                    }
                } else {
                    for k in 0..nv {
                        o[k] += wi * r0[k];
                    }
                }
            }
            for k in 0..nv {
                o[k] *= w[k];
                any |= o[k] != 0.0;
            }
        }
        Ok(any)
    }

    fn fields(&self, s: f64, y: &Vec3) -> ConeFields {
        let (es, bs) = self.steady.eb(y);
        let (ep, bp) = self.history.fields_at(s, y);
        ConeFields {
            total_e: es + ep,
            total_b: bs + bp,
            pert_e: ep,
            pert_b: bp,
        }
    }

    fn steady_grad(&self, sp: Species, y: &Vec3, k: usize) -> Vec3 {
        self.table.grad_at_node(self.grid, sp, y, k)
    }
}

/// Quadrature resolution of the retarded field integrals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeSpec {
    /// Largest radial panel over the backward cone.
    pub dr_max: f64,
    /// Gauss nodes per radial panel.
    pub n_radial: usize,
    /// Gauss nodes per height band in `cos(theta)`.
    pub n_band: usize,
    pub n_phi: usize,
    /// Heights splitting the wall layer into bands refined towards the wall.
    pub layer_breaks: [f64; 2],
    /// Angular nodes on the wall disc.
    pub wall_n_phi: usize,
    /// Sphere rule of the Kirchhoff terms.
    pub hom_theta: usize,
    pub hom_phi: usize,
}

impl Default for ConeSpec {
    fn default() -> Self {
        ConeSpec {
            dr_max: 0.5,
            n_radial: 2,
            n_band: 2,
            n_phi: 8,
            layer_breaks: [0.02, 0.08],
            wall_n_phi: 12,
            hom_theta: 12,
            hom_phi: 24,
        }
    }
}

/// Prebuilt rules for [`ConeSpec`].
#[derive(Clone, Debug)]
pub struct ConeRules {
    pub spec: ConeSpec,
    radial: GaussRule,
    band: GaussRule,
    phi: Vec<(f64, f64)>,
    wall_phi: Vec<(f64, f64)>,
    pub hom: SphereRule,
}

fn ring(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let p = 2.0 * PI * (k as f64 + 0.5) / n as f64;
            (p.cos(), p.sin())
        })
        .collect()
}

impl ConeRules {
    pub fn new(spec: ConeSpec) -> Result<Self> {
        if !(spec.dr_max > 0.0)
            || spec.n_radial == 0
            || spec.n_band == 0
            || spec.n_phi == 0
            || spec.wall_n_phi == 0
        {
            return Err(Error::ConfigInvalid(
                "cone quadrature needs positive panel size and node counts".into(),
            ));
        }
        Ok(ConeRules {
            spec,
            radial: GaussRule::new(spec.n_radial),
            band: GaussRule::new(spec.n_band),
            phi: ring(spec.n_phi),
            wall_phi: ring(spec.wall_n_phi),
            hom: SphereRule::new(spec.hom_theta.max(1), spec.hom_phi.max(1)),
        })
    }

    fn for_each_radius<F: FnMut(f64, f64) -> Result<()>>(
        &self,
        lo: f64,
        hi: f64,
        mut f: F,
    ) -> Result<()> {
        if !(hi > lo) {
            return Ok(());
        }
        let n = ((hi - lo) / self.spec.dr_max).ceil().max(1.0) as usize;
        let h = (hi - lo) / n as f64;
        for i in 0..n {
            for (r, w) in self.radial.on(lo + i as f64 * h, lo + (i + 1) as f64 * h) {
                f(r, w)?;
            }
        }
        Ok(())
    }

    /// Directions from a centre at height `p3` whose points at distance `r` lie in
    /// `0 <= z3 <= height`, with solid-angle weights.
    fn for_each_layer_direction<F: FnMut(Vec3, f64) -> Result<()>>(
        &self,
        p3: f64,
        r: f64,
        height: f64,
        mut f: F,
    ) -> Result<()> {
        let [b0, b1] = self.spec.layer_breaks;
        let zs = [0.0, b0.min(height), b1.min(height), height];
        let dphi = 2.0 * PI / self.phi.len() as f64;
        for j in 0..3 {
            let ca = ((zs[j] - p3) / r).clamp(-1.0, 1.0);
            let cb = ((zs[j + 1] - p3) / r).clamp(-1.0, 1.0);
            if !(cb > ca) {
                continue;
            }
            for (c, wc) in self.band.on(ca, cb) {
                let s = (1.0 - c * c).max(0.0).sqrt();
                for (cp, sp) in &self.phi {
                    f(Vec3::new(s * cp, s * sp, c), wc * dphi)?;
                }
            }
        }
        Ok(())
    }
}

fn box_distance(p: &Vec3, half: f64, height: f64) -> (f64, f64) {
    let dx = (p[0].abs() - half).max(0.0);
    let dy = (p[1].abs() - half).max(0.0);
    let dz = (-p[2]).max(p[2] - height).max(0.0);
    let near = (dx * dx + dy * dy + dz * dz).sqrt();
    let fz = p[2].abs().max((p[2] - height).abs());
    let far = ((p[0].abs() + half).powi(2) + (p[1].abs() + half).powi(2) + fz * fz).sqrt();
    (near, far)
}

/// Parity of the image contributions to `E`: odd tangential, even normal.
fn e_parity(v: Vec3) -> Vec3 {
    Vec3::new(-v[0], -v[1], v[2])
}

/// Parity of the image contributions to `B`: `M = diag(1, 1, -1)`.
fn b_parity(v: Vec3) -> Vec3 {
    reflect(&v)
}

/// Separately recorded terms of the perturbation electric field.
/// Image terms are stored with their parity already applied, so the field is the sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ETerms {
    pub hom: Vec3,
    pub t_direct: Vec3,
    pub t_image: Vec3,
    pub s_acc_direct: Vec3,
    pub s_acc_image: Vec3,
    pub s_st_direct: Vec3,
    pub s_st_image: Vec3,
    pub b1_direct: Vec3,
    pub b1_image: Vec3,
    pub b2_direct: Vec3,
    pub b2_image: Vec3,
    /// Wall term of the normal component.
    pub add: Vec3,
}

impl ETerms {
    pub const NAMES: [&'static str; 12] = [
        "hom",
        "t_direct",
        "t_image",
        "s_acc_direct",
        "s_acc_image",
        "s_st_direct",
        "s_st_image",
        "b1_direct",
        "b1_image",
        "b2_direct",
        "b2_image",
        "add",
    ];

    pub fn terms(&self) -> [Vec3; 12] {
        [
            self.hom,
            self.t_direct,
            self.t_image,
            self.s_acc_direct,
            self.s_acc_image,
            self.s_st_direct,
            self.s_st_image,
            self.b1_direct,
            self.b1_image,
            self.b2_direct,
            self.b2_image,
            self.add,
        ]
    }

    pub fn total(&self) -> Vec3 {
        self.terms().iter().sum()
    }
}

/// Separately recorded terms of the perturbation magnetic field. There is no
/// acceleration term and no wall-disc density term besides the Neumann one.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BTerms {
    pub hom: Vec3,
    /// Wall term of the tangential components.
    pub neu: Vec3,
    pub t_direct: Vec3,
    pub t_image: Vec3,
    pub b1_direct: Vec3,
    pub b1_image: Vec3,
}

impl BTerms {
    pub const NAMES: [&'static str; 6] =
        ["hom", "neu", "t_direct", "t_image", "b1_direct", "b1_image"];

    pub fn terms(&self) -> [Vec3; 6] {
        [
            self.hom,
            self.neu,
            self.t_direct,
            self.t_image,
            self.b1_direct,
            self.b1_image,
        ]
    }

    pub fn total(&self) -> Vec3 {
        self.terms().iter().sum()
    }
}

/// Kirchhoff terms: odd extension for `E_par, B3`, even for `E3, B_par`.
pub fn hom_terms(
    init: &Arc<PerturbationInit>,
    rule: &SphereRule,
    t: f64,
    x: &Vec3,
) -> Result<(Vec3, Vec3)> {
    let mut e = Vec3::zeros();
    let mut b = Vec3::zeros();
    if init.spec.e_amplitude == 0.0 && init.spec.b_amplitude == 0.0 {
        return Ok((e, b));
    }
    for c in 0..6 {
        let i = c % 3;
        let parity = match (c < 3, i == 2) {
            (true, false) | (false, true) => Parity::Odd,
            _ => Parity::Even,
        };
        let val = kirchhoff_hom(rule, &init.wave_data(c), t, x, Some(parity))?;
        if c < 3 {
            e[i] = val;
        } else {
            b[i] = val;
        }
    }
    Ok((e, b))
}

#[derive(Default)]
struct VolumeTerms {
    t: [Vec3; 2],
    s_acc: [Vec3; 2],
    s_st: [Vec3; 2],
    bt: [Vec3; 2],
}

/// Volume integrals over the backward cone, from the field point (`[0]`) and from
/// its mirror image (`[1]`), before the image parity is applied.
fn cone_volume(
    src: &dyn ConeSource,
    params: &ModelParams,
    rules: &ConeRules,
    t: f64,
    x: &Vec3,
) -> Result<VolumeTerms> {
    let quad = src.quadrature();
    let nv = quad.len();
    let (half, height) = src.support();
    let mut out = VolumeTerms::default();
    let mut buf = [vec![0.0; nv], vec![0.0; nv]];
    let ext_e = params.ext_e();
    let ext_b = params.ext_b();
    for (side, p) in [*x, reflect(x)].into_iter().enumerate() {
        let (near, far) = box_distance(&p, half, height);
        rules.for_each_radius(near, far.min(t), |r, wr| {
            let s = t - r;
            rules.for_each_layer_direction(p[2], r, height, |om, wo| {
                let z = p + r * om;
                if z[0].abs() > half || z[1].abs() > half {
                    return Ok(());
                }
                let any = src.densities(s, &z, &mut buf)?;
                let fl = src.fields(s, &z);
                let pert = fl.pert_e != Vec3::zeros() || fl.pert_b != Vec3::zeros();
                if !any && !pert {
                    return Ok(());
                }
                let w = wr * wo;
                for sp in Species::BOTH {
                    let iota = sp.charge();
                    let m = params.mass(sp);
                    let dens = &buf[sp.index()];
                    for k in 0..nv {
                        let g = dens[k];
                        if g == 0.0 && !pert {
                            continue;
                        }
                        let v = quad.node(k);
                        let kp = KernelPoint::new(m, om, v);
                        let vh = kp.vhat();
                        if g != 0.0 {
                            out.t[side] += iota * g * w * kernel_et(&kp);
                            let force = iota
                                * (fl.total_e + ext_e + vh.cross(&(fl.total_b + ext_b)))
                                - Vec3::new(0.0, 0.0, m * params.g);
                            out.s_acc[side] -= iota * g * w * r * (kernel_ae(&kp) * force);
                            out.bt[side] += iota * g * w * r * r * kernel_bt(m, &(r * om), &v)?;
                        }
                        if pert {
                            let lf = fl.pert_e + vh.cross(&fl.pert_b);
                            let gs = src.steady_grad(sp, &z, k);
                            out.s_st[side] +=
                                quad.weights[k] * w * r * lf.dot(&gs) * kernel_direction(&kp);
                        }
                    }
                }
                Ok(())
            })
        })?;
    }
    Ok(out)
}

#[derive(Default)]
struct SphereTerms {
    e: [Vec3; 2],
    b: [Vec3; 2],
}

/// Initial-density terms on the sphere `|z - p| = t`, `p` the field point or its image.
fn cone_sphere(
    src: &dyn ConeSource,
    params: &ModelParams,
    rules: &ConeRules,
    t: f64,
    x: &Vec3,
) -> Result<SphereTerms> {
    let quad = src.quadrature();
    let nv = quad.len();
    let (half, height) = src.support();
    let mut out = SphereTerms::default();
    let mut buf = [vec![0.0; nv], vec![0.0; nv]];
    if !(t > 0.0) {
        return Ok(out);
    }
    for (side, p) in [*x, reflect(x)].into_iter().enumerate() {
        let (near, far) = box_distance(&p, half, height);
        if t < near || t > far {
            continue;
        }
        rules.for_each_layer_direction(p[2], t, height, |om, wo| {
            let z = p + t * om;
            if z[0].abs() > half || z[1].abs() > half || !src.densities(0.0, &z, &mut buf)? {
                return Ok(());
            }
            for sp in Species::BOTH {
                let iota = sp.charge();
                let m = params.mass(sp);
                for k in 0..nv {
                    let g = buf[sp.index()][k];
                    if g == 0.0 {
                        continue;
                    }
                    let v = quad.node(k);
                    let kp = KernelPoint::new(m, om, v);
                    out.e[side] -= iota * g * wo * t * (kernel_k(&kp) * om);
                    out.b[side] += iota * g * wo * t * t * kernel_b1_magnetic(m, &(t * om), &v)?;
                }
            }
            Ok(())
        })?;
    }
    Ok(out)
}

#[derive(Default)]
struct WallTerms {
    b2: [Vec3; 2],
    add: f64,
    neu: Vec3,
}

/// Wall-disc integrals `int dy_par / |y - x|` over `|y - x| <= t`, `y3 = 0`,
/// written as `int dr int dphi`. Only outgoing momenta (`v3 <= 0`) carry density at the wall.
fn cone_wall(
    src: &dyn ConeSource,
    params: &ModelParams,
    rules: &ConeRules,
    t: f64,
    x: &Vec3,
) -> Result<WallTerms> {
    let quad = src.quadrature();
    let nv = quad.len();
    let (half, _) = src.support();
    let mut out = WallTerms::default();
    let mut buf = [vec![0.0; nv], vec![0.0; nv]];
    let x3 = x[2];
    let (near, far) = box_distance(x, half, 0.0);
    let xb = reflect(x);
    let dphi = 2.0 * PI / rules.wall_phi.len() as f64;
    rules.for_each_radius(near.max(x3), far.min(t), |r, wr| {
        let rho = (r * r - x3 * x3).max(0.0).sqrt();
        let s = t - r;
        for (cp, sn) in &rules.wall_phi {
            let y = Vec3::new(x[0] + rho * cp, x[1] + rho * sn, 0.0);
            if y[0].abs() > half || y[1].abs() > half || !src.densities(s, &y, &mut buf)? {
                continue;
            }
            let om = (y - x) / r;
            let omb = (y - xb) / r;
            let w = wr * dphi;
            for sp in Species::BOTH {
                let iota = sp.charge();
                let m = params.mass(sp);
                for k in 0..nv {
                    let g = buf[sp.index()][k];
                    let v = quad.node(k);
                    if g == 0.0 || v[2] > 0.0 {
                        continue;
                    }
                    let vh = vhat(m, &v);
                    out.b2[0] += iota * g * w * kernel_b2(&KernelPoint::new(m, om, v));
                    out.b2[1] += iota * g * w * kernel_b2(&KernelPoint::new(m, omb, v));
                    out.add -= 2.0 * iota * g * w;
                    out.neu += 2.0 * iota * g * w * Vec3::new(-vh[1], vh[0], 0.0);
                }
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// All recorded terms of both perturbation fields at `(t, x)`.
pub fn assemble_fields(
    src: &dyn ConeSource,
    init: Option<&Arc<PerturbationInit>>,
    params: &ModelParams,
    rules: &ConeRules,
    t: f64,
    x: &Vec3,
) -> Result<(ETerms, BTerms)> {
    let (hom_e, hom_b) = match init {
        Some(i) if t > 0.0 => hom_terms(i, &rules.hom, t, x)?,
        Some(i) => (i.e_in(x), i.b_in(x)),
        None => (Vec3::zeros(), Vec3::zeros()),
    };
    if !(t > 0.0) {
        return Ok((
            ETerms {
                hom: hom_e,
                ..Default::default()
            },
            BTerms {
                hom: hom_b,
                ..Default::default()
            },
        ));
    }
    let vol = cone_volume(src, params, rules, t, x)?;
    let sph = cone_sphere(src, params, rules, t, x)?;
    let wall = cone_wall(src, params, rules, t, x)?;
    let e = ETerms {
        hom: hom_e,
        t_direct: vol.t[0],
        t_image: e_parity(vol.t[1]),
        s_acc_direct: vol.s_acc[0],
        s_acc_image: e_parity(vol.s_acc[1]),
        s_st_direct: vol.s_st[0],
        s_st_image: e_parity(vol.s_st[1]),
        b1_direct: sph.e[0],
        b1_image: e_parity(sph.e[1]),
        b2_direct: wall.b2[0],
        b2_image: e_parity(wall.b2[1]),
        add: Vec3::new(0.0, 0.0, wall.add),
    };
    let b = BTerms {
        hom: hom_b,
        neu: wall.neu,
        t_direct: vol.bt[0],
        t_image: b_parity(vol.bt[1]),
        b1_direct: -sph.b[0],
        b1_image: -b_parity(sph.b[1]),
    };
    Ok((e, b))
}

/// Component `i` of the perturbation electric field.
pub fn assemble_e(
    src: &dyn ConeSource,
    init: Option<&Arc<PerturbationInit>>,
    params: &ModelParams,
    rules: &ConeRules,
    i: usize,
    t: f64,
    x: &Vec3,
) -> Result<f64> {
    Ok(assemble_fields(src, init, params, rules, t, x)?.0.total()[i])
}

/// Component `i` of the perturbation magnetic field.
pub fn assemble_b(
    src: &dyn ConeSource,
    init: Option<&Arc<PerturbationInit>>,
    params: &ModelParams,
    rules: &ConeRules,
    i: usize,
    t: f64,
    x: &Vec3,
) -> Result<f64> {
    Ok(assemble_fields(src, init, params, rules, t, x)?.1.total()[i])
}

/// `max_ij |int_{|y - x| = t, y3 > 0} dS int dv (K+_ij f+(y, v) - K-_ij f-(y, v))|`
/// with `K_ij` the initial-data kernel at `omega = (y - x)/t`.
pub fn rrcn(
    masses: [f64; 2],
    f_plus: &dyn Fn(&Vec3, &Vec3) -> f64,
    f_minus: &dyn Fn(&Vec3, &Vec3) -> f64,
    quad: &MomentumQuadrature,
    rule: &SphereRule,
    t: f64,
    x: &Vec3,
) -> f64 {
    let Some((a, b)) = SphereRule::cos_range(crate::quadrature::Hemisphere::Upper, x[2], t) else {
        return 0.0;
    };
    let mut acc = Mat3::zeros();
    rule.for_each_in_band(a, b, |om, wo| {
        let y = x + t * om;
        for k in 0..quad.len() {
            let v = quad.node(k);
            let (fp, fm) = (f_plus(&y, &v), f_minus(&y, &v));
            if fp == 0.0 && fm == 0.0 {
                continue;
            }
            let kp = kernel_k(&KernelPoint::new(masses[0], om, v));
            let km = kernel_k(&KernelPoint::new(masses[1], om, v));
            acc += wo * t * t * quad.weights[k] * (kp * fp - km * fm);
        }
    });
    acc.iter().fold(0.0, |m, c| m.max(c.abs()))
}

/// Mild solution at `(t, x, v)`: the initial density transported back to time zero
/// (zero if the backward characteristic leaves through the wall first) minus the
/// integral of `iota (E + vh x B) . grad_v F_st` along the characteristic, by the
/// trapezoid rule on the integrator nodes.
#[allow(clippy::too_many_arguments)]
pub fn eval_f_mild(
    params: &ModelParams,
    sp: Species,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    total: &dyn FieldEval,
    pert: &dyn FieldEval,
    grad_st: &dyn Fn(&Vec3, &Vec3) -> Vec3,
    f_in: &dyn Fn(&Vec3, &Vec3) -> f64,
    opts: &TraceOptions,
) -> Result<f64> {
    if !(t > 0.0) {
        return Ok(if x[2] >= 0.0 { f_in(x, v) } else { 0.0 });
    }
    let ff = ForceField::new(params, sp, total);
    let prop = propagate(&ff, t, x, v, Direction::Backward, opts, Some(t), true)?;
    let m = params.mass(sp);
    let iota = sp.charge();
    let src = |s: f64, y: &Vec3, u: &Vec3| -> Result<f64> {
        let (e, b) = pert.eval(s, y)?;
        if e == Vec3::zeros() && b == Vec3::zeros() {
            return Ok(0.0);
        }
        Ok((e + vhat(m, u).cross(&b)).dot(&grad_st(y, u)))
    };
    let mut integral = 0.0;
    for pair in prop.path.windows(2) {
        let (s0, x0, v0) = &pair[0];
        let (s1, x1, v1) = &pair[1];
        integral += 0.5 * (s0 - s1).abs() * (src(*s0, x0, v0)? + src(*s1, x1, v1)?);
    }
    let transported = if prop.reached_cap {
        f_in(&prop.x_end, &prop.v_end)
    } else {
        0.0
    };
    Ok(transported - iota * integral)
}

/// Dynamic solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicConfig {
    /// Spatial part of the phase grid: the wall layer holding the perturbation density.
    pub phase_mesh: SlabSpec,
    pub momentum: MomentumSpec,
    /// Vertical decay rate assumed between phase-grid nodes; `None` uses `beta min(m) g`.
    pub layer_rate: Option<f64>,
    /// Mesh carrying the perturbation fields.
    pub field_mesh: SlabSpec,
    pub dt: f64,
    pub t_end: f64,
    pub cone: ConeSpec,
    /// Integrator settings of the mild-formula traces.
    pub trace: TraceOptions,
    /// Sub-intervals of the time quadrature of the boundary outflow in each step.
    pub outflow_substeps: usize,
    pub cloud_size: usize,
    pub cloud_half: f64,
    pub seed: u64,
    /// Sphere rule of the charge-neutrality diagnostic.
    pub rrcn_theta: usize,
    pub rrcn_phi: usize,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            phase_mesh: SlabSpec {
                half: 2.5,
                n_par: 11,
                height: 0.3,
                n_z: 10,
                first_z: 0.004,
            },
            momentum: MomentumSpec {
                n_radial: 4,
                n_theta: 4,
                n_phi: 6,
                v_max: Some(2.0),
                tail: 1e-14,
                split_polar: true,
            },
            layer_rate: None,
            field_mesh: SlabSpec {
                half: 3.0,
                n_par: 5,
                height: 3.0,
                n_z: 5,
                first_z: 0.05,
            },
            dt: 0.2,
            t_end: 10.0,
            cone: ConeSpec::default(),
            trace: TraceOptions {
                dt: 0.05,
                min_steps: 4,
                ..TraceOptions::default()
            },
            outflow_substeps: 8,
            cloud_size: 500,
            cloud_half: 1.5,
            seed: 11,
            rrcn_theta: 8,
            rrcn_phi: 16,
        }
    }
}

impl DynamicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "need dt > 0 and t_end >= 0 (dt={}, t_end={})",
                self.dt, self.t_end
            )));
        }
        if self.cloud_size == 0 || !(self.cloud_half > 0.0) {
            return Err(Error::ConfigInvalid("cloud must be non-empty".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    pub sup_e: f64,
    pub sup_b: f64,
    /// `sup exp(beta |x_par|/2 + beta (v0 + m g x3)/4) |f|` over the sample cloud (mild formula).
    pub sup_wf_cloud: f64,
    /// Same weighted sup over the phase-grid nodes.
    pub sup_wf_grid: f64,
    /// Per-step charge-balance residual relative to the density content.
    pub charge_residual: f64,
    /// Per-step particle-balance residual of each species relative to its content.
    pub species_residual: [f64; 2],
    /// Steady plus perturbation field sup on the field mesh.
    pub total_field_sup: f64,
    /// The exit-time bound applies (total field below `min(m) g/8`).
    pub exit_bound_regime: bool,
    pub rrcn: f64,
    /// Sup over the field mesh of every recorded term, in `TERM_COLUMNS` order.
    pub term_sups: Vec<f64>,
    pub seconds: f64,
}

/// Column names of the per-term sups: electric terms then magnetic terms.
pub fn term_columns() -> Vec<String> {
    ETerms::NAMES
        .iter()
        .map(|n| format!("e_{n}"))
        .chain(BTerms::NAMES.iter().map(|n| format!("b_{n}")))
        .collect()
}

/// Time series of the decay diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    pub rows: Vec<DecayRow>,
}

impl DecaySeries {
    /// Plot-ready CSV; wall-clock timings are left out so output is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t,sup_e,sup_b,sup_wf_cloud,sup_wf_grid,one_plus_t_sup_e,one_plus_t_sup_b,one_plus_t_sup_wf,charge_residual,residual_plus,residual_minus,total_field_sup,exit_bound_regime,rrcn",
        );
        for c in term_columns() {
            out.push(',');
            out.push_str(&c);
        }
        out.push('\n');
        for r in &self.rows {
            let k = 1.0 + r.t;
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}",
                r.t,
                r.sup_e,
                r.sup_b,
                r.sup_wf_cloud,
                r.sup_wf_grid,
                k * r.sup_e,
                k * r.sup_b,
                k * r.sup_wf_cloud.max(r.sup_wf_grid),
                r.charge_residual,
                r.species_residual[0],
                r.species_residual[1],
                r.total_field_sup,
                r.exit_bound_regime,
                r.rrcn
            ));
            for v in &r.term_sups {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Perturbation solver: phase-grid density, retarded fields, diagnostics.
pub struct DynamicSolver {
    pub params: ModelParams,
    pub config: DynamicConfig,
    pub init: Arc<PerturbationInit>,
    pub grid: Arc<PhaseGrid>,
    pub table: Arc<SteadyTable>,
    pub steady_fields: Arc<FieldGrid>,
    pub field_mesh: Mesh3,
    pub rules: ConeRules,
    pub history: History,
    pub cloud: SampleCloud,
    pub series: DecaySeries,
    pub step: usize,
    /// Largest density content seen, per species.
    content_scale: [f64; 2],
    last_outflow: [(f64, f64); 2],
}

impl DynamicSolver {
    /// Phase grid for a configuration.
    pub fn phase_grid(params: &ModelParams, config: &DynamicConfig) -> Result<PhaseGrid> {
        let mesh = config.phase_mesh.build()?;
        let quad = config.momentum.build(params.min_mass(), params.beta);
        let kappa = config
            .layer_rate
            .unwrap_or(params.beta * params.min_mass() * params.g);
        Ok(PhaseGrid::new(mesh, quad, kappa))
    }

    /// Solver around a converged steady state (tabulates the steady momentum gradient).
    pub fn from_steady(
        state: &SteadyState,
        spec: PerturbationSpec,
        config: DynamicConfig,
    ) -> Result<Self> {
        let grid = Self::phase_grid(&state.params, &config)?;
        let table = SteadyTable::build(state, &grid)?;
        Self::new(
            state.params.clone(),
            state.fields.clone(),
            grid,
            table,
            spec,
            config,
        )
    }

    pub fn new(
        params: ModelParams,
        steady_fields: Arc<FieldGrid>,
        grid: PhaseGrid,
        table: SteadyTable,
        spec: PerturbationSpec,
        config: DynamicConfig,
    ) -> Result<Self> {
        params.validate()?;
        config.validate()?;
        let init = Arc::new(PerturbationInit::new(spec, &params)?);
        let field_mesh = config.field_mesh.build()?;
        let rules = ConeRules::new(config.cone)?;
        let nv = grid.n_v();
        let mut f0 = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
        for s in Species::BOTH {
            for i in 0..grid.mesh.n_nodes() {
                let x = grid.mesh.node(i);
                for k in 0..nv {
                    f0[s.index()][i * nv + k] = init.f_in(s, &x, &grid.quad.node(k));
                }
            }
        }
        let mut fields0 = FieldGrid::zeros(field_mesh.clone());
        for (i, val) in fields0.grid.values.iter_mut().enumerate() {
            let x = field_mesh.node(i);
            let (e, b) = (init.e_in(&x), init.b_in(&x));
            *val = [e[0], e[1], e[2], b[0], b[1], b[2]];
        }
        let (half, height) = (grid.mesh.ax[0].hi(), grid.mesh.ax[2].hi());
        let reach = (0..field_mesh.n_nodes())
            .map(|i| box_distance(&field_mesh.node(i), half, height).1)
            .fold(0.0, f64::max);
        let history = History::new(config.dt, reach + 2.0 * config.dt, f0, fields0);
        let cloud =
            SampleCloud::wall_layer(&params, config.cloud_size, config.cloud_half, config.seed);
        let mut solver = DynamicSolver {
            params,
            init,
            grid: Arc::new(grid),
            table: Arc::new(table),
            steady_fields,
            field_mesh,
            rules,
            history,
            cloud,
            series: DecaySeries::default(),
            step: 0,
            content_scale: [0.0; 2],
            last_outflow: [(0.0, 0.0); 2],
            config,
        };
        let f0 = solver
            .history
            .f_snapshot(0)
            .expect("initial snapshot")
            .clone();
        for s in Species::BOTH {
            let m = solver.params.mass(s);
            solver.content_scale[s.index()] = solver.grid.content(&f0[s.index()]).1;
            // Incoming wall values drop to zero at t = 0+.
            let mut start = f0[s.index()].clone();
            let nv = solver.grid.n_v();
            for i in 0..solver.grid.mesh.n_nodes() {
                if solver.grid.mesh.unindex(i)[2] == 0 {
                    for k in 0..nv {
                        if solver.grid.quad.nodes[k][2] > 0.0 {
                            start[i * nv + k] = 0.0;
                        }
                    }
                }
            }
            solver.last_outflow[s.index()] = solver.grid.outflow_split(&start, m);
        }
        let row = solver.diagnostics(0.0, &f0, None, [0.0; 2], 0.0)?;
        solver.series.rows.push(row);
        Ok(solver)
    }

    pub fn t(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    fn source(&self) -> GridSource<'_> {
        GridSource {
            grid: &self.grid,
            history: &self.history,
            table: &self.table,
            steady: &self.steady_fields,
        }
    }

    /// Perturbation fields with every recorded term at the field-mesh nodes at time `t`.
    pub fn assemble_grid(&self, t: f64) -> Result<(FieldGrid, Vec<(ETerms, BTerms)>)> {
        let src = self.source();
        let terms: Result<Vec<(ETerms, BTerms)>> = (0..self.field_mesh.n_nodes())
            .into_par_iter()
            .map(|i| {
                assemble_fields(
                    &src,
                    Some(&self.init),
                    &self.params,
                    &self.rules,
                    t,
                    &self.field_mesh.node(i),
                )
            })
            .collect();
        let terms = terms?;
        let mut fg = FieldGrid::zeros(self.field_mesh.clone());
        for (val, (e, b)) in fg.grid.values.iter_mut().zip(&terms) {
            let (e, b) = (e.total(), b.total());
            *val = [e[0], e[1], e[2], b[0], b[1], b[2]];
        }
        Ok((fg, terms))
    }

    /// Density at time `t` on the listed spatial nodes and every momentum node, by the
    /// mild formula along exact backward characteristics.
    fn mild_nodes(&self, t: f64, nodes: &[usize]) -> Result<[Vec<Vec<f64>>; 2]> {
        let grid = &self.grid;
        let nv = grid.n_v();
        let mut out: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for s in Species::BOTH {
            let rows: Result<Vec<Vec<f64>>> = nodes
                .par_iter()
                .map(|&i| {
                    let x = grid.mesh.node(i);
                    let mut row = vec![0.0; nv];
                    for (k, val) in row.iter_mut().enumerate() {
                        let v = grid.quad.node(k);
                        if x[2] <= 0.0 && v[2] > 0.0 {
                            continue;
                        }
                        *val = match self.eval_f(s, t, &x, &v) {
                            Ok(f) => f,
                            Err(Error::Grazing { .. }) => 0.0,
                            Err(e) => return Err(e),
                        };
                    }
                    Ok(row)
                })
                .collect();
            out[s.index()] = rows?;
        }
        Ok(out)
    }

    fn scatter(&self, nodes: &[usize], rows: [Vec<Vec<f64>>; 2]) -> [Vec<f64>; 2] {
        let nv = self.grid.n_v();
        let mut out = [vec![0.0; self.grid.len()], vec![0.0; self.grid.len()]];
        for (sp, rows) in rows.into_iter().enumerate() {
            for (&i, row) in nodes.iter().zip(rows) {
                out[sp][i * nv..(i + 1) * nv].copy_from_slice(&row);
            }
        }
        out
    }

    /// Outflow of each species integrated over the step `[t_n, t_n + dt]`: the wall
    /// flux by the trapezoid rule on `outflow_substeps` sub-intervals, the flux through
    /// the other faces by the trapezoid rule on the step.
    fn step_outflow(&self, f_new: &[Vec<f64>; 2]) -> Result<[f64; 2]> {
        let dt = self.config.dt;
        let n = self.config.outflow_substeps.max(1);
        let t0 = self.t();
        let wall: Vec<usize> = (0..self.grid.mesh.n_nodes())
            .filter(|&i| self.grid.mesh.unindex(i)[2] == 0)
            .collect();
        let mut acc = [0.0; 2];
        for s in Species::BOTH {
            let (w1, r1) = self
                .grid
                .outflow_split(&f_new[s.index()], self.params.mass(s));
            let (w0, r0) = self.last_outflow[s.index()];
            acc[s.index()] = 0.5 * (w0 + w1) * dt / n as f64 + 0.5 * (r0 + r1) * dt;
        }
        for j in 1..n {
            let tau = dt * j as f64 / n as f64;
            let partial = self.scatter(&wall, self.mild_nodes(t0 + tau, &wall)?);
            for s in Species::BOTH {
                acc[s.index()] += self
                    .grid
                    .outflow_split(&partial[s.index()], self.params.mass(s))
                    .0
                    * dt
                    / n as f64;
            }
        }
        Ok(acc)
    }

    /// Mild-formula density at `(t, x, v)` from the stored field history.
    pub fn eval_f(&self, s: Species, t: f64, x: &Vec3, v: &Vec3) -> Result<f64> {
        let hist = HistoryField(&self.history);
        let total = SumField {
            a: self.steady_fields.as_ref(),
            b: &hist,
        };
        let grad = |y: &Vec3, u: &Vec3| self.table.grad_at(&self.grid, s, y, u);
        let fin = |y: &Vec3, u: &Vec3| self.init.f_in(s, y, u);
        eval_f_mild(
            &self.params,
            s,
            t,
            x,
            v,
            &total,
            &hist,
            &grad,
            &fin,
            &self.config.trace,
        )
    }

    fn diagnostics(
        &self,
        t: f64,
        f: &[Vec<f64>; 2],
        terms: Option<&[(ETerms, BTerms)]>,
        residual: [f64; 2],
        charge_residual: f64,
    ) -> Result<DecayRow> {
        let start = Instant::now();
        let n = self.history.len() - 1;
        let fields = self.history.field_snapshot(n);
        let grid = &self.grid;
        let nv = grid.n_v();
        let mut sup_wf_grid: f64 = 0.0;
        for s in Species::BOTH {
            for i in 0..grid.mesh.n_nodes() {
                let x = grid.mesh.node(i);
                for k in 0..nv {
                    let val = f[s.index()][i * nv + k];
                    if val != 0.0 {
                        sup_wf_grid = sup_wf_grid.max(
                            cauchy_weight(&self.params, s, &x, &grid.quad.node(k)) * val.abs(),
                        );
                    }
                }
            }
        }
        let cloud: Result<Vec<f64>> = (0..self.cloud.len())
            .into_par_iter()
            .map(|i| {
                let s = self.cloud.species[i];
                let (x, v) = (Vec3::from(self.cloud.xs[i]), Vec3::from(self.cloud.vs[i]));
                match self.eval_f(s, t, &x, &v) {
                    Ok(val) => Ok(cauchy_weight(&self.params, s, &x, &v) * val.abs()),
                    Err(Error::Grazing { .. }) => Ok(0.0),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let sup_wf_cloud = cloud?.into_iter().fold(0.0, f64::max);
        let mut term_sups = vec![0.0; ETerms::NAMES.len() + BTerms::NAMES.len()];
        if let Some(terms) = terms {
            for (e, b) in terms {
                for (j, v) in e.terms().iter().chain(b.terms().iter()).enumerate() {
                    term_sups[j] = f64::max(term_sups[j], v.norm());
                }
            }
        }
        let mut total_sup: f64 = 0.0;
        for i in 0..self.field_mesh.n_nodes() {
            let x = self.field_mesh.node(i);
            let (es, bs) = self.steady_fields.eb(&x);
            let (ep, bp) = fields.eb(&x);
            total_sup = total_sup.max((es + ep).norm()).max((bs + bp).norm());
        }
        let fp = |y: &Vec3, v: &Vec3| self.init.f_in(Species::Plus, y, v);
        let fm = |y: &Vec3, v: &Vec3| self.init.f_in(Species::Minus, y, v);
        let rule = SphereRule::new(self.config.rrcn_theta, self.config.rrcn_phi);
        let rr = if t > 0.0 {
            (0..self.field_mesh.n_nodes())
                .into_par_iter()
                .map(|i| {
                    rrcn(
                        [self.params.m_plus, self.params.m_minus],
                        &fp,
                        &fm,
                        &grid.quad,
                        &rule,
                        t,
                        &self.field_mesh.node(i),
                    )
                })
                .reduce(|| 0.0, f64::max)
        } else {
            0.0
        };
        Ok(DecayRow {
            t,
            sup_e: fields.sup_e(),
            sup_b: fields.sup_b(),
            sup_wf_cloud,
            sup_wf_grid,
            charge_residual,
            species_residual: residual,
            total_field_sup: total_sup,
            exit_bound_regime: total_sup <= self.params.field_bound(),
            rrcn: rr,
            term_sups,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Advances density and fields by one step and records diagnostics.
    pub fn advance(&mut self) -> Result<&DecayRow> {
        let start = Instant::now();
        let dt = self.config.dt;
        let t_new = (self.step + 1) as f64 * dt;
        let all: Vec<usize> = (0..self.grid.mesh.n_nodes()).collect();
        let f_new = self.scatter(&all, self.mild_nodes(t_new, &all)?);
        let outflow = self.step_outflow(&f_new)?;
        let n_old = self.history.len() - 1;
        let f_old = self
            .history
            .f_snapshot(n_old)
            .expect("newest snapshot retained")
            .clone();
        // Fields of the previous step stand in until the new ones are assembled.
        let lagged = self.history.field_snapshot(n_old).clone();
        self.history.push(f_new.clone(), lagged);
        let (fields, terms) = self.assemble_grid(t_new)?;
        self.history.set_newest_fields(fields);
        let mut residual = [0.0; 2];
        let mut charge = 0.0;
        let mut charge_scale = 0.0;
        for s in Species::BOTH {
            let i = s.index();
            let m = self.params.mass(s);
            let (q_old, _) = self.grid.content(&f_old[i]);
            let (q_new, abs_new) = self.grid.content(&f_new[i]);
            self.content_scale[i] = self.content_scale[i].max(abs_new);
            let r = q_new - q_old + outflow[i];
            self.last_outflow[i] = self.grid.outflow_split(&f_new[i], m);
            residual[i] = if self.content_scale[i] > 0.0 {
                r.abs() / self.content_scale[i]
            } else {
                r.abs()
            };
            charge += s.charge() * r;
            charge_scale += self.content_scale[i];
        }
        let charge_residual = if charge_scale > 0.0 {
            charge.abs() / charge_scale
        } else {
            charge.abs()
        };
        self.step += 1;
        let mut row = self.diagnostics(t_new, &f_new, Some(&terms), residual, charge_residual)?;
        row.seconds = start.elapsed().as_secs_f64();
        self.series.rows.push(row);
        Ok(self.series.rows.last().expect("row just pushed"))
    }

    /// Runs to `t_end`.
    pub fn run(mut self) -> Result<DynamicRun> {
        let start = Instant::now();
        for _ in 0..self.config.n_steps() {
            self.advance()?;
        }
        let n = self.history.len() - 1;
        Ok(DynamicRun {
            final_fields: self.history.field_snapshot(n).clone(),
            weighted_norm_cert: self.init.weighted_norm_cert(),
            field_sup_cert: self.init.field_sup_cert(),
            seconds: start.elapsed().as_secs_f64(),
            solver: self,
        })
    }

    /// Fields at `(t, x)` for the newest time, before and after every history entry
    /// outside the backward light cone (widened by the largest mesh cell diagonal and
    /// one step) is shifted by `eps`, and after every entry is shifted. Returns
    /// `(bit-identical under the outside shift, changed under the full shift)`.
    pub fn light_cone_isolation(&self, x: &Vec3, eps: f64) -> Result<(bool, bool)> {
        let t = self.t();
        let diag = |m: &Mesh3| {
            (0..3)
                .map(|a| {
                    m.ax[a]
                        .nodes
                        .windows(2)
                        .map(|w| w[1] - w[0])
                        .fold(0.0, f64::max)
                        .powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        let margin = diag(&self.grid.mesh).max(diag(&self.field_mesh)) + self.config.dt;
        let eval = |history: &History| {
            let src = GridSource {
                grid: &self.grid,
                history,
                table: &self.table,
                steady: &self.steady_fields,
            };
            assemble_fields(&src, Some(&self.init), &self.params, &self.rules, t, x)
        };
        let before = eval(&self.history)?;
        let mut outside = self.history.clone();
        outside.perturb_outside_cone(&self.grid, x, t, margin, eps);
        let after = eval(&outside)?;
        let mut all = self.history.clone();
        all.perturb_outside_cone(&self.grid, x, t, f64::NEG_INFINITY, eps);
        let everything = eval(&all)?;
        Ok((before == after, before != everything))
    }

    /// Charge and current density `[rho, J]` on the phase mesh at the newest step.
    pub fn charge_current(&self) -> Grid<4> {
        let n = self.history.len() - 1;
        let f = self
            .history
            .f_snapshot(n)
            .expect("newest snapshot retained");
        let mut g = Grid::<4>::zeros(self.grid.mesh.clone());
        for s in Species::BOTH {
            let mom = self.grid.moments(&f[s.index()], self.params.mass(s));
            for (acc, m) in g.values.iter_mut().zip(mom) {
                for c in 0..4 {
                    acc[c] += s.charge() * m[c];
                }
            }
        }
        g
    }
}

/// Completed run.
pub struct DynamicRun {
    pub solver: DynamicSolver,
    pub final_fields: FieldGrid,
    pub weighted_norm_cert: f64,
    pub field_sup_cert: f64,
    pub seconds: f64,
}

impl DynamicRun {
    pub fn series(&self) -> &DecaySeries {
        &self.solver.series
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::{ConstantField, FnField, ZeroField};
    use crate::quadrature::gauss_legendre;

    fn small_config() -> DynamicConfig {
        DynamicConfig {
            phase_mesh: SlabSpec {
                half: 1.5,
                n_par: 5,
                height: 0.2,
                n_z: 5,
                first_z: 0.01,
            },
            momentum: MomentumSpec {
                n_radial: 3,
                n_theta: 2,
                n_phi: 4,
                v_max: Some(1.5),
                tail: 1e-14,
                split_polar: true,
            },
            field_mesh: SlabSpec {
                half: 2.0,
                n_par: 3,
                height: 2.0,
                n_z: 3,
                first_z: 0.2,
            },
            dt: 0.2,
            t_end: 0.6,
            cone: ConeSpec {
                dr_max: 0.5,
                n_radial: 2,
                n_band: 2,
                n_phi: 6,
                layer_breaks: [0.02, 0.08],
                wall_n_phi: 8,
                hom_theta: 6,
                hom_phi: 12,
            },
            outflow_substeps: 2,
            cloud_size: 20,
            ..DynamicConfig::default()
        }
    }

    fn solver(spec: PerturbationSpec, config: DynamicConfig) -> DynamicSolver {
        let params = ModelParams::default();
        let grid = DynamicSolver::phase_grid(&params, &config).unwrap();
        let table = SteadyTable::zeros(&grid);
        let fm = config.field_mesh.build().unwrap();
        DynamicSolver::new(
            params,
            Arc::new(FieldGrid::zeros(fm)),
            grid,
            table,
            spec,
            config,
        )
        .unwrap()
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let b = Bump {
            center: Vec3::new(0.1, -0.2, 1.9),
            radius: 1.1,
        };
        let x = Vec3::new(0.4, 0.1, 2.3);
        let h = 1e-5;
        for j in 0..3 {
            let mut e = Vec3::zeros();
            e[j] = h;
            let fd = (b.value(&(x + e)) - b.value(&(x - e))) / (2.0 * h);
            assert!((fd - b.grad(&x)[j]).abs() < 1e-8);
            let fdg = (b.grad(&(x + e)) - b.grad(&(x - e))) / (2.0 * h);
            for i in 0..3 {
                assert!((fdg[i] - b.hessian(&x)[(i, j)]).abs() < 1e-7);
            }
        }
        let peak = b.center + Vec3::new(b.radius / 5f64.sqrt(), 0.0, 0.0);
        assert!((b.grad(&peak).norm() - b.grad_sup()).abs() < 1e-12);
    }

    #[test]
    fn initial_fields_are_divergence_free_with_consistent_time_derivatives() {
        let init =
            PerturbationInit::new(PerturbationSpec::default(), &ModelParams::default()).unwrap();
        let x = Vec3::new(0.3, -0.2, 2.4);
        let h = 1e-5;
        let d = |f: &dyn Fn(&Vec3) -> Vec3, j: usize| {
            let mut e = Vec3::zeros();
            e[j] = h;
            (f(&(x + e)) - f(&(x - e))) / (2.0 * h)
        };
        let curl = |f: &dyn Fn(&Vec3) -> Vec3| {
            let (d0, d1, d2) = (d(f, 0), d(f, 1), d(f, 2));
            Vec3::new(d1[2] - d2[1], d2[0] - d0[2], d0[1] - d1[0])
        };
        let e_in = |y: &Vec3| init.e_in(y);
        let b_in = |y: &Vec3| init.b_in(y);
        let div_e = d(&e_in, 0)[0] + d(&e_in, 1)[1] + d(&e_in, 2)[2];
        let div_b = d(&b_in, 0)[0] + d(&b_in, 1)[1] + d(&b_in, 2)[2];
        assert!(div_e.abs() < 1e-9 && div_b.abs() < 1e-9);
        assert!((curl(&b_in) - init.e_dot(&x)).norm() < 1e-8);
        assert!((-curl(&e_in) - init.b_dot(&x)).norm() < 1e-8);
        for j in 0..3 {
            assert!((d(&e_in, j) - init.grad_e_in(&x).column(j)).norm() < 1e-8);
            assert!((d(&b_in, j) - init.grad_b_in(&x).column(j)).norm() < 1e-8);
        }
        assert!(init.e_in(&x).norm() <= init.field_sup_cert());
    }

    #[test]
    fn charged_initial_density_is_rejected() {
        let spec = PerturbationSpec {
            f_amplitude: [1e-4, 2e-4],
            ..Default::default()
        };
        assert!(matches!(
            PerturbationInit::new(spec, &ModelParams::default()),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn fitted_weights_integrate_the_profile_exactly() {
        for (kappa, h) in [(64.0, 0.004), (64.0, 0.1), (3.0, 0.5), (1e-9, 0.3)] {
            let (a, b) = fitted_cell_weights(kappa, h);
            let exact = -(-kappa * h).exp_m1() / kappa;
            let got = a + b * (-kappa * h).exp();
            assert!(
                (got - exact).abs() < 1e-12 * exact,
                "kappa {kappa} h {h}: {got} vs {exact}"
            );
        }
    }

    #[test]
    fn momentum_stencil_reproduces_node_values() {
        let config = small_config();
        let grid = DynamicSolver::phase_grid(&ModelParams::default(), &config).unwrap();
        let vals: Vec<f64> = (0..grid.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let nv = grid.n_v();
        for i in [0, 7, grid.mesh.n_nodes() - 1] {
            let x = grid.mesh.node(i);
            for k in 0..nv {
                let got = grid.interp(&vals, &x, &grid.quad.node(k));
                assert!(
                    (got - vals[i * nv + k]).abs() < 1e-12,
                    "node {i} momentum {k}"
                );
            }
        }
        // Inside the node range the momentum weights sum to one.
        let st = grid.momentum_stencil(&Vec3::new(0.2, -0.3, 0.4)).unwrap();
        assert!((st.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(grid.momentum_stencil(&Vec3::new(0.0, 0.0, 1.6)).is_none());
    }

    #[test]
    fn zero_initial_data_stay_identically_zero() {
        let mut s = solver(PerturbationSpec::zero(), small_config());
        for _ in 0..3 {
            let row = s.advance().unwrap().clone();
            assert_eq!(row.sup_e, 0.0);
            assert_eq!(row.sup_b, 0.0);
            assert_eq!(row.sup_wf_grid, 0.0);
            assert_eq!(row.sup_wf_cloud, 0.0);
        }
        let n = s.history.len() - 1;
        assert!(s
            .history
            .f_snapshot(n)
            .unwrap()
            .iter()
            .all(|f| f.iter().all(|v| *v == 0.0)));
        assert!(s.history.field_snapshot(n).grid.is_zero());
    }

    #[test]
    fn history_rejects_times_past_the_newest_snapshot() {
        let s = solver(PerturbationSpec::default(), small_config());
        assert!(matches!(
            s.history.f_bracket(0.5),
            Err(Error::HistoryUnderrun { .. })
        ));
        assert!(s.history.f_bracket(0.0).is_ok());
    }

    #[test]
    fn magnetic_terms_have_no_acceleration_or_wall_density_part() {
        assert_eq!(
            BTerms::NAMES,
            ["hom", "neu", "t_direct", "t_image", "b1_direct", "b1_image"]
        );
        assert!(!BTerms::NAMES
            .iter()
            .any(|n| n.starts_with('s') || n.starts_with("b2")));
        assert_eq!(
            term_columns().len(),
            ETerms::NAMES.len() + BTerms::NAMES.len()
        );
    }

    /// Cold static charge of one species, at rest.
    struct ColdCharge {
        quad: MomentumQuadrature,
        blob: Bump,
    }

    impl ConeSource for ColdCharge {
        fn quadrature(&self) -> &MomentumQuadrature {
            &self.quad
        }
        fn support(&self) -> (f64, f64) {
            (0.5, 1.0)
        }
        fn densities(&self, _s: f64, y: &Vec3, out: &mut [Vec<f64>; 2]) -> Result<bool> {
            out[0][0] = self.blob.value(y);
            out[1][0] = 0.0;
            Ok(out[0][0] != 0.0)
        }
        fn fields(&self, _s: f64, _y: &Vec3) -> ConeFields {
            let z = Vec3::zeros();
            ConeFields {
                total_e: z,
                total_b: z,
                pert_e: z,
                pert_b: z,
            }
        }
        fn steady_grad(&self, _sp: Species, _y: &Vec3, _k: usize) -> Vec3 {
            Vec3::zeros()
        }
    }

    #[test]
    fn static_charge_gives_coulomb_field_with_image() {
        let quad = MomentumQuadrature {
            n_radial: 1,
            n_theta: 1,
            n_phi: 1,
            v_max: 1.0,
            split_polar: false,
            nodes: vec![[0.0; 3]],
            weights: vec![1.0],
        };
        let blob = Bump {
            center: Vec3::new(0.0, 0.0, 0.5),
            radius: 0.3,
        };
        let src = ColdCharge { quad, blob };
        let params = ModelParams {
            g: 0.0,
            ..ModelParams::default()
        };
        let spec = ConeSpec {
            dr_max: 0.05,
            n_radial: 4,
            n_band: 12,
            n_phi: 96,
            layer_breaks: [0.2, 0.8],
            wall_n_phi: 8,
            hom_theta: 4,
            hom_phi: 8,
        };
        let rules = ConeRules::new(spec).unwrap();
        let x = Vec3::new(0.7, 0.3, 0.6);
        let (e, b) = assemble_fields(&src, None, &params, &rules, 5.0, &x).unwrap();
        // Oracle: Coulomb field of the blob and of its negative mirror image, by a tensor Gauss rule.
        let (nodes, weights) = gauss_legendre(24);
        let mut oracle = Vec3::zeros();
        for (a, wa) in nodes.iter().zip(&weights) {
            for (bb, wb) in nodes.iter().zip(&weights) {
                for (c, wc) in nodes.iter().zip(&weights) {
                    let y = blob.center + 0.3 * Vec3::new(*a, *bb, *c);
                    let w = wa * wb * wc * 0.027 * blob.value(&y);
                    let d = x - y;
                    let di = x - reflect(&y);
                    oracle += w * (d / d.norm().powi(3) - di / di.norm().powi(3));
                }
            }
        }
        let got = e.total();
        assert!(
            (got - oracle).norm() < 2e-3 * oracle.norm(),
            "got {got:?}, oracle {oracle:?}"
        );
        assert_eq!(b.total(), Vec3::zeros());
        assert_eq!(e.s_acc_direct, Vec3::zeros());
    }

    #[test]
    fn cone_terms_ignore_history_outside_the_cone() {
        let mut s = solver(PerturbationSpec::default(), small_config());
        for _ in 0..2 {
            s.advance().unwrap();
        }
        let t = s.t();
        let x = Vec3::new(0.1, -0.2, 0.1);
        let diag = |m: &Mesh3| {
            (0..3)
                .map(|a| {
                    m.ax[a]
                        .nodes
                        .windows(2)
                        .map(|w| w[1] - w[0])
                        .fold(0.0, f64::max)
                        .powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        let margin = diag(&s.grid.mesh).max(diag(&s.field_mesh)) + s.config.dt;
        let before =
            assemble_fields(&s.source(), Some(&s.init), &s.params, &s.rules, t, &x).unwrap();
        assert_ne!(before.0.total(), Vec3::zeros());
        let grid = s.grid.clone();
        s.history.perturb_outside_cone(&grid, &x, t, margin, 1e-3);
        let after =
            assemble_fields(&s.source(), Some(&s.init), &s.params, &s.rules, t, &x).unwrap();
        assert_eq!(before, after);
        // Perturbing everything does change the result.
        s.history.perturb_outside_cone(&grid, &x, t, -100.0, 1e-3);
        let all = assemble_fields(&s.source(), Some(&s.init), &s.params, &s.rules, t, &x).unwrap();
        assert_ne!(before, all);
    }

    #[test]
    fn neutrality_kernel_cancels_for_identical_species() {
        let quad = MomentumQuadrature::new(6, 6, 8, 3.0);
        let rule = SphereRule::new(8, 16);
        let f = |y: &Vec3, v: &Vec3| {
            (-(y - Vec3::new(0.2, 0.0, 0.5)).norm_squared() - v.norm_squared()).exp()
        };
        let r = rrcn(
            [1.0, 1.0],
            &f,
            &f,
            &quad,
            &rule,
            1.3,
            &Vec3::new(0.1, 0.3, 0.4),
        );
        assert_eq!(r, 0.0);
    }

    #[test]
    fn neutrality_diagnostic_matches_brute_force() {
        let c = Vec3::new(0.2, -0.1, 0.8);
        let fp = |y: &Vec3, v: &Vec3| (-(y - c).norm_squared() - v.norm_squared()).exp();
        let fm =
            |y: &Vec3, v: &Vec3| 0.5 * (-(y - c).norm_squared() - 0.5 * v.norm_squared()).exp();
        let masses = [1.0, 2.0];
        let (t, x) = (1.1, Vec3::new(0.3, 0.2, 0.5));
        let got = rrcn(
            masses,
            &fp,
            &fm,
            &MomentumQuadrature::new(16, 12, 16, 7.0),
            &SphereRule::new(24, 48),
            t,
            &x,
        );
        // Independent spherical-coordinate sums with doubled resolution.
        let (gr, wr) = gauss_legendre(32);
        let (gc, wc) = gauss_legendre(24);
        let (gs, ws) = gauss_legendre(48);
        let n_phi = 32;
        let c_lo = (-x[2] / t).max(-1.0);
        let mut acc = Mat3::zeros();
        for (s, w_s) in gs.iter().zip(&ws) {
            let cs = c_lo + (1.0 - c_lo) * (s + 1.0) / 2.0;
            let ws_ = w_s * (1.0 - c_lo) / 2.0;
            for ip in 0..96 {
                let p = 2.0 * PI * (ip as f64 + 0.5) / 96.0;
                let sn = (1.0 - cs * cs).sqrt();
                let om = Vec3::new(sn * p.cos(), sn * p.sin(), cs);
                let y = x + t * om;
                let wy = ws_ * 2.0 * PI / 96.0 * t * t;
                for (r, w_r) in gr.iter().zip(&wr) {
                    let rv = 3.5 * (r + 1.0);
                    for (cv, w_c) in gc.iter().zip(&wc) {
                        let sv = (1.0 - cv * cv).sqrt();
                        for jp in 0..n_phi {
                            let q = 2.0 * PI * (jp as f64 + 0.3) / n_phi as f64;
                            let v = rv * Vec3::new(sv * q.cos(), sv * q.sin(), *cv);
                            let wv = w_r * 3.5 * rv * rv * w_c * 2.0 * PI / n_phi as f64;
                            let kp = kernel_k(&KernelPoint::new(masses[0], om, v));
                            let km = kernel_k(&KernelPoint::new(masses[1], om, v));
                            acc += wy * wv * (kp * fp(&y, &v) - km * fm(&y, &v));
                        }
                    }
                }
            }
        }
        let oracle = acc.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
        assert!(
            (got - oracle).abs() < 1e-5 * oracle,
            "got {got}, oracle {oracle}"
        );
    }

    #[test]
    fn mild_formula_converges_at_second_order() {
        let params = ModelParams::default();
        let field = FnField(|t: f64, x: &Vec3| {
            let e = 0.01 * Vec3::new(x[0].sin() + t, x[1].cos(), 0.3 * t);
            let b = 0.01 * Vec3::new(0.0, x[2], (x[0] * t).cos());
            (e, b)
        });
        let grad = |y: &Vec3, u: &Vec3| Vec3::new(u[0] * (-y[2]).exp(), u[1] + 1.0, y[0].cos());
        let fin = |y: &Vec3, u: &Vec3| (-(y.norm_squared() + u.norm_squared())).exp();
        let (x, v) = (Vec3::new(0.1, 0.2, 0.5), Vec3::new(0.2, -0.1, 0.3));
        let value = |h: f64| {
            let opts = TraceOptions {
                dt: h,
                min_steps: 1,
                ..TraceOptions::default()
            };
            eval_f_mild(
                &params,
                Species::Minus,
                0.2,
                &x,
                &v,
                &field,
                &field,
                &grad,
                &fin,
                &opts,
            )
            .unwrap()
        };
        let (a, b, c) = (value(0.02), value(0.01), value(0.005));
        let ratio = (a - b) / (b - c);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn mild_formula_without_fields_transports_initial_data() {
        let params = ModelParams::default();
        let fin = |y: &Vec3, u: &Vec3| y[2] + u[0];
        let grad = |_: &Vec3, _: &Vec3| Vec3::new(1.0, 1.0, 1.0);
        let opts = TraceOptions::default();
        let (x, v) = (Vec3::new(0.0, 0.0, 0.6), Vec3::new(0.3, 0.0, 0.1));
        let got = eval_f_mild(
            &params,
            Species::Plus,
            0.1,
            &x,
            &v,
            &ZeroField,
            &ZeroField,
            &grad,
            &fin,
            &opts,
        )
        .unwrap();
        // Gravity alone leaves v1 unchanged; the height follows from the trace.
        let ff = ForceField::new(&params, Species::Plus, &ZeroField);
        let p = propagate(
            &ff,
            0.1,
            &x,
            &v,
            Direction::Backward,
            &opts,
            Some(0.1),
            false,
        )
        .unwrap();
        assert!((got - (p.x_end[2] + 0.3)).abs() < 1e-12);
        // Leaving through the wall first gives zero transported data.
        let low = Vec3::new(0.0, 0.0, 0.01);
        let up = Vec3::new(0.0, 0.0, 0.5);
        let f0 = eval_f_mild(
            &params,
            Species::Plus,
            1.0,
            &low,
            &up,
            &ConstantField {
                e: Vec3::zeros(),
                b: Vec3::zeros(),
            },
            &ZeroField,
            &grad,
            &fin,
            &opts,
        )
        .unwrap();
        assert_eq!(f0, 0.0);
    }
}
