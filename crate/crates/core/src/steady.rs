//! Steady states by Picard iteration: pull-back densities along steady
//! characteristics, momentum moments on a wall-refined mesh, and image-method
//! field solves.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{backward_exit, FieldEval, ForceField, TraceOptions, ZeroField};
use crate::domain::{energy, is_grazing, vhat, ModelParams, Species};
use crate::error::{Error, Result};
use crate::greens::RayTransform;
use crate::mesh::{Axis, AxisSpec, FieldGrid, Grid, Mesh3};
use crate::quadrature::{GaussRule, MomentumQuadrature};
use crate::Vec3;

/// Analytic inflow profile family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    /// `G = 0`.
    Zero,
    /// `G = A (1 + a . vh) exp(-2 beta v0 - beta <x_par>)` per species, `|a| < 1`.
    Localized {
        amplitude: [f64; 2],
        anisotropy: [[f64; 3]; 2],
    },
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Localized {
            amplitude: [2.0e8, 1.0e8],
            anisotropy: [[0.3, 0.0, 0.0], [0.0, -0.2, 0.0]],
        }
    }
}

/// Inflow profile with certified weighted constants.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryProfile {
    pub spec: ProfileSpec,
    pub beta: f64,
    pub g: f64,
    pub masses: [f64; 2],
}

fn japanese(x1: f64, x2: f64) -> f64 {
    (1.0 + x1 * x1 + x2 * x2).sqrt()
}

impl BoundaryProfile {
    pub fn new(spec: ProfileSpec, params: &ModelParams) -> Result<Self> {
        if let ProfileSpec::Localized {
            amplitude,
            anisotropy,
        } = &spec
        {
            for k in 0..2 {
                if !(amplitude[k] >= 0.0) || !amplitude[k].is_finite() {
                    return Err(Error::ConfigInvalid(format!(
                        "profile amplitude {} must be finite and >= 0",
                        amplitude[k]
                    )));
                }
                let a = Vec3::from(anisotropy[k]).norm();
                if !(a < 1.0) {
                    return Err(Error::ConfigInvalid(format!(
                        "profile anisotropy norm {a} must be < 1"
                    )));
                }
            }
        }
        Ok(BoundaryProfile {
            spec,
            beta: params.beta,
            g: params.g,
            masses: [params.m_plus, params.m_minus],
        })
    }

    pub fn is_zero(&self) -> bool {
        match &self.spec {
            ProfileSpec::Zero => true,
            ProfileSpec::Localized { amplitude, .. } => amplitude.iter().all(|a| *a == 0.0),
        }
    }

    fn coeffs(&self, s: Species) -> (f64, Vec3) {
        match &self.spec {
            ProfileSpec::Zero => (0.0, Vec3::zeros()),
            ProfileSpec::Localized {
                amplitude,
                anisotropy,
            } => (amplitude[s.index()], Vec3::from(anisotropy[s.index()])),
        }
    }

    /// `G(x_par, v)` on the wall.
    pub fn value(&self, s: Species, x1: f64, x2: f64, v: &Vec3) -> f64 {
        let (amp, a) = self.coeffs(s);
        if amp == 0.0 {
            return 0.0;
        }
        let m = self.masses[s.index()];
        let v0 = energy(m, v);
        amp * (1.0 + a.dot(&(v / v0)))
            * (-2.0 * self.beta * v0 - self.beta * japanese(x1, x2)).exp()
    }

    /// `(grad_{x_par} G, grad_v G)`.
    pub fn gradient(&self, s: Species, x1: f64, x2: f64, v: &Vec3) -> ([f64; 2], Vec3) {
        let (amp, a) = self.coeffs(s);
        if amp == 0.0 {
            return ([0.0; 2], Vec3::zeros());
        }
        let m = self.masses[s.index()];
        let v0 = energy(m, v);
        let vh = v / v0;
        let jx = japanese(x1, x2);
        let e = amp * (-2.0 * self.beta * v0 - self.beta * jx).exp();
        let lin = 1.0 + a.dot(&vh);
        // grad_v (a . vh) = (a - (a . vh) vh)/v0; grad_v v0 = vh.
        let gv = e * ((a - a.dot(&vh) * vh) / v0 - 2.0 * self.beta * lin * vh);
        let gx = [
            -self.beta * x1 / jx * e * lin,
            -self.beta * x2 / jx * e * lin,
        ];
        (gx, gv)
    }

    /// Largest value of `G`.
    pub fn sup(&self, s: Species) -> f64 {
        let (amp, a) = self.coeffs(s);
        let m = self.masses[s.index()];
        amp * (1.0 + a.norm()) * (-2.0 * self.beta * m - self.beta).exp()
    }

    /// Certified `sup w(x_par, 0, v) G` with `w = exp(beta v0 + beta |x_par|/2)`.
    pub fn weighted_sup(&self, s: Species) -> f64 {
        let (amp, a) = self.coeffs(s);
        let m = self.masses[s.index()];
        amp * (1.0 + a.norm()) * (-self.beta * m - self.beta * 3f64.sqrt() / 2.0).exp()
    }

    /// Certified `sup w^2 |grad_{x_par, v} G|`.
    pub fn weighted_grad_sup(&self, s: Species) -> f64 {
        let (amp, a) = self.coeffs(s);
        let m = self.masses[s.index()];
        amp * (a.norm() / m + 3.0 * self.beta * (1.0 + a.norm()))
    }

    /// Upper envelope of `G` over exit states with `v0 >= v0_min` and `|x_par| >= r_min`.
    pub fn envelope(&self, s: Species, v0_min: f64, r_min: f64) -> f64 {
        let (amp, a) = self.coeffs(s);
        let m = self.masses[s.index()];
        let v0 = v0_min.max(m);
        let r = r_min.max(0.0);
        amp * (1.0 + a.norm()) * (-2.0 * self.beta * v0 - self.beta * (1.0 + r * r).sqrt()).exp()
    }

    /// Largest sampled ratio of `w G` to its certified constant.
    pub fn sampled_weight_ratio(&self, s: Species, n: usize, seed: u64) -> f64 {
        let cert = self.weighted_sup(s);
        if cert == 0.0 {
            return 0.0;
        }
        let m = self.masses[s.index()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let x1: f64 = rng.gen_range(-4.0..4.0);
            let x2: f64 = rng.gen_range(-4.0..4.0);
            let v = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..2.0),
            );
            let lw = self.beta * energy(m, &v) + self.beta * (x1 * x1 + x2 * x2).sqrt() / 2.0;
            worst = worst.max(lw.exp() * self.value(s, x1, x2, &v) / cert);
        }
        worst
    }
}

/// Bounded concurrent memo cache keyed by quantized phase points.
pub struct MemoCache {
    shards: Vec<Mutex<HashMap<[i64; 7], f64>>>,
    cap_per_shard: usize,
    quantum: f64,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl MemoCache {
    pub fn new(capacity: usize, quantum: f64) -> Self {
        let n = 16;
        MemoCache {
            shards: (0..n).map(|_| Mutex::new(HashMap::new())).collect(),
            cap_per_shard: (capacity / n).max(1),
            quantum,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    fn key(&self, s: Species, x: &Vec3, v: &Vec3) -> [i64; 7] {
        let q = |c: f64| (c / self.quantum).round() as i64;
        [
            s.index() as i64,
            q(x[0]),
            q(x[1]),
            q(x[2]),
            q(v[0]),
            q(v[1]),
            q(v[2]),
        ]
    }

    fn shard(&self, key: &[i64; 7]) -> usize {
        let mut h: u64 = 0xcbf29ce484222325;
        for k in key {
            h ^= *k as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        (h % self.shards.len() as u64) as usize
    }

    pub fn get_or_insert<F: FnOnce() -> Result<f64>>(
        &self,
        s: Species,
        x: &Vec3,
        v: &Vec3,
        f: F,
    ) -> Result<f64> {
        let key = self.key(s, x, v);
        let idx = self.shard(&key);
        if let Some(val) = self.shards[idx].lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(*val);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let val = f()?;
        let mut shard = self.shards[idx].lock().expect("cache lock");
        if shard.len() >= self.cap_per_shard {
            shard.clear();
        }
        shard.insert(key, val);
        Ok(val)
    }

    pub fn stats(&self) -> (u64, u64) {
        (
            self.hits.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
        )
    }
}

/// Counters of one pull-back evaluator.
#[derive(Default)]
pub struct PullBackStats {
    pub traced: AtomicU64,
    pub pruned: AtomicU64,
    pub no_exit: AtomicU64,
}

/// Lazy steady density: `F(x, v) = G(X_par(-t_b), V(-t_b))` under a fixed steady field.
pub struct PullBack<'a> {
    pub params: &'a ModelParams,
    pub profile: &'a BoundaryProfile,
    pub field: &'a dyn FieldEval,
    /// Sup of the self-consistent field, used to certify pruning.
    pub field_sup: f64,
    pub opts: TraceOptions,
    /// Contributions whose certified envelope falls below this are dropped.
    pub prune_abs: f64,
    pub cache: Option<&'a MemoCache>,
    pub stats: PullBackStats,
}

impl<'a> PullBack<'a> {
    pub fn new(
        params: &'a ModelParams,
        profile: &'a BoundaryProfile,
        field: &'a dyn FieldEval,
        field_sup: f64,
        opts: TraceOptions,
    ) -> Self {
        PullBack {
            params,
            profile,
            field,
            field_sup,
            opts,
            prune_abs: 0.0,
            cache: None,
            stats: PullBackStats::default(),
        }
    }

    pub fn with_pruning(mut self, prune_abs: f64) -> Self {
        self.prune_abs = prune_abs;
        self
    }

    pub fn with_cache(mut self, cache: &'a MemoCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Certified bound on `F(x, v)` from the exit-time and energy estimates.
    pub fn envelope(&self, s: Species, x: &Vec3, v: &Vec3) -> Option<f64> {
        let m = self.params.mass(s);
        let g = self.params.g;
        let work = self.field_sup + self.params.ext_e().norm();
        if self.field_sup > self.params.field_bound() || self.params.has_ambient() {
            return None;
        }
        let me = energy(m, v) + m * g * x[2];
        let t_bound = 16.0 / (5.0 * m * g) * me;
        let r_min = (x[0] * x[0] + x[1] * x[1]).sqrt() - t_bound;
        Some(self.profile.envelope(s, me - work * t_bound, r_min))
    }

    pub fn eval(&self, s: Species, x: &Vec3, v: &Vec3) -> Result<f64> {
        if self.profile.is_zero() {
            return Ok(0.0);
        }
        if self.prune_abs > 0.0 {
            if let Some(env) = self.envelope(s, x, v) {
                if env < self.prune_abs {
                    self.stats.pruned.fetch_add(1, Ordering::Relaxed);
                    return Ok(0.0);
                }
            }
        }
        match self.cache {
            Some(c) => c.get_or_insert(s, x, v, || self.trace(s, x, v)),
            None => self.trace(s, x, v),
        }
    }

    fn trace(&self, s: Species, x: &Vec3, v: &Vec3) -> Result<f64> {
        self.stats.traced.fetch_add(1, Ordering::Relaxed);
        let ff = ForceField::new(self.params, s, self.field);
        match backward_exit(&ff, 0.0, x, v, &self.opts, false) {
            Ok(ex) => {
                let xb = ex.x_b();
                Ok(self.profile.value(s, xb[0], xb[1], &ex.v_b()))
            }
            Err(Error::NoExitWithinHorizon { .. }) => {
                self.stats.no_exit.fetch_add(1, Ordering::Relaxed);
                Ok(0.0)
            }
            Err(e) => Err(e),
        }
    }

    /// Central-difference momentum gradient with step `h`.
    pub fn grad_v(&self, s: Species, x: &Vec3, v: &Vec3, h: f64) -> Result<Vec3> {
        let mut g = Vec3::zeros();
        for j in 0..3 {
            let mut e = Vec3::zeros();
            e[j] = h;
            g[j] = (self.eval(s, x, &(v + e))? - self.eval(s, x, &(v - e))?) / (2.0 * h);
        }
        Ok(g)
    }
}

/// `(rho, J)` at `x` by momentum quadrature, `[rho, J1, J2, J3]`.
pub fn moments_at(pb: &PullBack, quads: &[MomentumQuadrature; 2], x: &Vec3) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for s in Species::BOTH {
        let m = pb.params.mass(s);
        let q = &quads[s.index()];
        let sign = s.charge();
        for k in 0..q.len() {
            let v = q.node(k);
            if is_grazing(m, x, &v, pb.opts.eps_graze) {
                continue;
            }
            let f = pb.eval(s, x, &v)?;
            if f == 0.0 {
                continue;
            }
            let w = q.weights[k] * f * sign;
            let vh = vhat(m, &v);
            out[0] += w;
            out[1] += w * vh[0];
            out[2] += w * vh[1];
            out[3] += w * vh[2];
        }
    }
    Ok(out)
}

/// Momentum-quadrature resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumSpec {
    pub n_radial: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    /// Radial cutoff; `None` picks the cutoff where `exp(-beta (v0 - m))` drops below `tail`.
    pub v_max: Option<f64>,
    pub tail: f64,
    /// Separate polar rules on the two hemispheres `v3 < 0` and `v3 > 0`.
    #[serde(default)]
    pub split_polar: bool,
}

impl Default for MomentumSpec {
    fn default() -> Self {
        MomentumSpec {
            n_radial: 10,
            n_theta: 8,
            n_phi: 8,
            v_max: None,
            tail: 1e-14,
            split_polar: false,
        }
    }
}

impl MomentumSpec {
    pub fn build(&self, m: f64, beta: f64) -> MomentumQuadrature {
        let v_max = self
            .v_max
            .unwrap_or_else(|| MomentumQuadrature::v_max_for_tail(beta, m, self.tail));
        if self.split_polar {
            MomentumQuadrature::new_split(self.n_radial, self.n_theta, self.n_phi, v_max)
        } else {
            MomentumQuadrature::new(self.n_radial, self.n_theta, self.n_phi, v_max)
        }
    }
}

/// Spherical resolution of the field solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaySpec {
    pub n_theta: usize,
    pub n_phi: usize,
    pub n_radial: usize,
    pub n_sub: usize,
    pub first_piece: f64,
}

impl Default for RaySpec {
    fn default() -> Self {
        RaySpec {
            n_theta: 12,
            n_phi: 24,
            n_radial: 4,
            n_sub: 5,
            first_piece: 0.002,
        }
    }
}

impl RaySpec {
    pub fn build(&self) -> RayTransform {
        RayTransform::new(
            self.n_theta,
            self.n_phi,
            self.n_radial,
            self.n_sub,
            self.first_piece,
        )
    }
}

/// Symmetric slab mesh `[-half, half]^2 x [0, height]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabSpec {
    pub half: f64,
    pub n_par: usize,
    pub height: f64,
    pub n_z: usize,
    pub first_z: f64,
}

impl SlabSpec {
    pub fn build(&self) -> Result<Mesh3> {
        Ok(Mesh3::new(
            Axis::from_spec(&AxisSpec::Uniform {
                lo: -self.half,
                hi: self.half,
                n: self.n_par,
            })?,
            Axis::from_spec(&AxisSpec::Uniform {
                lo: -self.half,
                hi: self.half,
                n: self.n_par,
            })?,
            Axis::from_spec(&AxisSpec::Stretched {
                hi: self.height,
                n: self.n_z,
                first: self.first_z,
            })?,
        ))
    }
}

/// Steady solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadyConfig {
    /// Mesh carrying `(rho, J)`; covers the region where the density is not negligible.
    pub moment_mesh: SlabSpec,
    /// Mesh carrying `(E, B)`.
    pub field_mesh: SlabSpec,
    pub momentum: MomentumSpec,
    pub rays: RaySpec,
    pub trace: TraceOptions,
    /// Stop when the weighted sup difference, relative to `sup w G`, drops below this.
    pub tol: f64,
    pub max_iters: usize,
    pub cloud_size: usize,
    pub seed: u64,
    /// Pruning threshold relative to `sup G`.
    pub prune_rel: f64,
    pub cache_capacity: usize,
    pub cache_quantum: f64,
    /// Momentum finite-difference step for the gradient diagnostic.
    pub grad_step: f64,
    /// Declared constant in the momentum-gradient bound.
    pub grad_constant: f64,
}

impl Default for SteadyConfig {
    fn default() -> Self {
        SteadyConfig {
            moment_mesh: SlabSpec {
                half: 4.0,
                n_par: 25,
                height: 0.35,
                n_z: 14,
                first_z: 0.004,
            },
            field_mesh: SlabSpec {
                half: 6.0,
                n_par: 24,
                height: 6.0,
                n_z: 24,
                first_z: 0.004,
            },
            momentum: MomentumSpec::default(),
            rays: RaySpec::default(),
            trace: TraceOptions::default(),
            tol: 1e-6,
            max_iters: 12,
            cloud_size: 2000,
            seed: 7,
            prune_rel: 1e-14,
            cache_capacity: 1 << 20,
            cache_quantum: 1e-12,
            grad_step: 1e-4,
            grad_constant: 1.0,
        }
    }
}

/// Fixed phase-space sample cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCloud {
    pub species: Vec<Species>,
    pub xs: Vec<[f64; 3]>,
    pub vs: Vec<[f64; 3]>,
}

impl SampleCloud {
    /// Points concentrated in the wall layer where the steady density lives.
    pub fn wall_layer(params: &ModelParams, n: usize, half: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = SampleCloud {
            species: Vec::with_capacity(n),
            xs: Vec::with_capacity(n),
            vs: Vec::with_capacity(n),
        };
        for i in 0..n {
            let s = if i % 2 == 0 {
                Species::Plus
            } else {
                Species::Minus
            };
            let m = params.mass(s);
            let rate = params.beta * m * params.g;
            let u: f64 = rng.gen_range(1e-12..1.0);
            let x3 = if rng.gen_bool(0.1) {
                0.0
            } else {
                -u.ln() / rate
            };
            let x = [rng.gen_range(-half..half), rng.gen_range(-half..half), x3];
            let mut v;
            loop {
                v = [
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                ];
                if !is_grazing(m, &Vec3::from(x), &Vec3::from(v), 1e-6) {
                    break;
                }
            }
            cloud.species.push(s);
            cloud.xs.push(x);
            cloud.vs.push(v);
        }
        cloud
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Diagnostics of one Picard iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateDiag {
    pub index: usize,
    /// `sup exp(beta |x_par|/2 + beta (v0 + m g x3)/4) |F^l - F^(l-1)|` over the cloud.
    pub weighted_diff: f64,
    /// Same, divided by `max_s sup w G`.
    pub relative_diff: f64,
    pub field_diff: f64,
    pub sup_e: f64,
    pub sup_b: f64,
    /// `max ⟨x⟩^2 |(E, B)|/(min(m) g/16)` over field-mesh nodes.
    pub bootstrap_ratio: f64,
    pub traced: u64,
    pub pruned: u64,
    pub no_exit: u64,
    pub seconds: f64,
}

/// Per-run iteration record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterates: Vec<IterateDiag>,
    /// `d_(l+1)/d_l` for consecutive iterates.
    pub kappa: Vec<f64>,
    pub converged: bool,
    /// Steady and dynamic exit-time constants, reported side by side.
    pub exit_constant_steady: f64,
    pub exit_constant_dynamic: f64,
}

/// Converged (or last) steady state.
pub struct SteadyState {
    pub params: ModelParams,
    pub profile: BoundaryProfile,
    pub config: SteadyConfig,
    pub moments: Grid<4>,
    pub fields: Arc<FieldGrid>,
    pub report: IterationReport,
    pub cache: MemoCache,
}

impl SteadyState {
    /// Pull-back evaluator under the final steady fields.
    pub fn evaluator(&self) -> PullBack<'_> {
        let sup = self.fields.sup_e().max(self.fields.sup_b());
        PullBack::new(
            &self.params,
            &self.profile,
            self.fields.as_ref(),
            sup,
            self.config.trace,
        )
        .with_pruning(self.prune_abs())
        .with_cache(&self.cache)
    }

    pub fn prune_abs(&self) -> f64 {
        prune_abs(&self.profile, self.config.prune_rel)
    }

    /// Momentum gradient of the steady density by central differences.
    pub fn grad_v_f(&self, s: Species, x: &Vec3, v: &Vec3) -> Result<Vec3> {
        self.evaluator().grad_v(s, x, v, self.config.grad_step)
    }
}

fn prune_abs(profile: &BoundaryProfile, rel: f64) -> f64 {
    rel * profile.sup(Species::Plus).max(profile.sup(Species::Minus))
}

/// Electric field of a charge density by the odd image kernel, on the nodes of `mesh`.
pub fn field_e_st(rt: &RayTransform, rho: &Grid<1>, mesh: &Mesh3) -> Grid<3> {
    let half = rho.mesh.ax[0].hi();
    let height = rho.mesh.ax[2].hi();
    let values = (0..mesh.n_nodes())
        .into_par_iter()
        .map(|idx| {
            let x = mesh.node(idx);
            rt.electric_field(&x, half, height, |y| rho.interp(y)[0])
                .into()
        })
        .collect();
    Grid {
        mesh: mesh.clone(),
        values,
    }
}

/// Magnetic field of a current density with odd tangential and even normal extension.
pub fn field_b_st(rt: &RayTransform, current: &Grid<3>, mesh: &Mesh3) -> Grid<3> {
    let half = current.mesh.ax[0].hi();
    let height = current.mesh.ax[2].hi();
    let values = (0..mesh.n_nodes())
        .into_par_iter()
        .map(|idx| {
            let x = mesh.node(idx);
            rt.magnetic_field(&x, half, height, |y| Vec3::from(current.interp(y)))
                .into()
        })
        .collect();
    Grid {
        mesh: mesh.clone(),
        values,
    }
}

/// Both fields from `[rho, J]` in one pass.
pub fn solve_fields(rt: &RayTransform, moments: &Grid<4>, mesh: &Mesh3) -> FieldGrid {
    let half = moments.mesh.ax[0].hi();
    let height = moments.mesh.ax[2].hi();
    if moments.is_zero() {
        return FieldGrid::zeros(mesh.clone());
    }
    let values = (0..mesh.n_nodes())
        .into_par_iter()
        .map(|idx| {
            let x = mesh.node(idx);
            let (e, b) = rt.fields(&x, half, height, |y| moments.interp(y));
            [e[0], e[1], e[2], b[0], b[1], b[2]]
        })
        .collect();
    FieldGrid {
        grid: Grid {
            mesh: mesh.clone(),
            values,
        },
    }
}

/// Moments of a pull-back density on every node of `mesh`.
pub fn moment_grid(
    pb: &PullBack,
    quads: &[MomentumQuadrature; 2],
    mesh: &Mesh3,
) -> Result<Grid<4>> {
    let values: Result<Vec<[f64; 4]>> = (0..mesh.n_nodes())
        .into_par_iter()
        .map(|idx| moments_at(pb, quads, &mesh.node(idx)))
        .collect();
    Ok(Grid {
        mesh: mesh.clone(),
        values: values?,
    })
}

/// Cloud values of a pull-back density.
pub fn cloud_values(pb: &PullBack, cloud: &SampleCloud) -> Result<Vec<f64>> {
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            pb.eval(
                cloud.species[i],
                &Vec3::from(cloud.xs[i]),
                &Vec3::from(cloud.vs[i]),
            )
        })
        .collect()
}

/// Weight `exp(beta |x_par|/2 + beta (v0 + m g x3)/4)` of the Cauchy monitor.
pub fn cauchy_weight(params: &ModelParams, s: Species, x: &Vec3, v: &Vec3) -> f64 {
    let m = params.mass(s);
    let b = params.beta;
    (b * (x[0] * x[0] + x[1] * x[1]).sqrt() / 2.0 + b * (energy(m, v) + m * params.g * x[2]) / 4.0)
        .exp()
}

/// Weight `exp(beta |x_par|/2 + beta v0/2 + m g beta x3/2)` of the steady sup bound.
pub fn steady_weight(params: &ModelParams, s: Species, x: &Vec3, v: &Vec3) -> f64 {
    let m = params.mass(s);
    let b = params.beta;
    (b * (x[0] * x[0] + x[1] * x[1]).sqrt() / 2.0
        + b * energy(m, v) / 2.0
        + m * params.g * b * x[2] / 2.0)
        .exp()
}

/// `max ⟨x⟩^2 |(E, B)|/(min(m) g/16)` over mesh nodes.
pub fn bootstrap_ratio(params: &ModelParams, fields: &FieldGrid) -> f64 {
    let cap = params.min_mass() * params.g / 16.0;
    let mesh = &fields.grid.mesh;
    (0..mesh.n_nodes())
        .map(|idx| {
            let x = mesh.node(idx);
            let v = &fields.grid.values[idx];
            let e = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let b = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5]).sqrt();
            e.max(b) * (1.0 + x.norm_squared()) / cap
        })
        .fold(0.0, f64::max)
}

struct Iterate {
    fields: Arc<FieldGrid>,
    moments: Grid<4>,
    cloud: Vec<f64>,
}

/// One Picard step: the density under `prev_fields`, its moments and fields,
/// and the iterate diagnostics against `prev_cloud`.
#[allow(clippy::too_many_arguments)]
fn picard_inner(
    params: &ModelParams,
    profile: &BoundaryProfile,
    cfg: &SteadyConfig,
    quads: &[MomentumQuadrature; 2],
    rt: &RayTransform,
    moment_mesh: &Mesh3,
    field_mesh: &Mesh3,
    cloud: &SampleCloud,
    prev_fields: &FieldGrid,
    prev_cloud: &[f64],
    index: usize,
) -> Result<(Iterate, IterateDiag)> {
    let start = Instant::now();
    let sup = prev_fields.sup_e().max(prev_fields.sup_b());
    let cache = MemoCache::new(cfg.cache_capacity, cfg.cache_quantum);
    let pb = PullBack::new(params, profile, prev_fields, sup, cfg.trace)
        .with_pruning(prune_abs(profile, cfg.prune_rel))
        .with_cache(&cache);
    let moments = moment_grid(&pb, quads, moment_mesh)?;
    let fields = solve_fields(rt, &moments, field_mesh);
    let values = cloud_values(&pb, cloud)?;
    let mut wd: f64 = 0.0;
    for i in 0..cloud.len() {
        let w = cauchy_weight(
            params,
            cloud.species[i],
            &Vec3::from(cloud.xs[i]),
            &Vec3::from(cloud.vs[i]),
        );
        wd = wd.max(w * (values[i] - prev_cloud[i]).abs());
    }
    let norm = profile
        .weighted_sup(Species::Plus)
        .max(profile.weighted_sup(Species::Minus));
    let field_diff = fields
        .grid
        .values
        .iter()
        .zip(&prev_fields.grid.values)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let diag = IterateDiag {
        index,
        weighted_diff: wd,
        relative_diff: if norm > 0.0 { wd / norm } else { wd },
        field_diff,
        sup_e: fields.sup_e(),
        sup_b: fields.sup_b(),
        bootstrap_ratio: bootstrap_ratio(params, &fields),
        traced: pb.stats.traced.load(Ordering::Relaxed),
        pruned: pb.stats.pruned.load(Ordering::Relaxed),
        no_exit: pb.stats.no_exit.load(Ordering::Relaxed),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((
        Iterate {
            fields: Arc::new(fields),
            moments,
            cloud: values,
        },
        diag,
    ))
}

/// Context shared by all Picard steps of a run.
pub struct SteadySolver {
    pub params: ModelParams,
    pub profile: BoundaryProfile,
    pub config: SteadyConfig,
    pub quads: [MomentumQuadrature; 2],
    pub rays: RayTransform,
    pub moment_mesh: Mesh3,
    pub field_mesh: Mesh3,
    pub cloud: SampleCloud,
}

impl SteadySolver {
    pub fn new(
        params: ModelParams,
        profile_spec: ProfileSpec,
        config: SteadyConfig,
    ) -> Result<Self> {
        params.validate()?;
        if !(config.tol > 0.0) || config.max_iters == 0 {
            return Err(Error::ConfigInvalid(
                "steady tol must be > 0 and max_iters >= 1".into(),
            ));
        }
        let profile = BoundaryProfile::new(profile_spec, &params)?;
        let quads = [
            config.momentum.build(params.m_plus, params.beta),
            config.momentum.build(params.m_minus, params.beta),
        ];
        let rays = config.rays.build();
        let moment_mesh = config.moment_mesh.build()?;
        let field_mesh = config.field_mesh.build()?;
        let cloud = SampleCloud::wall_layer(
            &params,
            config.cloud_size,
            config.moment_mesh.half * 0.75,
            config.seed,
        );
        Ok(SteadySolver {
            params,
            profile,
            config,
            quads,
            rays,
            moment_mesh,
            field_mesh,
            cloud,
        })
    }

    /// Runs Picard steps from the zero iterate until the relative weighted
    /// difference drops below `tol`.
    pub fn run(self) -> Result<SteadyState> {
        let mut report = IterationReport {
            exit_constant_steady: 32.0 / 13.0,
            exit_constant_dynamic: 16.0 / 5.0,
            ..Default::default()
        };
        let mut current = Iterate {
            fields: Arc::new(FieldGrid::zeros(self.field_mesh.clone())),
            moments: Grid::zeros(self.moment_mesh.clone()),
            cloud: vec![0.0; self.cloud.len()],
        };
        for l in 1..=self.config.max_iters {
            let (next, diag) = self.step(&current, l)?;
            let done = diag.relative_diff <= self.config.tol;
            if let Some(prev) = report.iterates.last() {
                report.kappa.push(if prev.weighted_diff > 0.0 {
                    diag.weighted_diff / prev.weighted_diff
                } else {
                    0.0
                });
            }
            report.iterates.push(diag);
            current = next;
            if done {
                report.converged = true;
                break;
            }
        }
        let state = SteadyState {
            params: self.params.clone(),
            profile: self.profile.clone(),
            config: self.config.clone(),
            moments: current.moments,
            fields: current.fields,
            report,
            cache: MemoCache::new(self.config.cache_capacity, self.config.cache_quantum),
        };
        if !state.report.converged {
            let last = state
                .report
                .iterates
                .last()
                .map(|d| d.relative_diff)
                .unwrap_or(f64::NAN);
            return Err(Error::NoConvergence {
                iters: self.config.max_iters,
                last,
            });
        }
        Ok(state)
    }

    fn step(&self, it: &Iterate, index: usize) -> Result<(Iterate, IterateDiag)> {
        picard_inner(
            &self.params,
            &self.profile,
            &self.config,
            &self.quads,
            &self.rays,
            &self.moment_mesh,
            &self.field_mesh,
            &self.cloud,
            &it.fields,
            &it.cloud,
            index,
        )
    }

    /// One more Picard step from a converged state; returns its diagnostics.
    pub fn residual_step(&self, state: &SteadyState) -> Result<IterateDiag> {
        let pb = state.evaluator();
        let cloud = cloud_values(&pb, &self.cloud)?;
        let it = Iterate {
            fields: state.fields.clone(),
            moments: state.moments.clone(),
            cloud,
        };
        // The cloud values above are the converged density; one step recomputes them under the final fields.
        let (_, diag) = picard_inner(
            &self.params,
            &self.profile,
            &self.config,
            &self.quads,
            &self.rays,
            &self.moment_mesh,
            &self.field_mesh,
            &self.cloud,
            &it.fields,
            &it.cloud,
            state.report.iterates.len() + 1,
        )?;
        Ok(diag)
    }
}

/// Runs the steady solver.
pub fn run_steady(
    params: ModelParams,
    profile: ProfileSpec,
    config: SteadyConfig,
) -> Result<SteadyState> {
    SteadySolver::new(params, profile, config)?.run()
}

/// Picard step from the zero iterate, exposed for checks on trivial data.
pub fn picard_step_from_zero(solver: &SteadySolver) -> Result<IterateDiag> {
    let zero = Iterate {
        fields: Arc::new(FieldGrid::zeros(solver.field_mesh.clone())),
        moments: Grid::zeros(solver.moment_mesh.clone()),
        cloud: vec![0.0; solver.cloud.len()],
    };
    Ok(solver.step(&zero, 1)?.1)
}

/// Sup over the cloud of the steady weight times `F`, divided by `max_s sup w G`.
pub fn weighted_sup_ratio(state: &SteadyState, cloud: &SampleCloud) -> Result<f64> {
    let pb = state.evaluator();
    let vals = cloud_values(&pb, cloud)?;
    let cert = state
        .profile
        .weighted_sup(Species::Plus)
        .max(state.profile.weighted_sup(Species::Minus));
    if cert == 0.0 {
        return Ok(if vals.iter().all(|v| *v == 0.0) {
            0.0
        } else {
            f64::INFINITY
        });
    }
    let mut worst: f64 = 0.0;
    for i in 0..cloud.len() {
        let w = steady_weight(
            &state.params,
            cloud.species[i],
            &Vec3::from(cloud.xs[i]),
            &Vec3::from(cloud.vs[i]),
        );
        worst = worst.max(w * vals[i].abs() / cert);
    }
    Ok(worst)
}

/// Sup over the cloud of `w |grad_v F|` divided by `max_s sup w^2 |grad G|`.
pub fn momentum_gradient_ratio(state: &SteadyState, cloud: &SampleCloud) -> Result<f64> {
    let pb = state.evaluator();
    let cert = state
        .profile
        .weighted_grad_sup(Species::Plus)
        .max(state.profile.weighted_grad_sup(Species::Minus));
    let h = state.config.grad_step;
    let ratios: Result<Vec<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let s = cloud.species[i];
            let x = Vec3::from(cloud.xs[i]);
            let v = Vec3::from(cloud.vs[i]);
            if x[2] < 2.0 * h {
                return Ok(0.0);
            }
            let gv = pb.grad_v(s, &x, &v, h)?;
            let m = state.params.mass(s);
            let w = (state.params.beta * (energy(m, &v) + m * state.params.g * x[2])
                + state.params.beta * (x[0] * x[0] + x[1] * x[1]).sqrt() / 2.0)
                .exp();
            Ok(w * gv.norm())
        })
        .collect();
    let worst = ratios?.into_iter().fold(0.0, f64::max);
    Ok(if cert > 0.0 { worst / cert } else { worst })
}

/// Boundary-condition residuals on the wall nodes of the field mesh, relative
/// to the field sup: `(max |E1|,|E2|, max |B3|)/sup`.
pub fn wall_residuals(fields: &FieldGrid) -> (f64, f64) {
    let mesh = &fields.grid.mesh;
    let scale = fields.sup_e().max(fields.sup_b());
    let mut e_par: f64 = 0.0;
    let mut b_n: f64 = 0.0;
    for idx in 0..mesh.n_nodes() {
        if mesh.unindex(idx)[2] == 0 {
            let v = &fields.grid.values[idx];
            e_par = e_par.max(v[0].abs()).max(v[1].abs());
            b_n = b_n.max(v[5].abs());
        }
    }
    if scale > 0.0 {
        (e_par / scale, b_n / scale)
    } else {
        (e_par, b_n)
    }
}

/// Net flux of `J` through the faces of the box `[c - h, c + h]^2 x [z0, z0 + hz]`
/// by Gauss quadrature on each face, with the current computed directly by
/// momentum quadrature. Returns `(|net|, sum of |J . n| over faces)`.
pub fn box_flux(
    pb: &PullBack,
    quads: &[MomentumQuadrature; 2],
    c: [f64; 2],
    h: f64,
    z0: f64,
    hz: f64,
    n_face: usize,
) -> Result<(f64, f64)> {
    let gr = GaussRule::new(n_face);
    let lo = [c[0] - h, c[1] - h, z0];
    let hi = [c[0] + h, c[1] + h, z0 + hz];
    let mut net = 0.0;
    let mut abs = 0.0;
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for (side, sign) in [(lo[axis], -1.0), (hi[axis], 1.0)] {
            let pts: Vec<(Vec3, f64)> = gr
                .on(lo[a], hi[a])
                .flat_map(|(pa, wa)| {
                    gr.on(lo[b], hi[b]).map(move |(pb_, wb)| {
                        let mut x = Vec3::zeros();
                        x[axis] = side;
                        x[a] = pa;
                        x[b] = pb_;
                        (x, wa * wb)
                    })
                })
                .collect();
            let vals: Result<Vec<f64>> = pts
                .par_iter()
                .map(|(x, w)| Ok(w * moments_at(pb, quads, x)?[axis + 1]))
                .collect();
            for v in vals? {
                net += sign * v;
                abs += v.abs();
            }
        }
    }
    Ok((net.abs(), abs))
}

/// Field evaluator that is zero everywhere, for the zeroth iterate.
pub fn zero_field() -> ZeroField {
    ZeroField
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn profile_certified_constants_hold_on_samples() {
        let p = ModelParams::default();
        let prof = BoundaryProfile::new(ProfileSpec::default(), &p).unwrap();
        for s in Species::BOTH {
            assert!(prof.sampled_weight_ratio(s, 20000, 3) <= 1.0);
        }
    }

    #[test]
    fn profile_gradient_matches_finite_difference() {
        let p = ModelParams::default();
        let prof = BoundaryProfile::new(ProfileSpec::default(), &p).unwrap();
        let v = Vec3::new(0.2, -0.1, 0.3);
        let (gx, gv) = prof.gradient(Species::Plus, 0.4, -0.2, &v);
        let h = 1e-6;
        for j in 0..3 {
            let mut e = Vec3::zeros();
            e[j] = h;
            let fd = (prof.value(Species::Plus, 0.4, -0.2, &(v + e))
                - prof.value(Species::Plus, 0.4, -0.2, &(v - e)))
                / (2.0 * h);
            assert_relative_eq!(gv[j], fd, max_relative = 1e-6);
        }
        let fd = (prof.value(Species::Plus, 0.4 + h, -0.2, &v)
            - prof.value(Species::Plus, 0.4 - h, -0.2, &v))
            / (2.0 * h);
        assert_relative_eq!(gx[0], fd, max_relative = 1e-6);
    }

    #[test]
    fn zero_profile_gives_zero_density() {
        let p = ModelParams::default();
        let prof = BoundaryProfile::new(ProfileSpec::Zero, &p).unwrap();
        let pb = PullBack::new(&p, &prof, &ZeroField, 0.0, TraceOptions::default());
        assert_eq!(
            pb.eval(
                Species::Plus,
                &Vec3::new(0.0, 0.0, 0.1),
                &Vec3::new(0.1, 0.0, 0.2)
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn gravity_only_pull_back_matches_ballistic() {
        let p = ModelParams::default();
        let prof = BoundaryProfile::new(ProfileSpec::default(), &p).unwrap();
        let mut opts = TraceOptions::default();
        opts.min_steps = 400;
        let pb = PullBack::new(&p, &prof, &ZeroField, 0.0, opts);
        let x = Vec3::new(0.3, -0.1, 0.05);
        let v = Vec3::new(0.4, 0.2, -0.1);
        let m = 1.0;
        let mg = m * p.g;
        let tb = crate::characteristics::ballistic_exit_time(m, p.g, &x, &v);
        let a = (m * m + v[0] * v[0] + v[1] * v[1]).sqrt();
        let disp = (((v[2] + mg * tb) / a).asinh() - (v[2] / a).asinh()) / mg;
        let xb = [x[0] - v[0] * disp, x[1] - v[1] * disp];
        let vb = Vec3::new(v[0], v[1], v[2] + mg * tb);
        let oracle = prof.value(Species::Plus, xb[0], xb[1], &vb);
        assert_relative_eq!(
            pb.eval(Species::Plus, &x, &v).unwrap(),
            oracle,
            max_relative = 1e-8
        );
    }

    #[test]
    fn species_cancel_for_equal_profiles() {
        let p = ModelParams::default();
        let prof = BoundaryProfile::new(
            ProfileSpec::Localized {
                amplitude: [1e8, 1e8],
                anisotropy: [[0.2, 0.0, 0.0]; 2],
            },
            &p,
        )
        .unwrap();
        let pb = PullBack::new(&p, &prof, &ZeroField, 0.0, TraceOptions::default());
        let quads = [
            MomentumSpec::default().build(1.0, p.beta),
            MomentumSpec::default().build(1.0, p.beta),
        ];
        let m = moments_at(&pb, &quads, &Vec3::new(0.1, 0.0, 0.01)).unwrap();
        assert!(
            m.iter().all(|c| c.abs() < 1e-12 * prof.sup(Species::Plus)),
            "{m:?}"
        );
    }
}
