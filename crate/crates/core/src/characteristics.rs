//! Relativistic characteristics under the Lorentz force and gravity,
//! exit times, and trajectory diagnostics (weights, kinetic weight).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{
    energy, is_grazing, vhat, KineticWeight, ModelParams, Species, WeightSpec, EPS_GRAZE,
};
use crate::error::{Error, Result};
use crate::Vec3;

/// A map `(t, x) -> (E, B)`.
pub trait FieldEval: Send + Sync {
    fn eval(&self, t: f64, x: &Vec3) -> Result<(Vec3, Vec3)>;
}

/// Identically vanishing fields.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl FieldEval for ZeroField {
    fn eval(&self, _t: f64, _x: &Vec3) -> Result<(Vec3, Vec3)> {
        Ok((Vec3::zeros(), Vec3::zeros()))
    }
}

/// Spatially and temporally constant fields.
#[derive(Clone, Copy, Debug)]
pub struct ConstantField {
    pub e: Vec3,
    pub b: Vec3,
}

impl FieldEval for ConstantField {
    fn eval(&self, _t: f64, _x: &Vec3) -> Result<(Vec3, Vec3)> {
        Ok((self.e, self.b))
    }
}

/// Fields given by a closure.
pub struct FnField<F>(pub F);

impl<F> FieldEval for FnField<F>
where
    F: Fn(f64, &Vec3) -> (Vec3, Vec3) + Send + Sync,
{
    fn eval(&self, t: f64, x: &Vec3) -> Result<(Vec3, Vec3)> {
        Ok((self.0)(t, x))
    }
}

/// Pointwise sum of two field evaluators.
pub struct SumField<'a> {
    pub a: &'a dyn FieldEval,
    pub b: &'a dyn FieldEval,
}

impl FieldEval for SumField<'_> {
    fn eval(&self, t: f64, x: &Vec3) -> Result<(Vec3, Vec3)> {
        let (e1, b1) = self.a.eval(t, x)?;
        let (e2, b2) = self.b.eval(t, x)?;
        Ok((e1 + e2, b1 + b2))
    }
}

impl<T: FieldEval + ?Sized> FieldEval for Arc<T> {
    fn eval(&self, t: f64, x: &Vec3) -> Result<(Vec3, Vec3)> {
        (**self).eval(t, x)
    }
}

/// Running maximum of `max(|E|, |B|)` seen by a run.
#[derive(Debug, Default)]
pub struct SupMonitor {
    bits: AtomicU64,
}

impl SupMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, val: f64) {
        if val.is_finite() && val > 0.0 {
            self.bits.fetch_max(val.to_bits(), Ordering::Relaxed);
        }
    }

    pub fn get(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::Relaxed))
    }

    pub fn reset(&self) {
        self.bits.store(0, Ordering::Relaxed);
    }
}

/// Force acting on one species: self-consistent fields, ambient fields, gravity.
#[derive(Clone, Copy)]
pub struct ForceField<'a> {
    pub field: &'a dyn FieldEval,
    pub ext_e: Vec3,
    pub ext_b: Vec3,
    pub m: f64,
    pub g: f64,
    pub charge: f64,
    pub monitor: Option<&'a SupMonitor>,
}

impl<'a> ForceField<'a> {
    pub fn new(params: &ModelParams, species: Species, field: &'a dyn FieldEval) -> Self {
        ForceField {
            field,
            ext_e: params.ext_e(),
            ext_b: params.ext_b(),
            m: params.mass(species),
            g: params.g,
            charge: species.charge(),
            monitor: None,
        }
    }

    pub fn with_monitor(mut self, monitor: &'a SupMonitor) -> Self {
        self.monitor = Some(monitor);
        self
    }

    /// Total force at `(t, x, v)`.
    #[inline]
    pub fn force(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<Vec3> {
        let (e, b) = self.field.eval(t, x)?;
        if let Some(mon) = self.monitor {
            mon.record(e.norm().max(b.norm()));
        }
        let vh = vhat(self.m, v);
        let mut f = self.charge * (e + self.ext_e) + self.charge * vh.cross(&(b + self.ext_b));
        f[2] -= self.m * self.g;
        Ok(f)
    }

    /// Normal force at the wall point `(x1, x2, 0)`.
    pub fn boundary_force3(&self, t: f64, x1: f64, x2: f64, v: &Vec3) -> Result<f64> {
        Ok(self.force(t, &Vec3::new(x1, x2, 0.0), v)?[2])
    }
}

/// Right-hand side of the characteristic system: `(dx/ds, dv/ds)`.
pub fn lorentz_rhs(ff: &ForceField, t: f64, x: &Vec3, v: &Vec3) -> Result<(Vec3, Vec3)> {
    Ok((vhat(ff.m, v), ff.force(t, x, v)?))
}

/// One classical RK4 step of signed length `h`.
#[inline]
pub fn rk4_step(ff: &ForceField, t: f64, x: &Vec3, v: &Vec3, h: f64) -> Result<(Vec3, Vec3)> {
    let (k1x, k1v) = lorentz_rhs(ff, t, x, v)?;
    let h2 = 0.5 * h;
    let (k2x, k2v) = lorentz_rhs(ff, t + h2, &(x + h2 * k1x), &(v + h2 * k1v))?;
    let (k3x, k3v) = lorentz_rhs(ff, t + h2, &(x + h2 * k2x), &(v + h2 * k2v))?;
    let (k4x, k4v) = lorentz_rhs(ff, t + h, &(x + h * k3x), &(v + h * k3v))?;
    let h6 = h / 6.0;
    Ok((
        x + h6 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        v + h6 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    ))
}

/// Integrator settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceOptions {
    /// Largest RK4 step.
    pub dt: f64,
    /// Minimum number of steps across the exit-time bound of a trajectory.
    pub min_steps: usize,
    /// Root tolerance on `X3` at exit.
    pub tol: f64,
    /// Exit horizon as a multiple of the exit-time bound.
    pub horizon_factor: f64,
    /// Momentum cap.
    pub v_max: f64,
    pub eps_graze: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            dt: 0.05,
            min_steps: 64,
            tol: 1e-10,
            horizon_factor: 2.0,
            v_max: 1e4,
            eps_graze: EPS_GRAZE,
        }
    }
}

impl TraceOptions {
    fn step_for(&self, bound: f64) -> f64 {
        self.dt.min(bound / self.min_steps.max(1) as f64)
    }
}

/// Time direction of a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Backward,
    Forward,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Backward => -1.0,
            Direction::Forward => 1.0,
        }
    }
}

/// Result of tracing until the wall (or a time cap).
#[derive(Clone, Debug)]
pub struct Propagation {
    /// Elapsed time `|s_end - t|`.
    pub tau: f64,
    pub x_end: Vec3,
    pub v_end: Vec3,
    /// The cap was reached before the wall.
    pub reached_cap: bool,
    /// Recorded `(s, X, V)` nodes including both ends, when requested.
    pub path: Vec<(f64, Vec3, Vec3)>,
}

/// Traces from `(t, x, v)` in the given direction until `X3` reaches zero,
/// or until the elapsed time reaches `cap`.
pub fn propagate(
    ff: &ForceField,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    dir: Direction,
    opts: &TraceOptions,
    cap: Option<f64>,
    record: bool,
) -> Result<Propagation> {
    let sgn = dir.sign();
    let mut path = Vec::new();
    if record {
        path.push((t, *x, *v));
    }
    if is_grazing(ff.m, x, v, opts.eps_graze) {
        return Err(Error::Grazing {
            x3: x[2],
            vhat3: v[2] / energy(ff.m, v),
        });
    }
    // Leaving immediately: on the wall and moving into it in the traced direction.
    if x[2] <= 0.0 && sgn * v[2] <= 0.0 {
        return Ok(Propagation {
            tau: 0.0,
            x_end: *x,
            v_end: *v,
            reached_cap: false,
            path,
        });
    }
    let bound = 16.0 / (5.0 * ff.m * ff.g) * (energy(ff.m, v) + ff.m * ff.g * x[2].max(0.0));
    let horizon = opts.horizon_factor * bound;
    let dt = opts.step_for(bound);
    let mut tau = 0.0;
    let (mut xc, mut vc) = (*x, *v);
    loop {
        let mut h = dt;
        let mut at_cap = false;
        if let Some(c) = cap {
            if tau + h >= c {
                h = c - tau;
                at_cap = true;
            }
        }
        if h <= 0.0 {
            return Ok(Propagation {
                tau,
                x_end: xc,
                v_end: vc,
                reached_cap: true,
                path,
            });
        }
        let s = t + sgn * tau;
        let (xn, vn) = rk4_step(ff, s, &xc, &vc, sgn * h)?;
        let speed = vn.norm();
        if !(speed <= opts.v_max) {
            return Err(Error::StepBlowup {
                speed,
                cap: opts.v_max,
            });
        }
        if xn[2] <= 0.0 {
            let (hr, xr, vr) = refine_root(ff, s, &xc, &vc, sgn, h, opts.tol, tau)?;
            let vh3 = vr[2] / energy(ff.m, &vr);
            if vh3.abs() < opts.eps_graze {
                return Err(Error::Grazing {
                    x3: xr[2],
                    vhat3: vh3,
                });
            }
            tau += hr;
            if record {
                path.push((t + sgn * tau, xr, vr));
            }
            return Ok(Propagation {
                tau,
                x_end: xr,
                v_end: vr,
                reached_cap: false,
                path,
            });
        }
        tau += h;
        xc = xn;
        vc = vn;
        if record {
            path.push((t + sgn * tau, xc, vc));
        }
        if at_cap {
            return Ok(Propagation {
                tau,
                x_end: xc,
                v_end: vc,
                reached_cap: true,
                path,
            });
        }
        if tau > horizon {
            return Err(Error::NoExitWithinHorizon { horizon });
        }
    }
}

/// Relative accuracy of an exit time implied by the height residual.
const EXIT_TIME_REL_TOL: f64 = 1e-13;

/// Locates the partial step `eta` in `(0, h]` at which `X3` vanishes, by a
/// bracketing iteration (false position with bisection safeguard). Stops when
/// `|X3| <= tol` and the implied time error `|X3| / |dX3/ds|` is below
/// `EXIT_TIME_REL_TOL` of the elapsed `tau0 + eta`, or when the bracket collapses.
#[allow(clippy::too_many_arguments)]
fn refine_root(
    ff: &ForceField,
    s: f64,
    x: &Vec3,
    v: &Vec3,
    sgn: f64,
    h: f64,
    tol: f64,
    tau0: f64,
) -> Result<(f64, Vec3, Vec3)> {
    let converged = |fe: f64, ve: &Vec3, eta: f64| {
        let rate = (ve[2] / energy(ff.m, ve)).abs();
        fe.abs() <= tol && fe.abs() <= EXIT_TIME_REL_TOL * (tau0 + eta) * rate
    };
    let eval = |eta: f64| -> Result<(f64, Vec3, Vec3)> {
        let (xe, ve) = rk4_step(ff, s, x, v, sgn * eta)?;
        Ok((xe[2], xe, ve))
    };
    let mut lo = 0.0;
    let mut f_lo = x[2];
    if f_lo <= 0.0 {
        // Starting on the wall: find an interior point above it.
        let mut eta = 0.5 * h;
        let mut found = false;
        for _ in 0..60 {
            let (fe, _, _) = eval(eta)?;
            if fe > 0.0 {
                lo = eta;
                f_lo = fe;
                found = true;
                break;
            }
            eta *= 0.5;
        }
        if !found {
            return Ok((0.0, *x, *v));
        }
    }
    let mut hi = h;
    let (mut f_hi, mut x_hi, mut v_hi) = eval(h)?;
    if converged(f_hi, &v_hi, hi) {
        return Ok((hi, x_hi, v_hi));
    }
    let mut side = 0i32;
    for it in 0..200 {
        let mut eta = if it % 4 == 3 {
            0.5 * (lo + hi)
        } else {
            (lo * f_hi - hi * f_lo) / (f_hi - f_lo)
        };
        if !(eta > lo && eta < hi) {
            eta = 0.5 * (lo + hi);
        }
        let (fe, xe, ve) = eval(eta)?;
        if converged(fe, &ve, eta) || (hi - lo) <= 4.0 * f64::EPSILON * (tau0 + hi) {
            let mut xe = xe;
            xe[2] = xe[2].max(0.0);
            return Ok((eta, xe, ve));
        }
        if fe > 0.0 {
            lo = eta;
            f_lo = fe;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = eta;
            f_hi = fe;
            x_hi = xe;
            v_hi = ve;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
    }
    Ok((hi, x_hi, v_hi))
}

/// Exit data of a phase point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitData {
    pub t_b: f64,
    pub t_f: Option<f64>,
    pub x_b: [f64; 3],
    pub v_b: [f64; 3],
    /// The backward trace reached time zero before touching the wall.
    pub reached_initial: bool,
}

impl ExitData {
    pub fn x_b(&self) -> Vec3 {
        Vec3::from(self.x_b)
    }
    pub fn v_b(&self) -> Vec3 {
        Vec3::from(self.v_b)
    }
}

/// Backward exit time and exit state. With `cap_at_t`, the trace stops at
/// time zero and the result is flagged as reaching the initial data.
pub fn backward_exit(
    ff: &ForceField,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    opts: &TraceOptions,
    cap_at_t: bool,
) -> Result<ExitData> {
    let cap = if cap_at_t { Some(t) } else { None };
    let p = propagate(ff, t, x, v, Direction::Backward, opts, cap, false)?;
    Ok(ExitData {
        t_b: p.tau,
        t_f: None,
        x_b: p.x_end.into(),
        v_b: p.v_end.into(),
        reached_initial: p.reached_cap,
    })
}

/// Forward exit time.
pub fn forward_exit(
    ff: &ForceField,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    opts: &TraceOptions,
) -> Result<f64> {
    Ok(propagate(ff, t, x, v, Direction::Forward, opts, None, false)?.tau)
}

/// Backward and forward exit times together.
pub fn exit_data(
    ff: &ForceField,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    opts: &TraceOptions,
) -> Result<ExitData> {
    let mut d = backward_exit(ff, t, x, v, opts, false)?;
    d.t_f = Some(forward_exit(ff, t, x, v, opts)?);
    Ok(d)
}

/// Closed-form backward exit time under gravity alone.
pub fn ballistic_exit_time(m: f64, g: f64, x: &Vec3, v: &Vec3) -> f64 {
    let mg = m * g;
    let v0 = energy(m, v);
    // (v0 + m g x3)^2 - m^2 - |v_par|^2 expanded to avoid cancellation.
    let rad = v[2] * v[2] + 2.0 * v0 * mg * x[2] + mg * mg * x[2] * x[2];
    let root = rad.max(0.0).sqrt();
    if v[2] > 0.0 {
        let num = 2.0 * v0 * mg * x[2] + mg * mg * x[2] * x[2];
        num / (v[2] + root) / mg
    } else {
        (-v[2] + root) / mg
    }
}

/// Which exit-time estimate applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    /// Time-dependent fields with `max(|E|,|B|) <= m g / 8`.
    Dynamic,
    /// Stationary fields with `max(|E|,|B|) <= m g / 16`.
    Steady,
    /// Ambient fields within the `m g / 16` smallness caps.
    Ambient,
}

impl BoundKind {
    pub fn constant(self) -> f64 {
        match self {
            BoundKind::Dynamic | BoundKind::Ambient => 16.0 / 5.0,
            BoundKind::Steady => 32.0 / 13.0,
        }
    }
}

/// Upper bound on `t_b + t_f`: constant over `m g` times the mechanical energy.
pub fn exit_time_bound(
    params: &ModelParams,
    species: Species,
    x: &Vec3,
    v: &Vec3,
    kind: BoundKind,
) -> f64 {
    let m = params.mass(species);
    kind.constant() / (m * params.g) * params.mechanical_energy(species, x, v)
}

/// Trajectory samples with per-sample diagnostics.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub m: f64,
    pub g: f64,
    pub times: Vec<f64>,
    pub xs: Vec<[f64; 3]>,
    pub vs: Vec<[f64; 3]>,
    pub mech_energy: Vec<f64>,
    pub log_w: Vec<f64>,
    pub alpha_tilde: Vec<Option<f64>>,
    pub hit_boundary: bool,
}

impl TrajectorySample {
    fn from_path(m: f64, g: f64, mut path: Vec<(f64, Vec3, Vec3)>, hit_boundary: bool) -> Self {
        path.sort_by(|a, b| a.0.total_cmp(&b.0));
        path.dedup_by(|a, b| a.0 == b.0);
        let mut s = TrajectorySample {
            m,
            g,
            hit_boundary,
            ..Default::default()
        };
        for (t, x, v) in path {
            s.times.push(t);
            s.mech_energy.push(energy(m, &v) + m * g * x[2]);
            s.xs.push(x.into());
            s.vs.push(v.into());
        }
        s
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x(&self, i: usize) -> Vec3 {
        Vec3::from(self.xs[i])
    }

    pub fn v(&self, i: usize) -> Vec3 {
        Vec3::from(self.vs[i])
    }

    /// Fills the weight and kinetic-weight columns.
    pub fn attach_diagnostics(&mut self, ws: &WeightSpec, kw: Option<&KineticWeight>) {
        self.log_w = (0..self.len())
            .map(|i| ws.log_w(&self.x(i), &self.v(i)))
            .collect();
        self.alpha_tilde = (0..self.len())
            .map(|i| kw.and_then(|k| k.alpha_tilde(self.times[i], &self.x(i), &self.v(i)).ok()))
            .collect();
    }

    fn locate(&self, s: f64) -> Result<(usize, f64)> {
        let n = self.len();
        let (lo, hi) = (self.times[0], self.times[n - 1]);
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if !(s >= lo - slack && s <= hi + slack) {
            return Err(Error::OutOfRange { s, lo, hi });
        }
        let s = s.clamp(lo, hi);
        let i = self
            .times
            .partition_point(|a| *a <= s)
            .saturating_sub(1)
            .min(n - 2);
        let span = self.times[i + 1] - self.times[i];
        Ok((
            i,
            if span > 0.0 {
                ((s - self.times[i]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            },
        ))
    }

    fn interp(&self, col: &[f64], s: f64) -> Result<f64> {
        if self.len() == 1 {
            return Ok(col[0]);
        }
        let (i, f) = self.locate(s)?;
        Ok(col[i] * (1.0 - f) + col[i + 1] * f)
    }

    /// CSV rows `s,x1,x2,x3,v1,v2,v3,energy,log_w,alpha_tilde`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,x1,x2,x3,v1,v2,v3,energy,log_w,alpha_tilde\n");
        for i in 0..self.len() {
            let lw = self.log_w.get(i).copied().unwrap_or(f64::NAN);
            let at = self
                .alpha_tilde
                .get(i)
                .copied()
                .flatten()
                .unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.times[i],
                self.xs[i][0],
                self.xs[i][1],
                self.xs[i][2],
                self.vs[i][0],
                self.vs[i][1],
                self.vs[i][2],
                self.mech_energy[i],
                lw,
                at
            ));
        }
        out
    }
}

/// Integrates from `(t, x, v)` toward `s_target` with fixed RK4 steps,
/// stopping early at the wall.
pub fn integrate(
    ff: &ForceField,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    s_target: f64,
    opts: &TraceOptions,
) -> Result<TrajectorySample> {
    let dir = if s_target >= t {
        Direction::Forward
    } else {
        Direction::Backward
    };
    let span = (s_target - t).abs();
    let mut o = *opts;
    o.horizon_factor = f64::INFINITY;
    o.min_steps = 1;
    let p = propagate(ff, t, x, v, dir, &o, Some(span), true)?;
    Ok(TrajectorySample::from_path(
        ff.m,
        ff.g,
        p.path,
        !p.reached_cap,
    ))
}

/// Samples the whole trajectory through `(t, x, v)` between its backward and
/// forward wall exits.
pub fn full_trajectory(
    ff: &ForceField,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    opts: &TraceOptions,
) -> Result<TrajectorySample> {
    let b = propagate(ff, t, x, v, Direction::Backward, opts, None, true)?;
    let f = propagate(ff, t, x, v, Direction::Forward, opts, None, true)?;
    let mut path = b.path;
    path.extend(f.path);
    Ok(TrajectorySample::from_path(ff.m, ff.g, path, true))
}

/// `w(Z(s2)) / w(Z(s1))` from stored diagnostics (log-linear in between samples).
pub fn weight_ratio(sample: &TrajectorySample, s1: f64, s2: f64) -> Result<f64> {
    if sample.log_w.len() != sample.len() || sample.is_empty() {
        return Err(Error::OutOfRange {
            s: s1,
            lo: f64::NAN,
            hi: f64::NAN,
        });
    }
    let a = sample.interp(&sample.log_w, s1)?;
    let b = sample.interp(&sample.log_w, s2)?;
    Ok((b - a).exp())
}

/// Measured kinetic-weight ratio and the certified envelopes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityLemmaCheck {
    pub ratio: f64,
    /// `exp(10 C |ds| / c0)`.
    pub envelope10: f64,
    /// `exp(20 C |ds| / c0)`.
    pub envelope20: f64,
    pub within10: bool,
    pub within20: bool,
}

/// `alpha_tilde(s2) / alpha_tilde(s1)` against `exp(+-k C |s2 - s1| / c0)` for k = 10, 20.
pub fn velocity_lemma_ratio(
    sample: &TrajectorySample,
    i1: usize,
    i2: usize,
    c_const: f64,
    c0: f64,
) -> Result<VelocityLemmaCheck> {
    let a1 = sample.alpha_tilde.get(i1).copied().flatten();
    let a2 = sample.alpha_tilde.get(i2).copied().flatten();
    let (Some(a1), Some(a2)) = (a1, a2) else {
        return Err(Error::OutOfRange {
            s: i1 as f64,
            lo: 0.0,
            hi: sample.len() as f64,
        });
    };
    if a1 <= 0.0 {
        return Err(Error::Grazing {
            x3: sample.xs[i1][2],
            vhat3: 0.0,
        });
    }
    let ds = (sample.times[i2] - sample.times[i1]).abs();
    let ratio = a2 / a1;
    let env10 = (10.0 * c_const * ds / c0).exp();
    let env20 = (20.0 * c_const * ds / c0).exp();
    let within = |env: f64| ratio <= env * (1.0 + 1e-12) && ratio >= (1.0 - 1e-12) / env;
    Ok(VelocityLemmaCheck {
        ratio,
        envelope10: env10,
        envelope20: env20,
        within10: within(env10),
        within20: within(env20),
    })
}

/// Kinetic weight whose wall force comes from the given fields.
pub fn kinetic_weight_for(
    params: &ModelParams,
    species: Species,
    field: Arc<dyn FieldEval>,
) -> KineticWeight {
    let p = params.clone();
    KineticWeight::new(
        species,
        params.mass(species),
        params.c0,
        Arc::new(move |t, x1, x2, v| {
            let ff = ForceField::new(&p, species, field.as_ref());
            ff.boundary_force3(t, x1, x2, v).unwrap_or(f64::NAN)
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(g: f64) -> ModelParams {
        ModelParams {
            g,
            ..Default::default()
        }
    }

    #[test]
    fn rhs_examples() {
        let p = params(3.0);
        let z = ZeroField;
        let ff = ForceField::new(&p, Species::Plus, &z);
        let (_, dv) = lorentz_rhs(&ff, 0.0, &Vec3::zeros(), &Vec3::zeros()).unwrap();
        assert_eq!(dv, Vec3::new(0.0, 0.0, -3.0));
        let c = ConstantField {
            e: Vec3::new(1.0, 0.0, 0.0),
            b: Vec3::zeros(),
        };
        let ff = ForceField::new(&p, Species::Plus, &c);
        let (_, dv) = lorentz_rhs(&ff, 0.0, &Vec3::zeros(), &Vec3::zeros()).unwrap();
        assert_eq!(dv, Vec3::new(1.0, 0.0, -3.0));
        let c = ConstantField {
            e: Vec3::zeros(),
            b: Vec3::new(0.0, 0.0, 1.0),
        };
        let ff = ForceField::new(&p, Species::Plus, &c);
        let (_, dv) = lorentz_rhs(&ff, 0.0, &Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(dv[1], -1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(dv[2], -3.0);
    }

    #[test]
    fn ballistic_examples() {
        let t = ballistic_exit_time(1.0, 1.0, &Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros());
        assert_relative_eq!(t, 3f64.sqrt(), epsilon = 1e-15);
        assert_eq!(
            ballistic_exit_time(1.0, 1.0, &Vec3::zeros(), &Vec3::new(0.2, 0.0, 0.5)),
            0.0
        );
        let t = ballistic_exit_time(1.0, 2.0, &Vec3::zeros(), &Vec3::new(0.0, 0.0, -1.0));
        assert_relative_eq!(t, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn backward_exit_matches_ballistic() {
        let p = params(1.0);
        let z = ZeroField;
        let ff = ForceField::new(&p, Species::Plus, &z);
        let opts = TraceOptions {
            min_steps: 400,
            ..Default::default()
        };
        let d = backward_exit(
            &ff,
            0.0,
            &Vec3::new(0.0, 0.0, 1.0),
            &Vec3::zeros(),
            &opts,
            false,
        )
        .unwrap();
        assert_relative_eq!(d.t_b, 3f64.sqrt(), max_relative = 1e-8);
        assert!(d.x_b[2].abs() <= 1e-10);
        let up = backward_exit(
            &ff,
            0.0,
            &Vec3::zeros(),
            &Vec3::new(0.0, 0.0, 1.0),
            &opts,
            false,
        )
        .unwrap();
        assert_eq!(up.t_b, 0.0);
    }

    #[test]
    fn grazing_rejected() {
        let p = params(1.0);
        let z = ZeroField;
        let ff = ForceField::new(&p, Species::Plus, &z);
        let r = backward_exit(
            &ff,
            0.0,
            &Vec3::zeros(),
            &Vec3::new(1.0, 0.0, 0.0),
            &TraceOptions::default(),
            false,
        );
        assert!(matches!(r, Err(Error::Grazing { .. })));
    }

    #[test]
    fn bound_examples() {
        let p = params(1.0);
        let x = Vec3::new(0.0, 0.0, 1.0);
        let v = Vec3::zeros();
        assert_relative_eq!(
            exit_time_bound(&p, Species::Plus, &x, &v, BoundKind::Dynamic),
            6.4,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            exit_time_bound(&p, Species::Plus, &x, &v, BoundKind::Steady),
            64.0 / 13.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            exit_time_bound(&p, Species::Plus, &x, &v, BoundKind::Ambient),
            6.4,
            epsilon = 1e-14
        );
    }

    #[test]
    fn gravity_only_integration() {
        let p = params(1.0);
        let z = ZeroField;
        let ff = ForceField::new(&p, Species::Minus, &z);
        let v = Vec3::new(0.3, -0.1, 0.2);
        let s = integrate(
            &ff,
            1.0,
            &Vec3::new(0.0, 0.0, 2.0),
            &v,
            1.5,
            &TraceOptions {
                dt: 0.01,
                ..Default::default()
            },
        )
        .unwrap();
        let last = s.len() - 1;
        assert_relative_eq!(s.v(last)[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(s.v(last)[2], 0.2 - 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.mech_energy[last], s.mech_energy[0], max_relative = 1e-10);
    }

    #[test]
    fn weight_ratio_identity() {
        let p = params(1.0);
        let z = ZeroField;
        let ff = ForceField::new(&p, Species::Plus, &z);
        let mut s = full_trajectory(
            &ff,
            0.0,
            &Vec3::new(0.5, 0.0, 1.0),
            &Vec3::new(0.4, 0.1, 0.0),
            &TraceOptions::default(),
        )
        .unwrap();
        s.attach_diagnostics(&p.weight_spec(Species::Plus), None);
        assert_eq!(weight_ratio(&s, 0.0, 0.0).unwrap(), 1.0);
        assert!(weight_ratio(&s, 100.0, 0.0).is_err());
    }

    #[test]
    fn monitor_tracks_max() {
        let m = SupMonitor::new();
        m.record(0.5);
        m.record(0.25);
        m.record(2.0);
        assert_eq!(m.get(), 2.0);
    }
}
