//! Property tests of the model invariants across modules.

use std::sync::Arc;

use proptest::prelude::*;

use crate::characteristics::{
    backward_exit, full_trajectory, propagate, rk4_step, ConstantField, Direction, FnField,
    ForceField, TraceOptions, ZeroField,
};
use crate::domain::{
    energy, is_grazing, vhat, weight_w, KineticWeight, ModelParams, Species, EPS_GRAZE,
};
use crate::greens::{g_image, grad_g_image, kirchhoff_hom, InitialWaveData, Parity, Wrt};
use crate::io::{decode_steady, encode_steady};
use crate::quadrature::SphereRule;
use crate::steady::{
    BoundaryProfile, MomentumSpec, ProfileSpec, PullBack, RaySpec, SlabSpec, SteadyConfig,
    SteadySolver,
};
use crate::verify::{CheckKind, CheckSpec, Severity};
use crate::Vec3;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn species() -> impl Strategy<Value = Species> {
    prop_oneof![Just(Species::Plus), Just(Species::Minus)]
}

fn above_wall(r: f64, h: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, 0.0..h).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn speed_identity(m in 0.1f64..5.0, v in vec3(50.0)) {
        let lhs = vhat(m, &v).norm() * energy(m, &v);
        prop_assert!((lhs - v.norm()).abs() <= 1e-12 * (1.0 + v.norm()));
    }

    #[test]
    fn weight_dominates_rest_energy(s in species(), x in above_wall(5.0, 3.0), v in vec3(3.0)) {
        let p = ModelParams::default();
        let w = weight_w(&p, s, &x, &v).unwrap();
        prop_assert!(w >= (p.beta * p.mass(s)).exp());
    }

    #[test]
    fn normalized_kinetic_weight_in_unit_interval(
        m in 0.2f64..3.0, f3 in -20.0f64..-1.01, x in above_wall(3.0, 3.0), v in vec3(10.0),
    ) {
        let kw = KineticWeight::constant(Species::Plus, m, 1.0, f3);
        let a = kw.alpha_tilde(0.0, &x, &v).unwrap();
        prop_assert!((0.0..1.0).contains(&a));
        // Continuity away from the grazing set: a small move changes it a little.
        let dx = Vec3::new(1e-7, -1e-7, 1e-7);
        let b = kw.alpha_tilde(0.0, &(x + dx), &(v + dx)).unwrap();
        if kw.alpha(0.0, &x, &v).unwrap() > 1e-3 {
            prop_assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn odd_image_kernel_vanishes_on_the_wall(x in above_wall(5.0, 5.0), y in vec3(5.0)) {
        let yw = Vec3::new(y[0], y[1], 0.0);
        prop_assume!((x - yw).norm() > 1e-6);
        prop_assert_eq!(g_image(Parity::Odd, &x, &yw).unwrap(), 0.0);
    }

    #[test]
    fn even_image_kernel_has_zero_normal_derivative(x in vec3(5.0), y in above_wall(5.0, 5.0)) {
        let xw = Vec3::new(x[0], x[1], 0.0);
        prop_assume!((xw - y).norm() > 0.1);
        let h = 1e-5;
        let up = g_image(Parity::Even, &(xw + Vec3::new(0.0, 0.0, h)), &y).unwrap();
        let dn = g_image(Parity::Even, &(xw - Vec3::new(0.0, 0.0, h)), &y).unwrap();
        let fd = (up - dn) / (2.0 * h);
        let scale = grad_g_image(Parity::Even, &xw, &y, Wrt::X).unwrap().norm().max(1.0 / (xw - y).norm_squared());
        prop_assert!(fd.abs() <= 1e-6 * scale, "fd {} scale {}", fd, scale);
    }

    #[test]
    fn pull_back_is_nonnegative(s in species(), x in above_wall(2.0, 0.5), v in vec3(2.0), e in vec3(0.5), b in vec3(0.5)) {
        let p = ModelParams::default();
        let profile = BoundaryProfile::new(ProfileSpec::default(), &p).unwrap();
        let field = ConstantField { e, b };
        let pb = PullBack::new(&p, &profile, &field, e.norm().max(b.norm()), TraceOptions::default());
        prop_assume!(x[2].abs() + (v[2] / energy(p.mass(s), &v)).abs() > 1e-6);
        prop_assert!(pb.eval(s, &x, &v).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// `v0 + m g X3 - iota E . X` is conserved under constant fields, since
    /// `d/ds (v0 + m g X3) = iota vhat . E` and `d/ds X = vhat`.
    #[test]
    fn energy_law_along_trajectories(s in species(), x in above_wall(1.0, 1.0), v in vec3(2.0), e in vec3(0.5), b in vec3(0.5)) {
        let p = ModelParams::default();
        let m = p.mass(s);
        prop_assume!(x[2] + (v[2] / energy(m, &v)).abs() > 1e-3);
        let field = ConstantField { e, b };
        let ff = ForceField::new(&p, s, &field);
        let opts = TraceOptions { min_steps: 2000, ..TraceOptions::default() };
        let tr = full_trajectory(&ff, 0.0, &x, &v, &opts).unwrap();
        let inv = |k: usize| energy(m, &tr.v(k)) + m * p.g * tr.x(k)[2] - s.charge() * e.dot(&tr.x(k));
        let i0 = inv(0);
        for k in 0..tr.len() {
            prop_assert!((inv(k) - i0).abs() <= 1e-8 * i0.abs());
        }
    }

    #[test]
    fn mechanical_energy_conserved_without_electric_field(s in species(), x in above_wall(1.0, 1.0), v in vec3(2.0), b in vec3(0.5)) {
        let p = ModelParams::default();
        let m = p.mass(s);
        prop_assume!(x[2] + (v[2] / energy(m, &v)).abs() > 1e-3);
        let field = ConstantField { e: Vec3::zeros(), b };
        let ff = ForceField::new(&p, s, &field);
        let tr = full_trajectory(&ff, 0.0, &x, &v, &TraceOptions { min_steps: 2000, ..TraceOptions::default() }).unwrap();
        let e0 = p.mechanical_energy(s, &x, &v);
        for k in 0..tr.len() {
            prop_assert!((p.mechanical_energy(s, &tr.x(k), &tr.v(k)) - e0).abs() <= 1e-8 * e0);
        }
    }

    /// Forward integration from the backward exit state returns to the seed.
    #[test]
    fn time_reversal_recovers_the_seed(s in species(), x in above_wall(1.0, 1.0), v in vec3(2.0), e in vec3(0.5), b in vec3(0.5)) {
        let p = ModelParams::default();
        let m = p.mass(s);
        prop_assume!(x[2] > 1e-3 && (v[2] / energy(m, &v)).abs() > 1e-3);
        let field = ConstantField { e, b };
        let ff = ForceField::new(&p, s, &field);
        let opts = TraceOptions { min_steps: 4000, ..TraceOptions::default() };
        let d = backward_exit(&ff, 0.0, &x, &v, &opts, false).unwrap();
        prop_assume!(!is_grazing(m, &d.x_b(), &d.v_b(), 1e3 * EPS_GRAZE));
        let back = propagate(&ff, -d.t_b, &d.x_b(), &d.v_b(), Direction::Forward, &opts, Some(d.t_b), false).unwrap();
        prop_assert!(back.reached_cap);
        prop_assert!((back.x_end - x).norm() <= 10.0 * opts.tol, "{:e}", (back.x_end - x).norm());
        prop_assert!((back.v_end - v).norm() <= 10.0 * opts.tol * (1.0 + v.norm()), "{:e}", (back.v_end - v).norm());
    }
}

#[test]
fn rk4_error_falls_by_fourth_order() {
    let p = ModelParams::default();
    let field = FnField(|t: f64, x: &Vec3| {
        let e = 0.4 * Vec3::new((x[1] + t).sin(), x[2].cos(), (x[0] - 0.5 * t).sin());
        let b = 0.4 * Vec3::new(x[2].cos(), (x[0] + x[1]).sin(), (0.3 * t).cos());
        (e, b)
    });
    let ff = ForceField::new(&p, Species::Minus, &field);
    let run = |n: usize| {
        let h = 0.4 / n as f64;
        let (mut x, mut v) = (Vec3::new(0.1, 0.2, 1.0), Vec3::new(0.7, -0.4, 0.9));
        for k in 0..n {
            (x, v) = rk4_step(&ff, k as f64 * h, &x, &v, h).unwrap();
        }
        (x, v)
    };
    let (xr, vr) = run(4096);
    let err = |n: usize| {
        let (x, v) = run(n);
        (x - xr).norm() + (v - vr).norm()
    };
    for n in [8, 16, 32] {
        let ratio = err(n) / err(2 * n);
        assert!((12.0..=20.0).contains(&ratio), "n {n} ratio {ratio}");
    }
}

#[test]
fn free_wave_solves_the_wave_equation() {
    // Gaussian data; the d'Alembertian of the Kirchhoff solution on a centered
    // stencil of size h shrinks at second order in h.
    let c = Vec3::new(0.2, -0.1, 0.0);
    let gauss = move |y: &Vec3| (-(y - c).norm_squared()).exp();
    let data = InitialWaveData {
        u0: Arc::new(gauss),
        u1: Arc::new(move |y| 0.5 * gauss(y)),
        grad_u0: Arc::new(move |y| -2.0 * (y - c) * gauss(y)),
        r0: 0.0,
    };
    let rule = SphereRule::new(96, 192);
    let (t, x) = (1.0, Vec3::new(0.3, 0.2, 0.4));
    let u = |t: f64, x: Vec3| kirchhoff_hom(&rule, &data, t, &x, None).unwrap();
    let residual = |h: f64| {
        let mid = u(t, x);
        let utt = (u(t + h, x) - 2.0 * mid + u(t - h, x)) / (h * h);
        let lap: f64 = (0..3)
            .map(|a| {
                let mut e = Vec3::zeros();
                e[a] = h;
                (u(t, x + e) - 2.0 * mid + u(t, x - e)) / (h * h)
            })
            .sum();
        (utt - lap).abs()
    };
    let (r1, r2) = (residual(0.1), residual(0.05));
    let ratio = r1 / r2;
    assert!((3.0..=5.0).contains(&ratio), "{r1:e} {r2:e}");
}

#[test]
fn every_acceptance_criterion_has_one_hard_check() {
    let specs = CheckSpec::defaults();
    let hard: Vec<CheckKind> = specs
        .iter()
        .filter(|c| c.severity == Severity::Hard)
        .map(|c| c.kind)
        .collect();
    assert_eq!(hard.len(), 10);
    let unique: std::collections::BTreeSet<_> = hard.iter().collect();
    assert_eq!(unique.len(), hard.len());
    let kinds: std::collections::BTreeSet<_> = specs.iter().map(|c| c.kind).collect();
    assert_eq!(kinds.len(), CheckKind::ALL.len());
}

fn small_steady_config() -> SteadyConfig {
    SteadyConfig {
        moment_mesh: SlabSpec {
            half: 3.0,
            n_par: 9,
            height: 0.35,
            n_z: 8,
            first_z: 0.004,
        },
        field_mesh: SlabSpec {
            half: 4.0,
            n_par: 9,
            height: 4.0,
            n_z: 9,
            first_z: 0.004,
        },
        momentum: MomentumSpec {
            n_radial: 6,
            n_theta: 4,
            n_phi: 4,
            ..MomentumSpec::default()
        },
        rays: RaySpec {
            n_theta: 6,
            n_phi: 12,
            n_radial: 3,
            n_sub: 3,
            first_piece: 0.002,
        },
        cloud_size: 200,
        ..SteadyConfig::default()
    }
}

#[test]
fn steady_fixed_point_residual_and_snapshot_round_trip() {
    let p = ModelParams::default();
    let solver =
        SteadySolver::new(p.clone(), ProfileSpec::default(), small_steady_config()).unwrap();
    let probe = SteadySolver::new(p, ProfileSpec::default(), small_steady_config()).unwrap();
    let state = solver.run().unwrap();
    assert!(state.report.converged);
    let diag = probe.residual_step(&state).unwrap();
    assert!(
        diag.relative_diff <= 2.0 * state.config.tol,
        "{}",
        diag.relative_diff
    );

    let bytes = encode_steady(&state).unwrap();
    let back = decode_steady(&bytes).unwrap();
    assert_eq!(back.moments, state.moments);
    assert_eq!(back.fields, state.fields);
    assert_eq!(back.report, state.report);
    assert_eq!(back.params, state.params);
    assert_eq!(encode_steady(&back).unwrap(), bytes);
}

#[test]
fn zero_field_pull_back_is_constant_along_gravity_orbits() {
    let p = ModelParams::default();
    let profile = BoundaryProfile::new(ProfileSpec::default(), &p).unwrap();
    let pb = PullBack::new(&p, &profile, &ZeroField, 0.0, TraceOptions::default());
    let ff = ForceField::new(&p, Species::Plus, &ZeroField);
    let (x, v) = (Vec3::new(0.3, 0.1, 0.05), Vec3::new(0.2, -0.1, 0.3));
    let tr = full_trajectory(&ff, 0.0, &x, &v, &TraceOptions::default()).unwrap();
    let f0 = pb.eval(Species::Plus, &x, &v).unwrap();
    assert!(f0 > 0.0);
    for k in 1..tr.len() - 1 {
        let fk = pb.eval(Species::Plus, &tr.x(k), &tr.v(k)).unwrap();
        assert!((fk - f0).abs() <= 1e-6 * f0, "{fk} {f0}");
    }
}
