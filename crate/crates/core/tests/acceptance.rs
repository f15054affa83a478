//! Acceptance suite: every criterion at its stated size and tolerance, one
//! pass/fail line each, with the wall time against its budget. Exits nonzero
//! when any criterion fails.

use std::time::Instant;

use halfspace_vm::domain::ModelParams;
use halfspace_vm::dynamic::{DynamicConfig, PerturbationSpec};
use halfspace_vm::steady::{ProfileSpec, SteadyConfig, SteadyState};
use halfspace_vm::verify::{
    check_dynamic, check_exit_times, check_free_wave_decay, check_kernel_bounds,
    check_kernel_identities, check_magnetic_structure, check_moment_decay, check_steady,
    check_velocity_lemma, check_weight_comparison, weight_comparison_params, CheckKind,
    CheckReport, CheckSpec, KERNEL_MASSES, KERNEL_V_MAX, MOMENT_BETAS,
};

struct Outcome {
    passed: bool,
    line: String,
}

fn summarize(
    index: usize,
    title: &str,
    report: &CheckReport,
    budget_s: f64,
    seconds: f64,
    extra: &str,
) -> Outcome {
    let in_budget = seconds <= budget_s;
    let passed = report.passed() && in_budget;
    let mut line = format!(
        "{} criterion {index:>2} {title}: samples={} violations={} worst_ratio={:.4e} time={seconds:.1}s/{budget_s:.0}s",
        if passed { "PASS" } else { "FAIL" },
        report.samples,
        report.violations,
        report.worst_ratio,
    );
    if !in_budget {
        line.push_str(" over-budget");
    }
    if let Some(e) = &report.error {
        line.push_str(&format!(" error={e}"));
    }
    if !extra.is_empty() {
        line.push(' ');
        line.push_str(extra);
    }
    Outcome { passed, line }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn env(report: &CheckReport, key: &str) -> f64 {
    report.envelope.get(key).copied().unwrap_or(f64::NAN)
}

fn main() {
    let params = ModelParams::default();
    let spec = CheckSpec::default_for;
    let mut outcomes = Vec::new();
    let mut emit = |o: Outcome| {
        println!("{}", o.line);
        outcomes.push(o.passed);
    };

    let (r, s) = timed(|| {
        check_kernel_identities(
            &spec(CheckKind::KernelIdentities),
            &KERNEL_MASSES,
            KERNEL_V_MAX,
        )
    });
    let extra = format!(
        "closed_form_max={:e} divergence_fd_max={:.2e} directional_fd_max={:.2e}",
        env(&r, "divergence_closed_form"),
        env(&r, "divergence_residual"),
        env(&r, "directional_residual")
    );
    emit(summarize(
        1,
        "kernel cancellation identities",
        &r,
        30.0,
        s,
        &extra,
    ));

    let (r, s) =
        timed(|| check_kernel_bounds(&spec(CheckKind::KernelBounds), &KERNEL_MASSES, KERNEL_V_MAX));
    emit(summarize(2, "kernel sup bounds", &r, 120.0, s, ""));

    let (r, s) = timed(|| check_exit_times(&spec(CheckKind::ExitTimes), &params));
    let extra = format!(
        "ballistic_rel_err_max={:.2e}",
        env(&r, "max_ballistic_relative_error")
    );
    emit(summarize(3, "exit-time bounds", &r, 180.0, s, &extra));

    let (r, s) = timed(|| {
        check_weight_comparison(
            &spec(CheckKind::WeightComparison),
            &weight_comparison_params(),
        )
    });
    emit(summarize(4, "weight comparison", &r, 60.0, s, ""));

    let (hard, s1) = timed(|| check_velocity_lemma(&spec(CheckKind::VelocityLemma), &params));
    let (soft, s2) = timed(|| check_velocity_lemma(&spec(CheckKind::VelocityLemmaTight), &params));
    let extra = format!(
        "measured_C={:.4} c0={:.4} tight_envelope_violations={} (reported only)",
        env(&hard, "measured_c"),
        env(&hard, "c0"),
        soft.violations
    );
    emit(summarize(
        5,
        "velocity lemma",
        &hard,
        120.0,
        s1 + s2,
        &extra,
    ));

    let (r, s) =
        timed(|| check_moment_decay(&spec(CheckKind::MomentDecay), &MOMENT_BETAS, &KERNEL_MASSES));
    emit(summarize(6, "moment decay", &r, 10.0, s, ""));

    let (r, s) = timed(|| check_free_wave_decay(&spec(CheckKind::FreeWaveDecay)));
    let extra = format!(
        "measured_K={:.4} cap_rel_err_max={:.2e}",
        env(&r, "measured_k"),
        env(&r, "max_cap_relative_error")
    );
    emit(summarize(7, "free-wave decay", &r, 60.0, s, &extra));

    let (res, s) = timed(|| {
        check_steady(
            &spec(CheckKind::Steady),
            &params,
            &ProfileSpec::default(),
            &SteadyConfig::default(),
        )
    });
    let state: Option<SteadyState> = match res {
        Ok((r, state)) => {
            let extra = format!(
                "weighted_sup_ratio={:.3e} field_bound_ratio={:.3e} wall={:.1e}/{:.1e} flux={:.1e}/{:.1e}",
                env(&r, "weighted_sup_ratio"),
                env(&r, "field_bound_ratio"),
                env(&r, "wall_tangential_e"),
                env(&r, "wall_normal_b"),
                env(&r, "box_flux_residual_0"),
                env(&r, "box_flux_residual_1"),
            );
            emit(summarize(8, "steady solver", &r, 600.0, s, &extra));
            state
        }
        Err(e) => {
            emit(Outcome {
                passed: false,
                line: format!("FAIL criterion  8 steady solver: error={e}"),
            });
            None
        }
    };

    match state {
        Some(state) => {
            let res = timed(|| {
                check_dynamic(
                    &spec(CheckKind::Dynamic),
                    &state,
                    &PerturbationSpec::default(),
                    &DynamicConfig::default(),
                )
            });
            match res {
                (Ok((r, _)), s) => {
                    let extra = format!(
                        "field_decay_ratio_max={:.3e} density_decay_ratio_max={:.3e} charge_residual_max={:.3e}",
                        env(&r, "max_field_decay_ratio"),
                        env(&r, "max_density_decay_ratio"),
                        env(&r, "max_charge_residual"),
                    );
                    emit(summarize(9, "dynamic run", &r, 1200.0, s, &extra));
                }
                (Err(e), _) => emit(Outcome {
                    passed: false,
                    line: format!("FAIL criterion  9 dynamic run: error={e}"),
                }),
            }
        }
        None => emit(Outcome {
            passed: false,
            line: "FAIL criterion  9 dynamic run: no steady state".into(),
        }),
    }

    let (r, s) = timed(|| check_magnetic_structure(&spec(CheckKind::MagneticStructure), &params));
    emit(summarize(
        10,
        "magnetic representation structure",
        &r,
        30.0,
        s,
        "",
    ));

    let failed = outcomes.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
