//! `hsvm`: steady solves, perturbation runs, estimate verification and report
//! aggregation for one scenario file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use halfspace_vm::config::Scenario;
use halfspace_vm::dynamic::{term_columns, DecaySeries, DynamicSolver};
use halfspace_vm::io::{read_json, read_steady, write_atomic, write_json, write_steady};
use halfspace_vm::steady::{IterationReport, SteadySolver};
use halfspace_vm::verify::{any_hard_failure, run_all, CheckReport};
use halfspace_vm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hsvm",
    version,
    about = "Half-space Vlasov-Maxwell steady states, perturbation runs and estimate checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML). Defaults apply to omitted keys.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; overrides the scenario's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    /// Replaces every seed of the scenario.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the steady problem; writes `steady.snap` and `steady_report.json`.
    Steady(Common),
    /// Evolve the configured perturbation; writes `decay.csv` and `dynamic_summary.json`.
    Dynamic {
        #[command(flatten)]
        common: Common,
        /// Steady snapshot; defaults to `<out>/steady.snap`, solved afresh when absent.
        #[arg(long)]
        steady: Option<PathBuf>,
    },
    /// Run the configured checks; writes `verify_report.json`. Exits nonzero when a hard check fails.
    Verify(Common),
    /// Aggregate a run directory into `report.json` and `decay_plot.csv`.
    Report {
        /// Directory holding outputs of the other commands.
        #[arg(long)]
        run: PathBuf,
    },
}

/// Deterministic summary of a dynamic run.
#[derive(Serialize, Deserialize)]
struct DynamicSummary {
    t_end: f64,
    steps: usize,
    weighted_init_norm: f64,
    init_field_sup: f64,
    max_one_plus_t_field: f64,
    max_one_plus_t_density: f64,
    max_charge_residual: f64,
    series: DecaySeries,
}

fn prepare(c: &Common) -> Result<(Scenario, PathBuf)> {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::ConfigInvalid("--threads must be positive".into()));
        }
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let mut sc = Scenario::load(&c.scenario)?;
    if let Some(seed) = c.seed {
        sc.reseed(seed);
    }
    let out = c.out.clone().unwrap_or_else(|| sc.output_dir.clone());
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", out.display())))?;
    Ok((sc, out))
}

fn timing(out: &Path, name: &str, seconds: f64) -> Result<()> {
    let path = out.join("timing.json");
    let mut map: BTreeMap<String, f64> = if path.exists() {
        read_json(&path).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    map.insert(name.into(), seconds);
    write_json(&path, &map)
}

fn cmd_steady(c: &Common) -> Result<ExitCode> {
    let (sc, out) = prepare(c)?;
    let start = std::time::Instant::now();
    let state =
        SteadySolver::new(sc.model.clone(), sc.profile.clone(), sc.steady.clone())?.run()?;
    write_steady(&out.join("steady.snap"), &state)?;
    let mut report = state.report.clone();
    for it in &mut report.iterates {
        it.seconds = 0.0;
    }
    write_json(&out.join("steady_report.json"), &report)?;
    timing(&out, "steady", start.elapsed().as_secs_f64())?;
    println!(
        "steady: {} iterates, converged = {}, sup|E| = {:e}, sup|B| = {:e}",
        report.iterates.len(),
        report.converged,
        state.fields.sup_e(),
        state.fields.sup_b()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_dynamic(c: &Common, steady: Option<&Path>) -> Result<ExitCode> {
    let (sc, out) = prepare(c)?;
    let start = std::time::Instant::now();
    let snap = steady
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("steady.snap"));
    let state = if snap.exists() || steady.is_some() {
        read_steady(&snap)?
    } else {
        SteadySolver::new(sc.model.clone(), sc.profile.clone(), sc.steady.clone())?.run()?
    };
    let run =
        DynamicSolver::from_steady(&state, sc.perturbation.clone(), sc.dynamic.clone())?.run()?;
    let mut series = run.series().clone();
    for r in &mut series.rows {
        r.seconds = 0.0;
    }
    write_atomic(&out.join("decay.csv"), series.to_csv().as_bytes())?;
    let fold = |f: &dyn Fn(&halfspace_vm::dynamic::DecayRow) -> f64| {
        series.rows.iter().map(f).fold(0.0, f64::max)
    };
    let summary = DynamicSummary {
        t_end: series.rows.last().map_or(0.0, |r| r.t),
        steps: series.rows.len(),
        weighted_init_norm: run.weighted_norm_cert,
        init_field_sup: run.field_sup_cert,
        max_one_plus_t_field: fold(&|r| (1.0 + r.t) * r.sup_e.max(r.sup_b)),
        max_one_plus_t_density: fold(&|r| (1.0 + r.t) * r.sup_wf_cloud.max(r.sup_wf_grid)),
        max_charge_residual: fold(&|r| r.charge_residual),
        series,
    };
    write_json(&out.join("dynamic_summary.json"), &summary)?;
    timing(&out, "dynamic", start.elapsed().as_secs_f64())?;
    println!(
        "dynamic: {} steps to t = {}, max (1+t) sup|E,B| = {:e}, max charge residual = {:e}",
        summary.steps, summary.t_end, summary.max_one_plus_t_field, summary.max_charge_residual
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(c: &Common) -> Result<ExitCode> {
    let (sc, out) = prepare(c)?;
    let reports = run_all(&sc);
    for r in &reports {
        println!("{}", r.line());
    }
    let canonical: Vec<CheckReport> = reports.iter().map(CheckReport::canonical).collect();
    write_json(&out.join("verify_report.json"), &canonical)?;
    for r in &reports {
        timing(&out, &format!("verify.{}", r.name), r.elapsed_s)?;
    }
    Ok(if any_hard_failure(&reports) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_report(run: &Path) -> Result<ExitCode> {
    if !run.is_dir() {
        return Err(Error::IoFailure(format!(
            "{}: not a directory",
            run.display()
        )));
    }
    let mut agg = serde_json::Map::new();
    let steady = run.join("steady_report.json");
    if steady.exists() {
        let r: IterationReport = read_json(&steady)?;
        agg.insert(
            "steady".into(),
            serde_json::to_value(r).map_err(|e| Error::IoFailure(e.to_string()))?,
        );
    }
    let verify = run.join("verify_report.json");
    if verify.exists() {
        let r: Vec<CheckReport> = read_json(&verify)?;
        let status: BTreeMap<String, bool> =
            r.iter().map(|c| (c.name.clone(), c.passed())).collect();
        agg.insert(
            "verify_passed".into(),
            serde_json::to_value(status).map_err(|e| Error::IoFailure(e.to_string()))?,
        );
        agg.insert(
            "verify".into(),
            serde_json::to_value(r).map_err(|e| Error::IoFailure(e.to_string()))?,
        );
    }
    let dynamic = run.join("dynamic_summary.json");
    if dynamic.exists() {
        let d: DynamicSummary = read_json(&dynamic)?;
        let mut csv = String::from("t,one_plus_t_sup_e,one_plus_t_sup_b,one_plus_t_sup_wf");
        for c in term_columns() {
            csv.push_str(&format!(",one_plus_t_{c}"));
        }
        csv.push('\n');
        for r in &d.series.rows {
            let k = 1.0 + r.t;
            csv.push_str(&format!(
                "{},{:e},{:e},{:e}",
                r.t,
                k * r.sup_e,
                k * r.sup_b,
                k * r.sup_wf_cloud.max(r.sup_wf_grid)
            ));
            for v in &r.term_sups {
                csv.push_str(&format!(",{:e}", k * v));
            }
            csv.push('\n');
        }
        write_atomic(&run.join("decay_plot.csv"), csv.as_bytes())?;
        agg.insert(
            "dynamic".into(),
            serde_json::to_value(d).map_err(|e| Error::IoFailure(e.to_string()))?,
        );
    }
    if agg.is_empty() {
        return Err(Error::IoFailure(format!(
            "{}: no run outputs found",
            run.display()
        )));
    }
    write_json(&run.join("report.json"), &agg)?;
    println!(
        "report: {} sections written to {}",
        agg.len(),
        run.join("report.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Steady(c) => cmd_steady(c),
        Command::Dynamic { common, steady } => cmd_dynamic(common, steady.as_deref()),
        Command::Verify(c) => cmd_verify(c),
        Command::Report { run } => cmd_report(run),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_scenario() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/quick.toml")
    }

    fn scratch_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("hsvm-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    fn common(scenario: PathBuf, out: &Path) -> Common {
        Common {
            scenario,
            out: Some(out.to_path_buf()),
            threads: None,
            seed: None,
        }
    }

    #[test]
    fn cli_arguments_parse() {
        let cli =
            Cli::try_parse_from(["hsvm", "verify", "--scenario", "a.toml", "--seed", "3"]).unwrap();
        assert!(matches!(
            cli.command,
            Command::Verify(Common { seed: Some(3), .. })
        ));
        assert!(Cli::try_parse_from(["hsvm", "verify"]).is_err());
    }

    #[test]
    fn verify_report_is_byte_identical_across_runs() {
        let (a, b) = (scratch_dir("verify-a"), scratch_dir("verify-b"));
        assert_eq!(
            cmd_verify(&common(quick_scenario(), &a)).unwrap(),
            ExitCode::SUCCESS
        );
        assert_eq!(
            cmd_verify(&common(quick_scenario(), &b)).unwrap(),
            ExitCode::SUCCESS
        );
        let ra = std::fs::read(a.join("verify_report.json")).unwrap();
        let rb = std::fs::read(b.join("verify_report.json")).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(cmd_report(&a).unwrap(), ExitCode::SUCCESS);
        assert!(a.join("report.json").exists());
    }

    #[test]
    fn zero_kernel_tolerance_fails_the_run() {
        let dir = scratch_dir("zero-tol");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scenario.toml");
        std::fs::write(
            &path,
            "schema_version = 1\n[[verify.checks]]\nkind = \"kernel_identities\"\n\
             samples = 200\nseed = 1\ntolerance = 0.0\nseverity = \"hard\"\n",
        )
        .unwrap();
        assert_eq!(cmd_verify(&common(path, &dir)).unwrap(), ExitCode::FAILURE);
    }

    #[test]
    fn subunit_beta_is_rejected() {
        let dir = scratch_dir("beta");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scenario.toml");
        std::fs::write(&path, "schema_version = 1\n[model]\nbeta = 0.5\n").unwrap();
        assert!(matches!(
            cmd_verify(&common(path, &dir)),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn report_rejects_an_empty_directory() {
        let dir = scratch_dir("empty");
        std::fs::create_dir_all(&dir).unwrap();
        assert!(cmd_report(&dir).is_err());
    }

    #[test]
    fn shipped_scenarios_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            Scenario::from_toml(&std::fs::read_to_string(&path).unwrap())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
}
