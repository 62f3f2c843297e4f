use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use habitat::bayesopt::HyperParams;
use habitat::cohort::{generate_synthetic, read_cohort, write_cohort, Cohort, SynthSpec};
use habitat::fae::VariantKind;
use habitat::pipeline::{
    apply_bundle, run_experiment, write_groups_csv, write_run_dir, LossBreakdown, ModelBundle, PipelineConfig,
    GROUPS_TEST_FILE, KM_TEST_FILE,
};
use habitat::report::render_report;
use habitat::survival::{km_fit, write_km_csv, KmCurve};
use habitat::Error;

#[derive(Debug, Parser)]
#[command(name = "habitat", version, about = "Adaptive tumor sub-region partitioning and risk grouping")]
pub struct Cli {
    /// Worker threads for the parallel stages.
    #[arg(long, global = true, env = "HABITAT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort with planted sub-regions and survival.
    Synth(SynthArgs),
    /// Tune (gamma, eta), fit the final models and write a run directory.
    Run(RunArgs),
    /// Apply a saved bundle to a holdout cohort.
    Eval(EvalArgs),
    /// Render SVG plots from a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    patients: usize,
    #[arg(long)]
    regions: usize,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "32x32", value_parser = parse_dims)]
    dims: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    censoring: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// JSON file with pipeline settings; defaults are used for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k_trials: Option<usize>,
    #[arg(long)]
    variant: Option<VariantKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Skip the transformer variant comparison table.
    #[arg(long)]
    no_variants: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Bundle directory, or a run directory containing `bundle/`.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    /// Directory for km_test.csv; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

/// Usage and input problems exit with 2, everything else with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_)
        | Error::EmptyCohort
        | Error::MalformedManifest { .. }
        | Error::MissingPatientFile(_)
        | Error::Parse { .. }
        | Error::ModalityMismatch { .. }
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_synth(a: SynthArgs) -> habitat::Result<()> {
    let mut spec = SynthSpec::planted(a.patients, a.regions, a.dims, a.seed);
    if let Some(c) = a.censoring {
        spec.censoring_rate = c;
    }
    spec.validate()?;
    let (cohort, _) = generate_synthetic(&spec)?;
    write_cohort(&cohort, &a.out)?;
    let events = cohort.survival.iter().filter(|r| r.event).count();
    println!(
        "wrote {} patients ({} modalities, {} pixels, {} events) to {}",
        cohort.n_patients(),
        cohort.n_modalities(),
        cohort.total_pixels(),
        events,
        a.out.display()
    );
    Ok(())
}

fn load_cohort(path: &Path) -> habitat::Result<Cohort> {
    if !path.exists() {
        return Err(usage(format!("cohort path {} does not exist", path.display())));
    }
    read_cohort(path)
}

fn load_config(a: &RunArgs) -> habitat::Result<PipelineConfig> {
    let mut config: PipelineConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(v) = a.alpha {
        config.alpha = v;
    }
    if let Some(v) = a.tau {
        config.tau = v;
    }
    if let Some(v) = a.k_trials {
        config.k_trials = v;
    }
    if let Some(v) = a.variant {
        config.variant = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.max_steps {
        config.bo.max_steps = v;
    }
    if a.no_variants {
        config.compare_variants = false;
    }
    config.validate()?;
    Ok(config)
}

fn show(b: Result<&LossBreakdown, &str>) -> String {
    match b {
        Ok(b) => format!(
            "L_s={:.4} L_p={:.4} p={:.3e} L={:.4}",
            b.stability_loss, b.significance_oriented, b.p_value, b.loss
        ),
        Err(e) => format!("failed: {e}"),
    }
}

fn cmd_run(a: RunArgs) -> habitat::Result<()> {
    let config = load_config(&a)?;
    let cohort = load_cohort(&a.cohort)?;
    let quiet = a.quiet;
    let exp = run_experiment(&cohort, &config, |i, theta: &HyperParams, b| {
        if !quiet {
            eprintln!("[{i:>3}] {theta}: {}", show(b));
        }
    })?;
    write_run_dir(&a.out, &cohort, &exp)?;
    render_report(&a.out)?;
    let lr = exp.final_fit.grouping.logrank;
    println!(
        "best {} loss={:.6} after {} iterations{}; train chi_square={} p_value={}",
        exp.trace.best_theta,
        exp.trace.best_loss,
        exp.trace.iterations,
        if exp.trace.converged { " (converged)" } else { "" },
        lr.chi_square,
        lr.p_value
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> habitat::Result<()> {
    let (bundle_dir, run_dir) = if a.bundle.join("bundle").is_dir() {
        (a.bundle.join("bundle"), a.bundle.clone())
    } else {
        let parent = a.bundle.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        (a.bundle.clone(), parent)
    };
    let bundle = ModelBundle::load(&bundle_dir)?;
    let holdout = load_cohort(&a.cohort)?;
    let app = apply_bundle(&bundle, &holdout)?;
    let (high, low) = app.partition(&holdout);
    let curve = |rs: Vec<&habitat::cohort::SurvivalRecord>| -> habitat::Result<Option<KmCurve>> {
        let owned: Vec<_> = rs.into_iter().cloned().collect();
        if owned.is_empty() {
            Ok(None)
        } else {
            km_fit(&owned).map(Some)
        }
    };
    let (high, low) = (curve(high)?, curve(low)?);
    let mut curves = Vec::new();
    if let Some(c) = &high {
        curves.push(("high", c));
    }
    if let Some(c) = &low {
        curves.push(("low", c));
    }
    let out = a.out.unwrap_or(run_dir);
    fs::create_dir_all(&out)?;
    write_km_csv(&curves, app.logrank.as_ref(), &out.join(KM_TEST_FILE))?;
    write_groups_csv(&holdout, &app.groups, &out.join(GROUPS_TEST_FILE))?;
    let n_high = app.groups.iter().filter(|g| **g == habitat::survival::RiskGroup::High).count();
    match app.logrank {
        Some(lr) => println!(
            "chi_square={} p_value={} (high={}, low={})",
            lr.chi_square,
            lr.p_value,
            n_high,
            app.groups.len() - n_high
        ),
        None => println!(
            "log-rank undefined: degenerate grouping (high={}, low={})",
            n_high,
            app.groups.len() - n_high
        ),
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> habitat::Result<()> {
    if !a.run.is_dir() {
        return Err(usage(format!("{} is not a directory", a.run.display())));
    }
    for p in render_report(&a.run)? {
        println!("{}", p.display());
    }
    Ok(())
}
