//! Batch command-line front end: dataset ingestion, model fitting,
//! prediction, simulation, and EP diagnostics.
//!
//! Exit codes: 0 success/converged, 2 iteration-limited (estimates still
//! written), 1 hard error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use probit_ep::constraints::{build_constraints, ConstraintSystem, Outcome};
use probit_ep::em::{fit, EmConfig};
use probit_ep::ep::ep_moments;
use probit_ep::error::{Error, Result};
use probit_ep::io::{
    read_dataset, write_dataset, write_trace, EstimatesFile, RegionSection, RegionSpecFile,
    RunConfig, SimSpecFile,
};
use probit_ep::predict::{choice_probabilities, counterfactual_swap_to_top};
use probit_ep::simulate::{generate, gibbs_tmvn, rejection_tmvn};

#[derive(Parser)]
#[command(name = "probit-ep", version, about = "Probit estimation via EP-Newton EM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a probit model to a long-format CSV dataset.
    Fit(FitArgs),
    /// Generate a synthetic dataset plus a ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Predict choice probabilities (optionally with a swap-to-top
    /// counterfactual) from a fitted model.
    Predict(PredictArgs),
    /// Compare EP moments against Monte-Carlo oracles on a region spec.
    EpCheck(EpCheckArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV (obs_id, alt_id, chosen, cov_1..cov_p).
    data: PathBuf,
    /// Estimates JSON output path.
    out: PathBuf,
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iteration-trace output (newline-delimited JSON records); defaults to
    /// `<out>.trace.ndjson`.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long, value_parser = ["multivariate", "multinomial_outside", "multinomial_reference"])]
    model_kind: Option<String>,
    #[arg(long)]
    ref_index: Option<usize>,
    #[arg(long)]
    trace_target: Option<f64>,
    #[arg(long)]
    tol_sigma: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    subsample_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ep_tol: Option<f64>,
    #[arg(long)]
    ep_max_sweeps: Option<usize>,
    #[arg(long)]
    ep_damping: Option<f64>,
    /// E-step worker threads (0 = all cores); defaults to the config file,
    /// then the PROBIT_EP_THREADS environment variable.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec (TOML): n, m, p, beta, sigma, model, seed.
    spec: PathBuf,
    /// Dataset CSV output path.
    out: PathBuf,
    /// Ground-truth sidecar; defaults to `<out>.truth.json`.
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Estimates JSON from `fit`.
    model: PathBuf,
    /// Dataset CSV of observations to score.
    data: PathBuf,
    /// Output CSV of per-observation probability vectors.
    out: PathBuf,
    /// Also compute the counterfactual of moving this item (0-based
    /// position) to the top of each impression.
    #[arg(long)]
    swap_item: Option<usize>,
    #[arg(long)]
    ep_tol: Option<f64>,
    #[arg(long)]
    ep_max_sweeps: Option<usize>,
}

#[derive(Args)]
struct EpCheckArgs {
    /// Region spec (TOML): prior mean/covariance and a multinomial or box
    /// region.
    spec: PathBuf,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args).map(|()| ExitCode::SUCCESS),
        Command::Predict(args) => cmd_predict(args).map(|()| ExitCode::SUCCESS),
        Command::EpCheck(args) => cmd_ep_check(args).map(|()| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn env_threads() -> Option<usize> {
    std::env::var("PROBIT_EP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode> {
    let mut run = match &args.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(kind) = &args.model_kind {
        run.model.kind = kind.clone();
    }
    if let Some(r) = args.ref_index {
        run.model.ref_index = Some(r);
    }
    let kind = run.model_kind()?;
    let mut cfg: EmConfig = run.em_config();
    if cfg.threads == 0 {
        if let Some(t) = env_threads() {
            cfg.threads = t;
        }
    }
    if let Some(v) = args.trace_target {
        cfg.trace_target = Some(v);
    }
    if let Some(v) = args.tol_sigma {
        cfg.tol_sigma = v;
    }
    if let Some(v) = args.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = args.subsample_fraction {
        cfg.subsample_fraction = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.ep_tol {
        cfg.ep.tol = v;
    }
    if let Some(v) = args.ep_max_sweeps {
        cfg.ep.max_sweeps = v;
    }
    if let Some(v) = args.ep_damping {
        cfg.ep.damping = v;
    }
    if let Some(v) = args.threads {
        cfg.threads = v;
    }

    let dataset = read_dataset(&args.data, &kind)?;
    let (model, trace) = fit(&dataset.observations, kind, &cfg)?;

    EstimatesFile::from_model(&model, &trace, &cfg).write(&args.out)?;
    let trace_path = args
        .trace_out
        .unwrap_or_else(|| sibling(&args.out, "trace.ndjson"));
    write_trace(&trace_path, &trace)?;

    let iters = trace.iterations.len();
    if trace.converged {
        eprintln!("converged after {iters} iterations");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("iteration limit reached after {iters} iterations; estimates written");
        Ok(ExitCode::from(2))
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{suffix}"));
    PathBuf::from(s)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let spec_file = SimSpecFile::from_path(&args.spec)?;
    let spec = spec_file.to_spec()?;
    let (observations, truth) = generate(&spec)?;
    write_dataset(&args.out, &observations, &spec.kind)?;
    let truth_path = args
        .truth_out
        .unwrap_or_else(|| sibling(&args.out, "truth.json"));
    let payload = serde_json::json!({
        "beta": truth.beta.as_slice(),
        "sigma": { "dim": truth.sigma.nrows(), "data": truth.sigma.transpose().as_slice() },
        "seed": truth.seed,
    });
    std::fs::write(
        &truth_path,
        format!("{}\n", serde_json::to_string_pretty(&payload)?),
    )?;
    eprintln!(
        "wrote {} observations to {} (truth: {})",
        observations.len(),
        args.out.display(),
        truth_path.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let estimates = EstimatesFile::from_path(&args.model)?;
    let model = estimates.to_model()?;
    let dataset = read_dataset(&args.data, &model.kind)?;
    if dataset.n_covariates != model.n_covariates() {
        return Err(Error::DimensionMismatch {
            expected: model.n_covariates(),
            got: dataset.n_covariates,
        });
    }
    let mut ep = probit_ep::ep::EpConfig::default();
    if let Some(v) = args.ep_tol {
        ep.tol = v;
    }
    if let Some(v) = args.ep_max_sweeps {
        ep.max_sweeps = v;
    }

    let mut w = csv::Writer::from_path(&args.out)?;
    let n_slots = match model.kind {
        probit_ep::ModelKind::Multivariate => model.dim(),
        probit_ep::ModelKind::MultinomialReference { .. } => model.dim() + 2,
        probit_ep::ModelKind::MultinomialOutside => model.dim() + 1,
    };
    let mut header: Vec<String> = vec!["obs_id".into(), "mass_defect".into()];
    for s in 0..n_slots {
        header.push(format!("raw_{s}"));
    }
    for s in 0..n_slots {
        header.push(format!("prob_{s}"));
    }
    if args.swap_item.is_some() {
        header.push("baseline_prob".into());
        header.push("swapped_prob".into());
        header.push("uplift".into());
    }
    w.write_record(&header)?;

    for (i, obs) in dataset.observations.iter().enumerate() {
        if obs.positions.is_some() {
            return Err(Error::Dataset(format!(
                "observation {i}: prediction requires full choice sets"
            )));
        }
        let probs = choice_probabilities(&model, &obs.x, &ep)?;
        let mut record: Vec<String> = vec![format!("obs{i}"), format!("{:?}", probs.mass_defect)];
        for v in &probs.raw_mass {
            record.push(format!("{v:?}"));
        }
        for v in &probs.normalized {
            record.push(format!("{v:?}"));
        }
        if let Some(item) = args.swap_item {
            let cf = counterfactual_swap_to_top(&model, &obs.x, item, &ep)?;
            record.push(format!("{:?}", cf.item_baseline_prob));
            record.push(format!("{:?}", cf.item_swapped_prob));
            record.push(format!("{:?}", cf.uplift));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_ep_check(args: EpCheckArgs) -> Result<()> {
    let mut spec = RegionSpecFile::from_path(&args.spec)?;
    if let Some(d) = args.draws {
        spec.draws = d;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let dim = spec.dim;
    if spec.prior_mean.len() != dim || spec.prior_cov.len() != dim * dim {
        return Err(Error::InvalidSpec(
            "prior_mean/prior_cov sizes must match dim".into(),
        ));
    }
    let mean = DVector::from_row_slice(&spec.prior_mean);
    let cov = DMatrix::from_row_slice(dim, dim, &spec.prior_cov);
    let cs: ConstraintSystem = match &spec.region {
        RegionSection::Multinomial { chosen } => build_constraints(
            &probit_ep::ModelKind::MultinomialOutside,
            &Outcome::Chosen(*chosen),
            dim,
        )?,
        RegionSection::Box { lower, upper } => ConstraintSystem::from_box(
            DVector::from_row_slice(lower),
            DVector::from_row_slice(upper),
        )?,
    };

    let ep = probit_ep::ep::EpConfig::default();
    let moments = ep_moments(&mean, &cov, &cs, &ep)?;
    let gibbs = gibbs_tmvn(&mean, &cov, &cs, spec.draws, spec.burn_in, spec.seed)?;
    let rejection = rejection_tmvn(&mean, &cov, &cs, spec.draws, spec.seed ^ 0x5DEE_CE66)
        .map(Some)
        .or_else(|e| match e {
            Error::AcceptanceTooLow(_) => Ok(None),
            other => Err(other),
        })?;

    println!("region dim {dim}, EP mass {:.6e}", moments.log_mass.exp());
    if let Some(r) = &rejection {
        println!(
            "rejection acceptance {:.4e} ({} kept)",
            r.acceptance.unwrap_or(f64::NAN),
            r.n_samples
        );
    } else {
        println!("rejection sampler skipped (acceptance below 1e-4)");
    }
    println!("\ncoordinate   ep_mean      gibbs_mean (±3se)      rej_mean (±3se)");
    for k in 0..dim {
        let rej = rejection
            .as_ref()
            .map(|r| format!("{:+.5} (±{:.5})", r.mean[k], 3.0 * r.se_mean[k]))
            .unwrap_or_else(|| "-".into());
        println!(
            "{k:>10}   {:+.5}     {:+.5} (±{:.5})    {rej}",
            moments.mean[k],
            gibbs.mean[k],
            3.0 * gibbs.se_mean[k]
        );
    }
    println!(
        "\ncovariance max |ep - gibbs| = {:.3e}",
        (&moments.cov - &gibbs.cov).amax()
    );
    if let Some(r) = &rejection {
        println!(
            "covariance max |ep - rejection| = {:.3e}",
            (&moments.cov - &r.cov).amax()
        );
        println!(
            "mean      max |gibbs - rejection| = {:.3e}",
            (&gibbs.mean - &r.mean).amax()
        );
    }
    Ok(())
}
