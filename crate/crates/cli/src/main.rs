//! Command-line front-end: fit, gibbs, predict, simulate and evaluate over
//! CSV/JSON files with seeded, reproducible runs.
//!
//! Exit codes: 0 success, 1 hard error, 2 fit did not converge (the result
//! is still written). Set GSVB_LOG=quiet|error|warn|info|debug to control
//! stderr chatter.

mod io;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use gsvb::{
    evaluate_metrics, fit, gen_coefficients, gen_design, gen_response, is_perfectly_separable,
    marginal_credible_set, posterior_predictive, replicate_rng, run_gibbs,
    validate_grouped_design, Family, FitConfig, GibbsConfig, GroupedDesign, GsvbPrior, Init,
    KernelScale, SimSpec, VariationalFamilyKind,
};

use io::{fmt_f64, FitJson};

fn log_level() -> u8 {
    match std::env::var("GSVB_LOG").as_deref() {
        Ok("quiet") => 0,
        Ok("error") => 1,
        Ok("info") => 3,
        Ok("debug") => 4,
        _ => 2,
    }
}

macro_rules! log_at {
    ($lvl:expr, $($arg:tt)*) => {
        if log_level() >= $lvl {
            eprintln!($($arg)*);
        }
    };
}

#[derive(Parser)]
#[command(
    name = "gsvb",
    version,
    about = "Group spike-and-slab variational Bayes for sparse group regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the variational posterior to a dataset.
    Fit(FitArgs),
    /// Run the Metropolis-within-Gibbs sampler (Gaussian family only).
    Gibbs(GibbsArgs),
    /// Posterior-predictive draws at new covariate rows from a fit file.
    Predict(PredictArgs),
    /// Generate synthetic datasets from a simulation spec.
    Simulate(SimulateArgs),
    /// Score a fit file against the true coefficients.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PriorArgs {
    /// Slab rate of the double-exponential prior.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Beta prior shape a0 on inclusion weights.
    #[arg(long, default_value_t = 1.0)]
    a0: f64,
    /// Beta prior shape b0; defaults to the number of groups.
    #[arg(long)]
    b0: Option<f64>,
    /// Inverse-Gamma shape on the noise variance (Gaussian only).
    #[arg(long, default_value_t = 1e-3)]
    a: f64,
    /// Inverse-Gamma scale on the noise variance (Gaussian only).
    #[arg(long, default_value_t = 1e-3)]
    b: f64,
}

impl PriorArgs {
    fn prior(&self, num_groups: usize) -> GsvbPrior {
        GsvbPrior {
            lambda: self.lambda,
            a0: self.a0,
            b0: self.b0.unwrap_or(num_groups as f64),
            a: self.a,
            b: self.b,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Data CSV: header row, response first, covariates after.
    #[arg(long)]
    data: String,
    /// Groups JSON: list of group sizes in column order.
    #[arg(long)]
    groups: String,
    #[arg(long)]
    family: Family,
    /// Variational family: block (unrestricted within-group covariance) or
    /// diagonal.
    #[arg(long, default_value = "block")]
    kind: VariationalFamilyKind,
    /// Output fit JSON path.
    #[arg(long)]
    out: String,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long, default_value_t = 1000)]
    max_sweeps: usize,
    /// Convergence threshold on the total absolute parameter change.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Mean initializer: grouplasso or zeros.
    #[arg(long, default_value = "grouplasso")]
    init: String,
    /// Group-LASSO regularization for the initializer (default is data-driven).
    #[arg(long)]
    reg: Option<f64>,
}

#[derive(Args)]
struct GibbsArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    groups: String,
    /// Only the Gaussian family has a sampler.
    #[arg(long, default_value = "gaussian")]
    family: Family,
    /// Chain CSV output (one row per kept iteration).
    #[arg(long)]
    chain: String,
    /// Summary JSON output (PIPs, posterior mean, acceptance rates).
    #[arg(long)]
    summary: String,
    #[arg(long, default_value_t = 100_000)]
    iters: usize,
    #[arg(long, default_value_t = 50_000)]
    burn: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Read the random-walk kernel scale as a variance instead of a
    /// standard deviation.
    #[arg(long, default_value_t = false)]
    kernel_scale_is_variance: bool,
    #[command(flatten)]
    prior: PriorArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Fit JSON produced by `gsvb fit`.
    #[arg(long)]
    fit: String,
    /// Covariate CSV (header row, no response column).
    #[arg(long)]
    data: String,
    /// Output CSV: row, mean, lo, hi.
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec JSON.
    #[arg(long)]
    spec: String,
    /// Output data CSV (suffixed _r### when replicates > 1).
    #[arg(long)]
    out_data: String,
    /// Output truth CSV (suffixed _r### when replicates > 1).
    #[arg(long)]
    out_truth: String,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    /// Worker threads for replicate generation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the seed in the spec file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    fit: String,
    /// Truth CSV as written by simulate (coord,group,beta0).
    #[arg(long)]
    truth: String,
    /// Metrics JSON output.
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Append a metrics row to this aggregate CSV.
    #[arg(long)]
    csv_append: Option<String>,
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::rng().random();
            log_at!(2, "gsvb: no --seed given; using random seed {s}");
            s
        }
    }
}

fn ensure_distinct(outputs: &[&str], inputs: &[&str]) -> Result<()> {
    for o in outputs {
        for i in inputs {
            if o == i {
                bail!("output path '{o}' would clobber input '{i}'");
            }
        }
    }
    Ok(())
}

fn load_design(data: &str, groups: &str, family: Family) -> Result<GroupedDesign> {
    let (x, y) = io::read_data_csv(data)?;
    let groups = io::read_groups_json(groups, x.ncols())?;
    let design = GroupedDesign { x, y, groups };
    validate_grouped_design(design, family).map_err(|e| anyhow::anyhow!(e))
}

fn cmd_fit(args: &FitArgs) -> Result<u8> {
    ensure_distinct(&[&args.out], &[&args.data, &args.groups])?;
    let design = load_design(&args.data, &args.groups, args.family)?;
    let prior = args.prior.prior(design.groups.num_groups());
    let seed = resolve_seed(args.seed);
    let init = match args.init.as_str() {
        "grouplasso" | "group-lasso" => Init::GroupLasso { reg: args.reg },
        "zeros" => Init::Zeros,
        other => bail!("unknown init '{other}' (expected grouplasso or zeros)"),
    };
    let config = FitConfig {
        max_sweeps: args.max_sweeps,
        tol: args.tol,
        kind: args.kind,
        init,
        seed,
        ..Default::default()
    };
    log_at!(
        3,
        "gsvb: fitting {} family, {} kind, n={}, p={}, M={}",
        args.family.name(),
        args.init,
        design.n(),
        design.p(),
        design.groups.num_groups()
    );
    let result = fit(&design, &prior, args.family, &config)?;
    if result.line_search_warnings > 0 {
        log_at!(
            2,
            "gsvb: {} inner line searches returned early",
            result.line_search_warnings
        );
    }
    let json = FitJson::from_state(
        &result.state,
        args.family,
        &result.objective_trace,
        result.converged,
        seed,
    );
    io::write_json(&args.out, &json)?;
    if !result.converged {
        log_at!(
            2,
            "gsvb: not converged after {} sweeps (result written)",
            result.sweeps_used
        );
        return Ok(2);
    }
    log_at!(3, "gsvb: converged in {} sweeps", result.sweeps_used);
    Ok(0)
}

fn cmd_gibbs(args: &GibbsArgs) -> Result<u8> {
    if args.family != Family::Gaussian {
        bail!("unsupported family '{}': the sampler covers the Gaussian family only", args.family.name());
    }
    ensure_distinct(
        &[&args.chain, &args.summary],
        &[&args.data, &args.groups],
    )?;
    let design = load_design(&args.data, &args.groups, Family::Gaussian)?;
    let prior = args.prior.prior(design.groups.num_groups());
    let seed = resolve_seed(args.seed);
    let config = GibbsConfig {
        n_iter: args.iters,
        burn_in: args.burn,
        thin: args.thin,
        seed,
        kernel_scale: if args.kernel_scale_is_variance {
            KernelScale::Variance
        } else {
            KernelScale::StdDev
        },
    };
    if config.burn_in >= config.n_iter {
        bail!("--burn must be smaller than --iters");
    }
    let chain = run_gibbs(&design, &prior, &config)?;

    // Chain CSV: beta, z, theta, xi per kept iteration.
    let p = design.p();
    let m_groups = design.groups.num_groups();
    let mut out = String::new();
    for j in 0..p {
        out.push_str(&format!("beta{},", j + 1));
    }
    for k in 0..m_groups {
        out.push_str(&format!("z{},", k + 1));
    }
    for k in 0..m_groups {
        out.push_str(&format!("theta{},", k + 1));
    }
    out.push_str("xi\n");
    for it in 0..chain.kept() {
        for j in 0..p {
            out.push_str(&fmt_f64(chain.beta_samples[(it, j)]));
            out.push(',');
        }
        for k in 0..m_groups {
            out.push_str(&format!("{},", chain.z_samples[(it, k)] as u8));
        }
        for k in 0..m_groups {
            out.push_str(&fmt_f64(chain.theta_samples[(it, k)]));
            out.push(',');
        }
        out.push_str(&fmt_f64(chain.xi_samples[it]));
        out.push('\n');
    }
    std::fs::write(&args.chain, out).with_context(|| format!("writing {}", args.chain))?;

    #[derive(serde::Serialize)]
    struct Summary {
        pip: Vec<f64>,
        posterior_mean: Vec<f64>,
        acceptance_rate: Vec<f64>,
        kept_iterations: usize,
        seed: u64,
    }
    let summary = Summary {
        pip: chain.pip().iter().copied().collect(),
        posterior_mean: chain.posterior_mean(&design.groups).iter().copied().collect(),
        acceptance_rate: chain.acceptance_rate.iter().copied().collect(),
        kept_iterations: chain.kept(),
        seed,
    };
    io::write_json(&args.summary, &summary)?;
    Ok(0)
}

fn cmd_predict(args: &PredictArgs) -> Result<u8> {
    ensure_distinct(&[&args.out], &[&args.fit, &args.data])?;
    let fit_json: FitJson = io::read_json(&args.fit)?;
    let family = fit_json.family()?;
    let state = fit_json.to_state()?;
    let groups = fit_json.groups()?;
    let x = io::read_x_csv(&args.data)?;
    if x.ncols() != groups.p() {
        bail!(
            "shape mismatch: expected {} covariate columns, got {}",
            groups.p(),
            x.ncols()
        );
    }
    let seed = resolve_seed(args.seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = String::from("row,mean,lo,hi\n");
    for i in 0..x.nrows() {
        let x_star = DVector::from_fn(x.ncols(), |j, _| x[(i, j)]);
        let sample = posterior_predictive(
            &state,
            &groups,
            &x_star,
            family,
            args.draws,
            args.alpha,
            &mut rng,
        )?;
        let mean = sample.draws.iter().sum::<f64>() / sample.draws.len() as f64;
        out.push_str(&format!(
            "{},{},{},{}\n",
            i,
            fmt_f64(mean),
            fmt_f64(sample.interval.0),
            fmt_f64(sample.interval.1)
        ));
    }
    std::fs::write(&args.out, out).with_context(|| format!("writing {}", args.out))?;
    Ok(0)
}

fn replicate_path(path: &str, replicate: usize, total: usize) -> String {
    if total == 1 {
        return path.to_string();
    }
    match path.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}_r{replicate:03}.{ext}"),
        None => format!("{path}_r{replicate:03}"),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    let mut spec: SimSpec = io::read_json(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| anyhow::anyhow!(e))?;
    ensure_distinct(&[&args.out_data, &args.out_truth], &[&args.spec])?;
    if args.out_data == args.out_truth {
        bail!("data and truth outputs must differ");
    }

    let total = args.replicates.max(1);
    let jobs = args.jobs.clamp(1, total);
    let results: Vec<Result<bool>> = if jobs == 1 {
        (0..total).map(|r| simulate_one(&spec, args, r, total)).collect()
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in 0..jobs {
                let spec = &spec;
                handles.push(scope.spawn(move || {
                    let mut acc = Vec::new();
                    let mut r = chunk;
                    while r < total {
                        acc.push((r, simulate_one(spec, args, r, total)));
                        r += jobs;
                    }
                    acc
                }));
            }
            let mut collected: Vec<(usize, Result<bool>)> = Vec::new();
            for h in handles {
                collected.extend(h.join().expect("worker panicked"));
            }
            collected.sort_by_key(|(r, _)| *r);
            collected.into_iter().map(|(_, res)| res).collect()
        })
    };
    let mut any_separable = false;
    for res in results {
        any_separable |= res?;
    }
    if any_separable {
        if spec.setting == 1 {
            log_at!(
                2,
                "gsvb: warning: generated binomial data is perfectly separable; \
                 the default experiment grid skips this configuration"
            );
        } else {
            log_at!(2, "gsvb: warning: generated binomial data is perfectly separable");
        }
    }
    Ok(0)
}

/// Generate one replicate; returns whether a Binomial dataset came out
/// perfectly separable.
fn simulate_one(spec: &SimSpec, args: &SimulateArgs, replicate: usize, total: usize) -> Result<bool> {
    let mut rng = replicate_rng(spec.seed, replicate as u64);
    let (beta0, _active) = gen_coefficients(spec, &mut rng);
    let x = gen_design(spec, &mut rng)?;
    let y = gen_response(&x, &beta0, spec.family, &mut rng)?;
    io::write_data_csv(&replicate_path(&args.out_data, replicate, total), &x, &y)?;
    io::write_truth_csv(
        &replicate_path(&args.out_truth, replicate, total),
        &beta0,
        &spec.groups(),
    )?;
    Ok(spec.family == Family::Binomial && is_perfectly_separable(&x, &y))
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<u8> {
    ensure_distinct(&[&args.out], &[&args.fit, &args.truth])?;
    let fit_json: FitJson = io::read_json(&args.fit)?;
    let state = fit_json.to_state()?;
    let groups = fit_json.groups()?;
    let beta0 = io::read_truth_csv(&args.truth)?;
    if beta0.len() != groups.p() {
        bail!(
            "shape mismatch: fit covers {} coordinates, truth has {}",
            groups.p(),
            beta0.len()
        );
    }
    // Posterior mean: gamma-weighted slab means.
    let mut beta_hat = DVector::zeros(groups.p());
    for k in 0..groups.num_groups() {
        for j in groups.range(k) {
            beta_hat[j] = state.gamma[k] * state.mu[j];
        }
    }
    let sets = (0..groups.p())
        .map(|j| marginal_credible_set(&state, &groups, j, args.alpha))
        .collect::<gsvb::Result<Vec<_>>>()?;
    let active: Vec<usize> = (0..groups.num_groups())
        .filter(|&k| groups.range(k).any(|j| beta0[j] != 0.0))
        .collect();
    let report = evaluate_metrics(&beta_hat, &state.gamma, &sets, &beta0, &active, &groups)?;
    io::write_json(&args.out, &report)?;
    if let Some(agg) = &args.csv_append {
        let header = "l2_error,auc,coverage,mean_set_size,n_selected_groups\n";
        let line = format!(
            "{},{},{},{},{}\n",
            fmt_f64(report.l2_error),
            fmt_f64(report.auc),
            fmt_f64(report.coverage),
            fmt_f64(report.mean_set_size),
            report.n_selected_groups
        );
        let mut content = std::fs::read_to_string(agg).unwrap_or_default();
        if content.is_empty() {
            content.push_str(header);
        }
        content.push_str(&line);
        std::fs::write(agg, content).with_context(|| format!("writing {agg}"))?;
    }
    Ok(0)
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Gibbs(args) => cmd_gibbs(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match outcome {
        Ok(code) => std::process::ExitCode::from(code),
        Err(err) => {
            if log_level() >= 1 {
                eprintln!("gsvb: error: {err:#}");
            }
            std::process::ExitCode::from(1)
        }
    }
}
