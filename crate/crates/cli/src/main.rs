use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use funcreg::grid::{group_analysis, load_grid, save_grid, BoundingBox, VoxelGrid};
use funcreg::kriging::FittedMap;
use funcreg::landmarks::{detect_landmarks, PriorConfig, RegistrationPrior};
use funcreg::modelselect::{grid_2d, sweep_t, LambdaTuple};
use funcreg::pipeline::{prior_for, register_with_prior, RegisterConfig};
use funcreg::posterior::{Mode, PARAM_NAMES};
use funcreg::sampler::ChainConfig;
use funcreg::simulate::{recovery_batch, synthesize, ElasticSpec, ParamRanges, RecoveryConfig, RecoveryTable};
use funcreg::transform::SimilarityParams;
use funcreg::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_CORRESPONDENCE: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;

#[derive(Parser, Debug, Serialize)]
#[command(name = "funcreg", version, about = "Bayesian registration of 2D activation maps")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Generate a floating map from a reference by a known warp, or a batch
    /// recovery experiment with `--batch`.
    Simulate(SimulateArgs),
    /// Estimate the landmark prior for a query box.
    Priors(PriorsArgs),
    /// Register a floating map to the reference.
    Register(RegisterArgs),
    /// Voxel-wise group statistics over maps on a common lattice.
    Group(GroupArgs),
    /// Summarize a recovery CSV.
    Report(ReportArgs),
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v = parse_list(s)?;
    match v.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(format!("expected two comma-separated numbers, got `{s}`")),
    }
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    let v = parse_list(s)?;
    match v.as_slice() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(format!("expected x0,y0,x1,y1, got `{s}`")),
    }
}

/// Comma-separated numbers as one argument.
#[derive(Debug, Clone, Serialize)]
#[serde(transparent)]
struct NumberList(Vec<f64>);

fn parse_number_list(s: &str) -> Result<NumberList, String> {
    parse_list(s).map(NumberList)
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true, default_value = "0,0")]
    theta: [f64; 2],
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    sigma: [f64; 2],
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    omega: f64,
    /// White-noise sd added after warping.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    elastic: bool,
    #[arg(long = "sigma-d", default_value_t = 4.0)]
    sigma_d: f64,
    #[arg(long = "alpha-d", default_value_t = 60.0)]
    alpha_d: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run this many random-truth replicates through the full pipeline.
    #[arg(long)]
    batch: Option<usize>,
    /// Query box for `--batch`.
    #[arg(long = "box", value_parser = parse_box)]
    query_box: Option<[f64; 4]>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug, Serialize)]
struct PriorArgs {
    /// Number of strongest reference landmarks in the box used as queries.
    #[arg(long = "n-query", default_value_t = 4)]
    n_query: usize,
    /// Landmark distance bound (default: number of query landmarks).
    #[arg(long)]
    d: Option<f64>,
    #[arg(long = "alpha-max", default_value_t = 2.0)]
    alpha_max: f64,
    #[arg(long = "n-alpha", default_value_t = 20)]
    n_alpha: usize,
}

#[derive(Args, Debug, Serialize)]
struct PriorsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "float")]
    floating: PathBuf,
    #[arg(long = "box", value_parser = parse_box)]
    query_box: [f64; 4],
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    prior: PriorArgs,
}

#[derive(Args, Debug, Serialize)]
struct PipelineArgs {
    #[command(flatten)]
    prior: PriorArgs,
    #[arg(long = "lambda-b", default_value_t = 1.0)]
    lambda_b: f64,
    /// Comma-separated lambda_T values.
    #[arg(long = "lambda-T", value_parser = parse_number_list, default_value = "1000,100,10,1,0.1")]
    lambda_t: NumberList,
    /// Search every (lambda_b, lambda_T) pair of the `--lambda-T` values.
    #[arg(long = "grid-2d")]
    grid_2d: bool,
    #[arg(long = "lambda-ic", default_value_t = 0.0)]
    lambda_ic: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::PriorEmbedded)]
    mode: ModeArg,
    #[arg(long, default_value_t = 3)]
    chains: usize,
    #[arg(long, default_value_t = 10_000)]
    iter: usize,
    #[arg(long, default_value_t = 2_000)]
    burnin: usize,
    #[arg(long, default_value_t = 0.95)]
    coverage: f64,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    PriorEmbedded,
    ExplicitPenalty,
}

impl PipelineArgs {
    fn config(&self, seed: u64) -> RegisterConfig {
        let mut values = self.lambda_t.0.clone();
        values.dedup();
        let lambda_grid: Vec<LambdaTuple> = if self.grid_2d {
            grid_2d(&values)
        } else {
            sweep_t(self.lambda_b, &values)
        };
        RegisterConfig {
            prior: self.prior.config(),
            n_query: self.prior.n_query,
            lambda_grid,
            chains: ChainConfig {
                n_chains: self.chains,
                n_iter: self.iter,
                n_burnin: self.burnin,
                seed,
                ..Default::default()
            },
            mode: match self.mode {
                ModeArg::PriorEmbedded => Mode::PriorEmbedded,
                ModeArg::ExplicitPenalty => Mode::ExplicitPenalty,
            },
            lambda_ic: self.lambda_ic,
            coverage: self.coverage,
        }
    }
}

impl PriorArgs {
    fn config(&self) -> PriorConfig {
        PriorConfig {
            d: self.d,
            alpha_max: self.alpha_max,
            n_alpha: self.n_alpha,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct RegisterArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "float")]
    floating: PathBuf,
    #[arg(long = "box", value_parser = parse_box)]
    query_box: [f64; 4],
    #[arg(long)]
    out: PathBuf,
    /// Use this prior JSON instead of estimating one from landmarks.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug, Serialize)]
struct GroupArgs {
    #[arg(long, num_args = 1.., required = true)]
    maps: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    #[arg(long)]
    recovery: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn bbox(b: [f64; 4]) -> BoundingBox {
    BoundingBox::axis_aligned(b[0], b[1], b[2], b[3])
}

fn prepare_out(out: &Path, cli: &Cli) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cli)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> anyhow::Result<VoxelGrid> {
    Ok(load_grid(path)?)
}

#[derive(Serialize)]
struct Truth {
    theta: [f64; 2],
    sigma: [f64; 2],
    omega: f64,
    matrix: [[f64; 3]; 2],
    noise_sd: f64,
    elastic: Option<ElasticSpec>,
    reference_range: Option<(f64, f64)>,
    seed: u64,
}

fn simulate(a: &SimulateArgs, cli: &Cli) -> anyhow::Result<()> {
    prepare_out(&a.out, cli)?;
    let reference = FittedMap::fit(load(&a.reference)?)?;
    let elastic = a.elastic.then_some(ElasticSpec {
        sigma_d: a.sigma_d,
        alpha_d: a.alpha_d,
    });
    let mut rc = RecoveryConfig {
        n: a.batch.unwrap_or(1),
        ranges: ParamRanges::default(),
        noise_sd: a.noise,
        elastic,
        seed: a.seed,
        register: a.pipeline.config(a.seed),
    };
    if let Some(n) = a.batch {
        let Some(b) = a.query_box else {
            bail!(Error::Precondition("--batch needs --box".into()));
        };
        rc.n = n;
        let table = recovery_batch(&reference, &bbox(b), &rc)?;
        table.write_csv(&a.out.join("recovery.csv"))?;
        write_json(&a.out.join("truths.json"), &table.truths)?;
        write_json(&a.out.join("failures.json"), &table.failures)?;
        write_json(&a.out.join("report.json"), &table.report())?;
        return Ok(());
    }
    let t = SimilarityParams::new(a.theta, a.sigma, a.omega);
    if !t.is_valid() {
        bail!(Error::Precondition(format!("invalid transform {t:?}")));
    }
    let floating = synthesize(&reference, &t, &rc, a.seed)?;
    save_grid(&floating, &a.out.join("floating.csv"))?;
    let truth = Truth {
        theta: t.theta,
        sigma: t.sigma,
        omega: t.omega,
        matrix: t.to_matrix().rows(),
        noise_sd: a.noise,
        elastic,
        reference_range: reference.grid.range(),
        seed: a.seed,
    };
    write_json(&a.out.join("truth.json"), &truth)
}

fn landmark_overlay(prior: &RegistrationPrior) -> String {
    let mut s = String::from("role,index,x,y,matched_index\n");
    let fmt = funcreg::grid::fmt_f64;
    for (i, p) in prior.query_points.iter().enumerate() {
        let m = prior.matched_pairs.iter().find(|q| q[0] == i).map_or(String::new(), |q| q[1].to_string());
        s.push_str(&format!("query,{i},{},{},{m}\n", fmt(p[0]), fmt(p[1])));
    }
    for (i, p) in prior.floating_points.iter().enumerate() {
        let m = prior.matched_pairs.iter().find(|q| q[1] == i).map_or(String::new(), |q| q[0].to_string());
        s.push_str(&format!("floating,{i},{},{},{m}\n", fmt(p[0]), fmt(p[1])));
    }
    s
}

fn write_prior(out: &Path, prior: &RegistrationPrior) -> anyhow::Result<()> {
    fs::write(out.join("prior.json"), prior.to_json()?)?;
    fs::write(out.join("landmarks.csv"), landmark_overlay(prior))?;
    Ok(())
}

fn estimate(
    out: &Path,
    reference: &FittedMap,
    floating: &FittedMap,
    b: &BoundingBox,
    cfg: &RegisterConfig,
) -> anyhow::Result<RegistrationPrior> {
    match prior_for(reference, floating, b, cfg) {
        Ok(p) => Ok(p),
        Err(e) => {
            let query = detect_landmarks(&reference.grid).within(b).strongest(cfg.n_query);
            let flt = detect_landmarks(&floating.grid);
            let text = format!(
                "{e}\nquery landmarks: {:?}\nfloating landmarks: {:?}\n",
                query.points, flt.points
            );
            fs::write(out.join("diagnostics.txt"), text)?;
            Err(e.into())
        }
    }
}

fn priors(a: &PriorsArgs, cli: &Cli) -> anyhow::Result<()> {
    prepare_out(&a.out, cli)?;
    let reference = FittedMap::fit(load(&a.reference)?)?;
    let floating = FittedMap::fit(load(&a.floating)?)?;
    let cfg = RegisterConfig {
        prior: a.prior.config(),
        n_query: a.prior.n_query,
        ..Default::default()
    };
    let prior = estimate(&a.out, &reference, &floating, &bbox(a.query_box), &cfg)?;
    write_prior(&a.out, &prior)
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    rhat: Vec<(&'static str, f64)>,
    rhat_max: f64,
    acceptance_rate: &'a [f64],
    selected: LambdaTuple,
    max_khat: f64,
    n_khat_gt_0_7: usize,
    warnings: &'a [String],
    credible_region_error: Option<&'a str>,
}

fn register_cmd(a: &RegisterArgs, cli: &Cli) -> anyhow::Result<()> {
    prepare_out(&a.out, cli)?;
    let reference = FittedMap::fit(load(&a.reference)?)?;
    let floating = FittedMap::fit(load(&a.floating)?)?;
    let b = bbox(a.query_box);
    let cfg = a.pipeline.config(a.seed);
    let prior = match &a.prior {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RegistrationPrior::from_json(&text)?
        }
        None => estimate(&a.out, &reference, &floating, &b, &cfg)?,
    };
    write_prior(&a.out, &prior)?;
    let reg = match register_with_prior(&reference, &floating, &b, prior, &cfg) {
        Ok(r) => r,
        Err(e) => {
            if let Error::NoConvergence(table) = &e {
                fs::write(a.out.join("lambda_grid.csv"), table)?;
            }
            return Err(e.into());
        }
    };
    reg.selection.write_csv(&a.out.join("lambda_grid.csv"))?;
    reg.draws.write_csv(&a.out.join("draws.csv"))?;
    write_json(&a.out.join("summary.json"), &reg.summary)?;
    let sel = &reg.selection;
    let diagnostics = Diagnostics {
        rhat: PARAM_NAMES.iter().copied().zip(reg.draws.rhat.iter().copied()).collect(),
        rhat_max: reg.draws.max_rhat(),
        acceptance_rate: &reg.draws.acceptance_rate,
        selected: sel.grid[sel.selected],
        max_khat: sel.khat[sel.selected],
        n_khat_gt_0_7: sel.n_khat_bad[sel.selected],
        warnings: &reg.draws.warnings,
        credible_region_error: reg.credible.as_ref().err().map(String::as_str),
    };
    write_json(&a.out.join("diagnostics.json"), &diagnostics)?;
    if let Ok(cr) = &reg.credible {
        fs::write(a.out.join("credible_region.json"), cr.to_json()?)?;
    }
    save_grid(&reg.warped, &a.out.join("warped.csv"))?;
    Ok(())
}

fn group(a: &GroupArgs, cli: &Cli) -> anyhow::Result<()> {
    if a.maps.len() < 2 {
        bail!(Error::Group(format!("need at least 2 maps, got {}", a.maps.len())));
    }
    prepare_out(&a.out, cli)?;
    let grids: Vec<VoxelGrid> = a.maps.iter().map(|p| load(p)).collect::<anyhow::Result<_>>()?;
    let stats = group_analysis(&grids)?;
    stats.save(&a.out)?;
    Ok(())
}

fn report(a: &ReportArgs, cli: &Cli) -> anyhow::Result<()> {
    prepare_out(&a.out, cli)?;
    let table = RecoveryTable::read_csv(&a.recovery)?;
    write_json(&a.out.join("report.json"), &table.report())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NoAdmissibleCorrespondence(_)) => EXIT_CORRESPONDENCE,
        Some(Error::NoConvergence(_)) => EXIT_CONVERGENCE,
        Some(Error::Group(_)) | Some(Error::Precondition(_)) => EXIT_USAGE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a, &cli),
        Command::Priors(a) => priors(a, &cli),
        Command::Register(a) => register_cmd(a, &cli),
        Command::Group(a) => group(a, &cli),
        Command::Report(a) => report(a, &cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
