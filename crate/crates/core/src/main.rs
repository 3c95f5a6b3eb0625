use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

use layercard::card::{
    build_card, strategy_layers, transfer_select, CardConfig, CostSource, LayerCard, Objective, Strategy, Weighting,
};
use layercard::costmodel::{calibrate, estimate, CostCoeffs};
use layercard::io::{canonical_json, read_json, to_canonical};
use layercard::residual::EnergyNormalization;
use layercard::toynet::{
    generate, layer_costs, profile_layers_with, profiles_from_csv, profiles_to_csv, Batch, FinetuneConfig,
    GradAggregation, Nonlinearity, ProfileConfig, ToyModel, ToyModelSpec,
};
use layercard::verify::run_verify;
use layercard::{Error, Result};

#[derive(Parser)]
#[command(name = "layercard", version, about = "Layer selection diagnostics for adapter fine-tuning")]
struct Cli {
    /// TOML file whose keys mirror the long flags; explicit flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy model and print its model_id.
    Gen(GenArgs),
    /// Sample a teacher-labelled batch as CSV.
    Sample(SampleArgs),
    /// Per-layer gradient and residual profile as CSV.
    Profile(ProfileArgs),
    #[command(subcommand)]
    Card(CardCommand),
    /// Randomized audit of the coupling and residual bounds.
    Verify(VerifyArgs),
    #[command(subcommand)]
    Cost(CostCommand),
}

#[derive(Subcommand)]
enum CardCommand {
    /// Profile, stratify, fine-tune and price each regime.
    Build(BuildArgs),
    /// Choose a regime for a target profile from reference cards.
    Transfer(TransferArgs),
}

#[derive(Subcommand)]
enum CostCommand {
    /// Cost of one layer set.
    Estimate(EstimateArgs),
    /// Fit cost coefficients to measured step work.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value = "tanh")]
    nonlinearity: Nonlinearity,
    #[arg(long, default_value_t = 1)]
    head_dim: usize,
    /// 0-based layers whose weights the teacher perturbs.
    #[arg(long, value_delimiter = ',')]
    teacher_layers: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    teacher_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Probe batch: a CSV file, or samples drawn from the model's teacher.
#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    probe_samples: usize,
    #[arg(long, default_value_t = 1)]
    probe_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    eval_samples: usize,
    #[arg(long, default_value_t = 2)]
    eval_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    PerSampleNorm,
    NormOfMean,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    PerDimension,
    Total,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    probe: ProbeArgs,
    /// Rank of the probe adapter.
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, value_enum, default_value = "per-sample-norm")]
    aggregation: AggregationArg,
    #[arg(long, value_enum, default_value = "per-dimension")]
    normalization: NormalizationArg,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    probe: ProbeArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 3)]
    regimes: usize,
    #[arg(long, default_value_t = 4)]
    k_per: usize,
    /// Adapter rank used for fine-tuning and cost measurement.
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 4)]
    profile_rank: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Fixed gradient step; omitted means backtracking line search.
    #[arg(long)]
    step_size: Option<f64>,
    /// JSON cost coefficients; omitted means calibrate on the probe batch.
    #[arg(long)]
    cost_coeffs: Option<PathBuf>,
    #[arg(long, default_value = "probe")]
    reference_name: String,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    /// Reference card (repeatable).
    #[arg(long, required = true)]
    card: Vec<PathBuf>,
    /// Target profile CSV; alternatively profile `--model` on the probe batch.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, default_value_t = 4)]
    profile_rank: usize,
    #[arg(long, default_value_t = layercard::card::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value = "max_performance")]
    objective: Objective,
    #[arg(long, value_enum, default_value = "unweighted")]
    weighting: WeightingArg,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Unweighted,
    Similarity,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Explicit 0-based layer set.
    #[arg(long, value_delimiter = ',')]
    set: Vec<usize>,
    /// Placement strategy used when `--set` is absent.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Profile CSV ranking the layers for resnorm strategies.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON with cost coefficients (bare, or under `coeffs`/`cost_coeffs`).
    #[arg(long)]
    coeffs: Option<PathBuf>,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match parse_with_config(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => return fail(&e),
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

/// Parses argv, then appends flags from the `--config` file for every key
/// not given explicitly and parses again. Top-level keys apply to every
/// command; tables named after subcommands (`[card.build]`) refine them.
fn parse_with_config(args: Vec<OsString>) -> Result<Cli> {
    let first = Cli::command().try_get_matches_from(&args).unwrap_or_else(|e| e.exit());
    let Some(path) = first.get_one::<PathBuf>("config").cloned() else {
        return Ok(Cli::from_arg_matches(&first).unwrap_or_else(|e| e.exit()));
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text.parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;

    let mut names = Vec::new();
    let mut leaf_matches = &first;
    while let Some((name, sub)) = leaf_matches.subcommand() {
        names.push(name.to_string());
        leaf_matches = sub;
    }
    let root = Cli::command();
    let mut leaf = &root;
    for n in &names {
        leaf = leaf.find_subcommand(n).expect("matched subcommand exists");
    }

    let mut entries: BTreeMap<String, toml::Value> = BTreeMap::new();
    let mut scope = Some(&table);
    let mut depth = 0;
    while let Some(t) = scope {
        for (k, v) in t {
            if !v.is_table() {
                entries.insert(k.replace('_', "-"), v.clone());
            }
        }
        scope = names.get(depth).and_then(|n| t.get(n)).and_then(toml::Value::as_table);
        depth += 1;
    }

    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let arg = leaf
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| Error::InvalidArgument(format!("config key {key:?} is not a flag of this command")))?;
        if leaf_matches.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{key}");
        if !arg.get_action().takes_values() {
            match value {
                toml::Value::Boolean(true) => extra.push(flag.into()),
                toml::Value::Boolean(false) => {}
                _ => return Err(Error::InvalidArgument(format!("config key {key:?} must be a boolean"))),
            }
            continue;
        }
        let items = match value {
            toml::Value::Array(items) => items,
            scalar => vec![scalar],
        };
        let repeat = matches!(arg.get_action(), ArgAction::Append);
        let rendered = items.iter().map(toml_scalar).collect::<Result<Vec<_>>>()?;
        if repeat {
            for r in rendered {
                extra.push(flag.clone().into());
                extra.push(r.into());
            }
        } else {
            extra.push(flag.into());
            extra.push(rendered.join(",").into());
        }
    }
    let mut full = args;
    full.extend(extra);
    Ok(Cli::try_parse_from(full).unwrap_or_else(|e| e.exit()))
}

fn toml_scalar(v: &toml::Value) -> Result<String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        other => Err(Error::InvalidArgument(format!("unsupported config value {other}"))),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Card(CardCommand::Build(a)) => cmd_card_build(a),
        Command::Card(CardCommand::Transfer(a)) => cmd_card_transfer(a),
        Command::Verify(a) => return cmd_verify(a),
        Command::Cost(CostCommand::Estimate(a)) => cmd_cost_estimate(a),
        Command::Cost(CostCommand::Calibrate(a)) => cmd_cost_calibrate(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<ToyModel> {
    ToyModel::from_json_value(read_json(path)?)
}

fn load_batch(model: &ToyModel, file: Option<&Path>, samples: usize, seed: u64) -> Result<Batch> {
    let batch = match file {
        Some(p) => Batch::from_csv(&read_text(p)?)?,
        None => Batch::sample(model, samples, seed)?,
    };
    batch.check(model)?;
    Ok(batch)
}

fn load_probe(model: &ToyModel, p: &ProbeArgs) -> Result<Batch> {
    load_batch(model, p.probe.as_deref(), p.probe_samples, p.probe_seed)
}

fn profile_config(rank: usize) -> ProfileConfig {
    ProfileConfig { rank, ..ProfileConfig::default() }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = ToyModelSpec {
        layers: a.layers,
        width: a.width,
        nonlinearity: a.nonlinearity,
        head_dim: a.head_dim,
        teacher_layers: a.teacher_layers,
        teacher_scale: a.teacher_scale,
        seed: a.seed,
    };
    let model = generate(&spec)?;
    let value = model.to_json_value();
    std::fs::write(&a.out, canonical_json(&value) + "\n")?;
    println!("{}", layercard::card::model_id(&model));
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    emit(a.out.as_deref(), &Batch::sample(&model, a.samples, a.seed)?.to_csv())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let probe = load_probe(&model, &a.probe)?;
    let cfg = ProfileConfig {
        aggregation: match a.aggregation {
            AggregationArg::PerSampleNorm => GradAggregation::PerSampleNorm,
            AggregationArg::NormOfMean => GradAggregation::NormOfMean,
        },
        normalization: match a.normalization {
            NormalizationArg::PerDimension => EnergyNormalization::PerDimension,
            NormalizationArg::Total => EnergyNormalization::Total,
        },
        ..profile_config(a.rank)
    };
    emit(a.out.as_deref(), &profiles_to_csv(&profile_layers_with(&model, &probe, &cfg)?))
}

fn load_coeffs(path: &Path) -> Result<CostCoeffs> {
    let v = read_json(path)?;
    let inner = v.get("coeffs").or_else(|| v.get("cost_coeffs")).cloned().unwrap_or(v);
    let c: CostCoeffs = serde_json::from_value(inner)?;
    c.validate()?;
    Ok(c)
}

fn cmd_card_build(a: BuildArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let probe = load_probe(&model, &a.probe)?;
    let eval = load_batch(&model, a.eval.eval.as_deref(), a.eval.eval_samples, a.eval.eval_seed)?;
    let cfg = CardConfig {
        regimes: a.regimes,
        k_per: a.k_per,
        finetune: FinetuneConfig { rank: a.rank, steps: a.steps, step_size: a.step_size },
        profile: profile_config(a.profile_rank),
        cost: match &a.cost_coeffs {
            Some(p) => CostSource::Fixed(load_coeffs(p)?),
            None => CostSource::Calibrated,
        },
        reference_name: a.reference_name,
    };
    let card = build_card(&model, &probe, &eval, &cfg)?;
    emit(a.out.as_deref(), &(card.to_canonical() + "\n"))?;
    if a.out.is_some() {
        print!("{}", card.to_table());
    }
    Ok(())
}

fn cmd_card_transfer(a: TransferArgs) -> Result<()> {
    let cards = a
        .card
        .iter()
        .map(|p| LayerCard::from_json_value(read_json(p)?))
        .collect::<Result<Vec<_>>>()?;
    let target: Vec<f64> = match (&a.target, &a.model) {
        (Some(t), None) => profiles_from_csv(&read_text(t)?)?.iter().map(|p| p.resnorm).collect(),
        (None, Some(m)) => {
            let model = load_model(m)?;
            let probe = load_probe(&model, &a.probe)?;
            profile_layers_with(&model, &probe, &profile_config(a.profile_rank))?.iter().map(|p| p.resnorm).collect()
        }
        _ => return Err(Error::InvalidArgument("give exactly one of --target or --model".into())),
    };
    let weighting = match a.weighting {
        WeightingArg::Unweighted => Weighting::Unweighted,
        WeightingArg::Similarity => Weighting::Similarity,
    };
    let decision = transfer_select(&cards, &target, a.tau, a.objective, weighting)?;
    emit(a.out.as_deref(), &(to_canonical(&decision)? + "\n"))
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let report = run_verify(a.instances, a.seed)?;
    emit(a.out.as_deref(), &report.to_csv())?;
    if report.passed() {
        return Ok(ExitCode::SUCCESS);
    }
    let mut seeds: Vec<u64> = report.violations().map(|r| r.seed).collect();
    seeds.dedup();
    for r in report.violations() {
        eprintln!("violation: seed {} check {} exact {:e} bound {:e}", r.seed, r.check, r.exact, r.bound);
    }
    eprintln!("failing seeds: {}", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    Ok(ExitCode::from(1))
}

fn calibrated(model: &ToyModel, probe: &ProbeArgs, rank: usize) -> Result<layercard::costmodel::Calibration> {
    let batch = load_probe(model, probe)?;
    let (flops, act) = layer_costs(model);
    calibrate(&layercard::card::measure_costs(model, &batch, rank)?, model.layers(), &flops, &act)
}

fn cmd_cost_estimate(a: EstimateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let set = match (a.set.is_empty(), a.strategy) {
        (false, None) => a.set.clone(),
        (true, Some(s)) => {
            let profiles = a.profile.as_deref().map(|p| profiles_from_csv(&read_text(p)?)).transpose()?;
            strategy_layers(s, a.k, model.layers(), profiles.as_deref(), a.seed)?
        }
        _ => return Err(Error::InvalidArgument("give exactly one of --set or --strategy".into())),
    };
    let coeffs = match &a.coeffs {
        Some(p) => load_coeffs(p)?,
        None => calibrated(&model, &a.probe, a.rank)?.coeffs,
    };
    let (flops, act) = layer_costs(&model);
    let est = estimate(&set, model.layers(), &flops, &act, &coeffs)?;
    let v = json!({ "layers": set, "coeffs": coeffs, "estimate": est });
    emit(a.out.as_deref(), &(canonical_json(&v) + "\n"))
}

fn cmd_cost_calibrate(a: CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cal = calibrated(&model, &a.probe, a.rank)?;
    emit(a.out.as_deref(), &(to_canonical(&cal)? + "\n"))
}
