use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use relu_extract::config::AttackConfig;
use relu_extract::error::Error;
use relu_extract::geometry::{enumerate_cells_2d, Slice};
use relu_extract::network::{generate_random, parse_architecture, NetworkModel, Prefix, RandomInit};
use relu_extract::oracle::Oracle;
use relu_extract::pipeline::{attack_layer, attack_output_layer, build_report, LayerAttack, LayerCost};
use relu_extract::search::Domain;

#[derive(Parser)]
#[command(name = "reluxt", version, about = "Black-box parameter extraction of ReLU networks")]
struct Cli {
    /// Worker threads (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random network with a calibrated activation rate.
    Generate {
        /// Layer widths, e.g. 784-8-8-1.
        architecture: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack one layer, or every layer in turn.
    Attack(AttackArgs),
    /// Compare an extracted model with its target.
    Evaluate {
        target: PathBuf,
        extracted: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write the report as TSV.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Assemble single-layer attack results into a model and report on it.
    Report {
        target: PathBuf,
        /// Layer results from `attack --layer`, any order.
        #[arg(required = true)]
        layers: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the assembled model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
    #[command(subcommand)]
    Demo(Demo),
}

#[derive(Subcommand)]
enum Demo {
    /// Activation regions of a 2-D network as plot data.
    Polytopes {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
        low: f64,
        #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
        high: f64,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: default, double-points, unfiltered.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, e.g. `--set harvest.count=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<AttackConfig, Error> {
        if self.config.is_some() && self.preset.is_some() {
            return Err(Error::Config("use either --config or --preset".into()));
        }
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => AttackConfig::from_toml(&fs::read_to_string(path)?)?,
            (_, Some(name)) => AttackConfig::preset(name)?,
            _ => AttackConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {o:?}")))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct AttackArgs {
    target: PathBuf,
    /// Layer to attack; the output layer is `depth + 1`.
    #[arg(long, conflicts_with = "all")]
    layer: Option<usize>,
    /// Attack every layer, each behind the true prefix unless `--chain` is given.
    #[arg(long)]
    all: bool,
    /// Use the layers recovered so far as the prefix. Float error accumulates and
    /// usually breaks signatures a few layers in.
    #[arg(long, requires = "all")]
    chain: bool,
    /// Model whose first hidden layers form the prefix, instead of the target's.
    #[arg(long)]
    prefix: Option<PathBuf>,
    /// Earlier layer results holding stored evaluations, for the output layer.
    #[arg(long)]
    stored: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Layer result (JSON) for `--layer`, extracted model for `--all`.
    #[arg(long)]
    out: PathBuf,
    /// Report TSV, with `--all`.
    #[arg(long, requires = "all")]
    tsv: Option<PathBuf>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OutputLayerResult {
    layer: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    rows: usize,
    cols: usize,
    queries: u64,
    wall_seconds: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
enum LayerResult {
    Hidden(Box<LayerAttack>),
    Output(OutputLayerResult),
}

fn load_model(path: &Path) -> anyhow::Result<NetworkModel> {
    NetworkModel::load(path).with_context(|| format!("loading {}", path.display()))
}

fn prefix_from(model: &NetworkModel, upto: usize) -> anyhow::Result<Prefix> {
    if upto > model.depth() {
        bail!(Error::Config(format!(
            "prefix model has {} hidden layers, layer {} needs {upto}",
            model.depth(),
            upto + 1
        )));
    }
    Ok(model.prefix(upto)?)
}

fn cost_line(layer: usize, queries: u64, seconds: f64) -> String {
    let log2 = if queries == 0 { 0.0 } else { (queries as f64).log2() };
    format!("layer {layer}: queries 2^{log2:.2} ({queries}), {seconds:.1}s")
}

fn run_attack(args: AttackArgs) -> anyhow::Result<()> {
    let config = args.config.load()?;
    if config.threads > 0 {
        // Ignored when --threads already built the pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global();
    }
    let target = load_model(&args.target)?;
    let depth = target.depth();
    let external = args.prefix.as_deref().map(load_model).transpose()?;
    let oracle = Oracle::new(target.clone());

    if args.all {
        if args.chain {
            log::warn!("chained extraction: errors of earlier layers feed into later ones");
        }
        let mut extracted_layers = Vec::new();
        let mut costs = Vec::new();
        let mut stored = Vec::new();
        for i in 1..=depth {
            let prefix = if args.chain {
                Prefix::new(target.input_dim(), extracted_layers.clone())?
            } else {
                prefix_from(external.as_ref().unwrap_or(&target), i - 1)?
            };
            let a = attack_layer(&oracle, &prefix, Some(target.layer(i)), &config)?;
            println!("{}", cost_line(i, a.stats.queries.total, a.stats.wall_seconds));
            costs.push(Some(LayerCost {
                queries: a.stats.queries.total,
                wall_seconds: a.stats.wall_seconds,
            }));
            stored.extend(a.stored.iter().cloned());
            extracted_layers.push(a.recovered.to_layer()?);
        }
        let hidden = if args.chain {
            Prefix::new(target.input_dim(), extracted_layers.clone())?
        } else {
            prefix_from(external.as_ref().unwrap_or(&target), depth)?
        };
        let t = Instant::now();
        let before = oracle.total_queries();
        extracted_layers.push(attack_output_layer(&hidden, &stored)?);
        let out_queries = oracle.total_queries() - before;
        println!("{}", cost_line(depth + 1, out_queries, t.elapsed().as_secs_f64()));
        costs.push(Some(LayerCost {
            queries: out_queries,
            wall_seconds: t.elapsed().as_secs_f64(),
        }));
        let extracted = NetworkModel::new(extracted_layers)?;
        extracted.save(&args.out)?;
        let report = build_report(&target, &extracted, &costs, &config)?;
        print!("{}", report.summary());
        if let Some(path) = args.tsv {
            fs::write(path, report.to_tsv())?;
        }
        return Ok(());
    }

    let Some(layer) = args.layer else {
        bail!(Error::Config("give --layer or --all".into()));
    };
    if layer == 0 || layer > depth + 1 {
        bail!(Error::LayerIndex { index: layer, max: depth + 1 });
    }
    let prefix = prefix_from(external.as_ref().unwrap_or(&target), layer - 1)?;
    let result = if layer == depth + 1 {
        if args.stored.is_empty() {
            bail!(Error::Config("the output layer needs --stored results from earlier layers".into()));
        }
        let mut pairs = Vec::new();
        for p in &args.stored {
            match serde_json::from_str::<LayerResult>(&fs::read_to_string(p)?)? {
                LayerResult::Hidden(a) => pairs.extend(a.stored),
                LayerResult::Output(_) => bail!(Error::Config(format!("{} holds no stored evaluations", p.display()))),
            }
        }
        let t = Instant::now();
        let l = attack_output_layer(&prefix, &pairs)?;
        let r = OutputLayerResult {
            layer,
            weights: l.weights().to_vec(),
            bias: l.bias().to_vec(),
            rows: l.rows(),
            cols: l.cols(),
            queries: oracle.total_queries(),
            wall_seconds: t.elapsed().as_secs_f64(),
        };
        println!("{}", cost_line(layer, r.queries, r.wall_seconds));
        LayerResult::Output(r)
    } else {
        let a = attack_layer(&oracle, &prefix, Some(target.layer(layer)), &config)?;
        println!("{}", cost_line(layer, a.stats.queries.total, a.stats.wall_seconds));
        println!(
            "kept {} components of {}, {} discarded, {} missing weights",
            a.stats.kept,
            a.stats.components,
            a.discarded.len(),
            a.recovered.missing_weights().len()
        );
        LayerResult::Hidden(Box::new(a))
    };
    fs::write(&args.out, serde_json::to_string(&result)?)?;
    Ok(())
}

fn run_report(target: &Path, layers: &[PathBuf], config: &AttackConfig, model: Option<&Path>, tsv: Option<&Path>) -> anyhow::Result<()> {
    let target = load_model(target)?;
    let depth = target.depth();
    let mut found: Vec<Option<LayerResult>> = (0..=depth).map(|_| None).collect();
    for p in layers {
        let r: LayerResult = serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?;
        let i = match &r {
            LayerResult::Hidden(a) => a.layer,
            LayerResult::Output(o) => o.layer,
        };
        if i == 0 || i > depth + 1 {
            bail!(Error::LayerIndex { index: i, max: depth + 1 });
        }
        found[i - 1] = Some(r);
    }
    let mut out = Vec::new();
    let mut costs = Vec::new();
    let mut stored = Vec::new();
    for (i, r) in found.into_iter().enumerate() {
        match r {
            Some(LayerResult::Hidden(a)) => {
                costs.push(Some(LayerCost {
                    queries: a.stats.queries.total,
                    wall_seconds: a.stats.wall_seconds,
                }));
                stored.extend(a.stored.iter().cloned());
                out.push(a.recovered.to_layer()?);
            }
            Some(LayerResult::Output(o)) => {
                costs.push(Some(LayerCost {
                    queries: o.queries,
                    wall_seconds: o.wall_seconds,
                }));
                out.push(relu_extract::network::Layer::new(o.rows, o.cols, o.weights, o.bias)?);
            }
            None if i == depth => {
                // Fit it here from whatever the hidden-layer runs stored.
                let t = Instant::now();
                out.push(attack_output_layer(&target.prefix(depth)?, &stored)?);
                costs.push(Some(LayerCost {
                    queries: 0,
                    wall_seconds: t.elapsed().as_secs_f64(),
                }));
            }
            None => bail!(Error::Config(format!("no result for layer {}", i + 1))),
        }
    }
    let extracted = NetworkModel::new(out)?;
    if let Some(m) = model {
        extracted.save(m)?;
    }
    let report = build_report(&target, &extracted, &costs, config)?;
    print!("{}", report.summary());
    if let Some(t) = tsv {
        fs::write(t, report.to_tsv())?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { architecture, seed, out } => {
            let widths = parse_architecture(&architecture)?;
            let model = generate_random(&widths, seed, &RandomInit::default())?;
            model.save(&out)?;
            println!("wrote {} ({})", out.display(), model.architecture());
        }
        Command::Attack(args) => run_attack(args)?,
        Command::Evaluate { target, extracted, config, tsv } => {
            let config = config.load()?;
            let target = load_model(&target)?;
            let extracted = load_model(&extracted)?;
            if target.widths() != extracted.widths() {
                bail!(Error::Shape(format!(
                    "architectures differ: {} vs {}",
                    target.architecture(),
                    extracted.architecture()
                )));
            }
            let report = build_report(&target, &extracted, &[], &config)?;
            print!("{}", report.summary());
            if let Some(path) = tsv {
                fs::write(path, report.to_tsv())?;
            }
        }
        Command::Report { target, layers, config, model, tsv } => {
            run_report(&target, &layers, &config.load()?, model.as_deref(), tsv.as_deref())?
        }
        Command::Config { config } => print!("{}", config.load()?.to_toml()),
        Command::Demo(Demo::Polytopes { model, out, low, high, resolution }) => {
            let model = load_model(&model)?;
            if model.input_dim() != 2 {
                bail!(Error::Dimension { expected: 2, got: model.input_dim() });
            }
            if !(low < high) {
                bail!(Error::Config("--low must be below --high".into()));
            }
            let map = enumerate_cells_2d(&model, &Slice::identity(), &Domain::new(2, low, high), resolution)?;
            fs::write(&out, map.to_csv())?;
            println!("{} cells", map.cells.len());
            for w in &map.warnings {
                eprintln!("warning: {w}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_) | Error::Architecture(_) | Error::Format { .. }) => ExitCode::from(2),
                Some(Error::Extraction(_)) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
