use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use migra::classic::{calibrate_beta, fit_production_from, predict_matrix, ClassicModelSpec, ModelKind, ProductionFn};
use migra::dataset::{build, FeatureSchema, FeatureVariant};
use migra::flows::{
    load_flows, load_predicted, read_predicted, write_flows, FlowMatrix, FlowSeries, ZoneTable, FLOW_HEADER,
};
use migra::learn::search::{random_search, SearchSpace, DEFAULT_TRIALS};
use migra::metrics::{evaluate, EvalRecord};
use migra::pipeline::{export_error_map, run_all, Context as RunContext, ModelChoice, RunConfig};
use migra::synth::{synth_dataset, SynthConfig};

#[derive(Parser)]
#[command(name = "migra", version, about = "Migration flow prediction and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Data {
    /// Zone table CSV (`zone_id,lat,lon,population,...`).
    #[arg(long)]
    zones: Option<PathBuf>,
    /// Flow CSV (`year,origin,destination,count`).
    #[arg(long)]
    flows: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Learner {
    Gbt,
    Ann,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a zone table and flow file and print a summary.
    Ingest {
        #[command(flatten)]
        data: Data,
        /// Write the normalized zone table here.
        #[arg(long)]
        out_zones: Option<PathBuf>,
        /// Write the normalized flows here.
        #[arg(long)]
        out_flows: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a classic model.
    Synth {
        /// Output directory; receives zones.csv and flows.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_zones: usize,
        #[arg(long, default_value_t = 6)]
        n_years: usize,
        #[arg(long, default_value = "gravity_power")]
        kind: ModelKind,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Log-normal noise scale; 0 repeats the expected flows every year.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, env = "MIGRA_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Calibrate a classic model on one year, optionally scoring another.
    FitClassic {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        kind: ModelKind,
        #[arg(long)]
        train: i32,
        #[arg(long)]
        test: Option<i32>,
        /// Write the predicted test-year flows here.
        #[arg(long, requires = "test")]
        predictions: Option<PathBuf>,
    },
    /// Random hyperparameter search for one learner.
    Search {
        #[command(flatten)]
        data: Data,
        #[arg(long, value_enum)]
        model: Learner,
        #[arg(long)]
        train: i32,
        #[arg(long)]
        valid: i32,
        #[arg(long, default_value = "extended")]
        features: FeatureVariant,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, env = "MIGRA_SEED", default_value_t = 0)]
        seed: u64,
        /// One JSON line per trial.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the sliding-triplet evaluation.
    Run {
        #[command(flatten)]
        data: Data,
        /// JSON file with dataset paths and run settings; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated, e.g. `radiation,gravity_power,gbt`.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        features: Option<FeatureVariant>,
        #[arg(long, value_enum)]
        production: Option<Switch>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, env = "MIGRA_SEED")]
        seed: Option<u64>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write search trials, one JSON line each, here.
        #[arg(long)]
        search_log: Option<PathBuf>,
        /// Write every test-year prediction to this flow CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write per-zone incoming errors as CSV and GeoJSON.
    ExportMap {
        #[arg(long)]
        zones: PathBuf,
        /// Observed flows.
        #[arg(long)]
        truth: PathBuf,
        /// Predicted flows.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        year: i32,
        /// Prediction model to map when the file holds several (`model` column).
        #[arg(long)]
        model: Option<String>,
        /// CSV output; the GeoJSON goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize, Default)]
struct ConfigFile {
    zones: Option<PathBuf>,
    flows: Option<PathBuf>,
    #[serde(flatten)]
    run: RunConfig,
}

fn load(data: &Data) -> Result<(ZoneTable, Vec<FlowMatrix>)> {
    let (Some(z), Some(f)) = (&data.zones, &data.flows) else {
        bail!("both --zones and --flows are required");
    };
    let zones = ZoneTable::from_csv(z).with_context(|| format!("reading {}", z.display()))?;
    let flows = load_flows(f, &zones).with_context(|| format!("reading {}", f.display()))?;
    Ok((zones, flows.into_matrices()))
}

fn year(flows: &[FlowMatrix], y: i32) -> Result<&FlowMatrix> {
    flows
        .iter()
        .find(|m| m.year() == y)
        .with_context(|| format!("no flows for year {y}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn ingest(data: &Data, out_zones: Option<PathBuf>, out_flows: Option<PathBuf>) -> Result<()> {
    let (zones, flows) = load(data)?;
    println!("{} zones, features: {}", zones.len(), zones.feature_names().join(", "));
    for m in &flows {
        println!("{}: {} pairs with flow, {} migrants", m.year(), m.nnz(), m.total());
    }
    if let Some(p) = out_zones {
        zones.write_csv(create(&p)?)?;
    }
    if let Some(p) = out_flows {
        write_flows(create(&p)?, &flows)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    out: &Path,
    n_zones: usize,
    n_years: usize,
    kind: ModelKind,
    beta: Option<f64>,
    alpha: f64,
    noise: f64,
    seed: u64,
) -> Result<()> {
    let beta = match (kind.has_beta(), beta) {
        (true, None) => bail!("--beta is required for {kind}"),
        (false, Some(_)) => bail!("{kind} takes no --beta"),
        (_, b) => b,
    };
    let generator = ClassicModelSpec::new(kind, beta, ProductionFn::new(alpha)?)?;
    let mut cfg = SynthConfig::new(seed, n_zones, n_years, generator);
    cfg.noise = noise;
    let (zones, flows) = synth_dataset(&cfg)?;
    std::fs::create_dir_all(out)?;
    zones.write_csv(create(&out.join("zones.csv"))?)?;
    write_flows(create(&out.join("flows.csv"))?, &flows)?;
    println!(
        "wrote {} zones and {} years to {}",
        zones.len(),
        flows.len(),
        out.display()
    );
    Ok(())
}

fn fit_classic(
    data: &Data,
    kind: ModelKind,
    train: i32,
    test: Option<i32>,
    predictions: Option<PathBuf>,
) -> Result<()> {
    let (zones, flows) = load(data)?;
    let pairs = migra::geo::pair_features(&zones, &["population"])?;
    let train_flows = year(&flows, train)?;
    let production = fit_production_from(&zones, train_flows)?;
    let spec = if kind.has_beta() {
        calibrate_beta(kind, &zones, &pairs, train_flows, production)?
    } else {
        ClassicModelSpec::radiation(production)
    };
    print_json(&spec)?;
    if let Some(t) = test {
        let pred = predict_matrix(&spec, &zones, &pairs, t)?;
        let report = evaluate(year(&flows, t)?, &pred, &pairs)?;
        print_json(&EvalRecord {
            model: kind.name().into(),
            year: t,
            features: "classic".into(),
            report,
        })?;
        if let Some(p) = predictions {
            write_flows(create(&p)?, &[pred])?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn search(
    data: &Data,
    model: Learner,
    train: i32,
    valid: i32,
    features: FeatureVariant,
    trials: usize,
    seed: u64,
    log: Option<PathBuf>,
) -> Result<()> {
    let (zones, flows) = load(data)?;
    let schema = FeatureSchema::for_variant(features, &zones);
    let pairs = RunContext::pair_features_for(&zones, &schema)?;
    let train_obs = build(&zones, &pairs, year(&flows, train)?, &schema)?;
    let valid_obs = build(&zones, &pairs, year(&flows, valid)?, &schema)?;
    let space = match model {
        Learner::Gbt => SearchSpace::gbt(),
        Learner::Ann => SearchSpace::ann(),
    };
    let outcome = random_search(&space, &train_obs, &valid_obs, trials, seed)?;
    if let Some(p) = log {
        outcome.write_log(create(&p)?)?;
    }
    print_json(outcome.best())?;
    Ok(())
}

struct RunArgs {
    data: Data,
    config: Option<PathBuf>,
    models: Option<String>,
    features: Option<FeatureVariant>,
    production: Option<Switch>,
    trials: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    search_log: Option<PathBuf>,
    predictions: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<()> {
    let mut file = match &args.config {
        Some(p) => serde_json::from_reader(File::open(p).with_context(|| format!("opening {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => ConfigFile::default(),
    };
    let data = Data {
        zones: args.data.zones.or(file.zones.take()),
        flows: args.data.flows.or(file.flows.take()),
    };
    let mut cfg = file.run;
    if let Some(m) = &args.models {
        cfg.models = ModelChoice::parse_list(m)?;
    }
    if let Some(f) = args.features {
        cfg.features = f;
    }
    if let Some(p) = args.production {
        cfg.production = matches!(p, Switch::On);
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.keep_predictions |= args.predictions.is_some();

    let (zones, flows) = load(&data)?;
    let out = run_all(&zones, &flows, &cfg)?;
    print!("{}", out.report.to_table());
    if let Some(p) = &args.out {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &out.report)?;
        writeln!(w)?;
    }
    if let Some(p) = &args.search_log {
        let mut w = create(p)?;
        for (year, model, s) in &out.searches {
            for t in &s.trials {
                let mut line = serde_json::to_value(t)?;
                line["test_year"] = (*year).into();
                line["learner"] = model.as_str().into();
                serde_json::to_writer(&mut w, &line)?;
                writeln!(w)?;
            }
        }
    }
    if let Some(p) = &args.predictions {
        let mut w = csv::Writer::from_writer(create(p)?);
        w.write_record(std::iter::once("model").chain(FLOW_HEADER))?;
        for (_, pred) in &out.predictions {
            let ids = pred.flows.zone_ids();
            for (i, j, v) in pred.flows.entries() {
                w.write_record([
                    pred.model.as_str(),
                    &pred.flows.year().to_string(),
                    &ids[i],
                    &ids[j],
                    &v.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Prediction files from `run` carry a leading `model` column; keep the rows
/// for one model so the rest parses as a plain flow file.
fn read_predictions(path: &Path, model: Option<&str>, zones: &ZoneTable) -> Result<FlowSeries<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.get(0) != Some("model") {
        if model.is_some() {
            bail!("{} has no model column", path.display());
        }
        return Ok(load_predicted(path, zones)?);
    }
    let Some(model) = model else {
        bail!("{} holds model predictions; pick one with --model", path.display());
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FLOW_HEADER)?;
    let mut found = false;
    for rec in rdr.records() {
        let rec = rec?;
        if &rec[0] == model {
            found = true;
            w.write_record(rec.iter().skip(1))?;
        }
    }
    if !found {
        bail!("no predictions for model `{model}` in {}", path.display());
    }
    Ok(read_predicted(&w.into_inner()?[..], path, zones)?)
}

fn export_map(zones: &Path, truth: &Path, pred: &Path, y: i32, model: Option<&str>, out: &Path) -> Result<()> {
    let zones = ZoneTable::from_csv(zones)?;
    let truth = load_flows(truth, &zones)?;
    let pred = read_predictions(pred, model, &zones)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    export_error_map(truth.year(y)?, pred.year(y)?, &zones, out)?;
    println!(
        "wrote {} and {}",
        out.display(),
        out.with_extension("geojson").display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Ingest {
            data,
            out_zones,
            out_flows,
        } => ingest(&data, out_zones, out_flows),
        Command::Synth {
            out,
            n_zones,
            n_years,
            kind,
            beta,
            alpha,
            noise,
            seed,
        } => synth(&out, n_zones, n_years, kind, beta, alpha, noise, seed),
        Command::FitClassic {
            data,
            kind,
            train,
            test,
            predictions,
        } => fit_classic(&data, kind, train, test, predictions),
        Command::Search {
            data,
            model,
            train,
            valid,
            features,
            trials,
            seed,
            log,
        } => search(&data, model, train, valid, features, trials, seed, log),
        Command::Run {
            data,
            config,
            models,
            features,
            production,
            trials,
            seed,
            out,
            search_log,
            predictions,
        } => run(RunArgs {
            data,
            config,
            models,
            features,
            production,
            trials,
            seed,
            out,
            search_log,
            predictions,
        }),
        Command::ExportMap {
            zones,
            truth,
            pred,
            year,
            model,
            out,
        } => export_map(&zones, &truth, &pred, year, model.as_deref(), &out),
    }
}
