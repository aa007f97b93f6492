use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stg2seq::baselines::{fit_olr, HistoricalAverage, OLR_RIDGE};
use stg2seq::features::{encode_time, DatasetConfig, DemandSeries, Normalizer};
use stg2seq::graph::{build_adjacency, matrix_to_csv, GraphSidecar, DEFAULT_EPSILON};
use stg2seq::metrics::{comparison_csv, evaluate, DEFAULT_MAPE_FLOOR};
use stg2seq::model::{forecast, ForecastMode, ModelParams};
use stg2seq::pipeline::{
    compare, forecast_samples, ha_forecasts, olr_forecasts, prepare, run_manifest, train_model,
    ForecastTable, RunConfig,
};
use stg2seq::synth::{generate, SynthConfig};
use stg2seq::tensor::Tensor;
use stg2seq::training::{manifest_path, sha256_hex, CheckpointSink, RunManifest};
use stg2seq::Error;

const EXIT_INPUT: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_SELF_TEST: u8 = 3;

/// Graph-convolutional multi-step demand forecasting.
#[derive(Parser, Debug)]
#[command(name = "stg2seq", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset (demand.csv + dataset.json).
    SynthData(SynthArgs),
    /// Build the region graph from the training split.
    BuildGraph(GraphArgs),
    /// Train a model; writes model.json and model.manifest.json.
    Train(TrainArgs),
    /// Forecast from one anchor step with a trained checkpoint.
    Forecast(ForecastArgs),
    /// Score a forecast CSV against observed demand.
    Evaluate(EvaluateArgs),
    /// Compare the model with Historical Average and OLR on the test split.
    Compare(CompareArgs),
    /// Run gradient checks and analytic graph cases.
    SelfTest,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Demand CSV with header step,region,channel,value.
    #[arg(long, env = "STG2SEQ_DATA")]
    data: PathBuf,
    /// Dataset config JSON; defaults to dataset.json beside the demand CSV.
    #[arg(long, env = "STG2SEQ_DATASET")]
    dataset: Option<PathBuf>,
}

impl DataArgs {
    fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| {
            self.data
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("dataset.json")
        })
    }

    fn load(&self) -> anyhow::Result<(DemandSeries, DatasetConfig)> {
        let demand = DemandSeries::from_csv_path(&self.data)
            .with_context(|| format!("reading demand from {}", self.data.display()))?;
        let path = self.dataset_path();
        let calendar = DatasetConfig::from_json_path(&path)
            .with_context(|| format!("reading dataset config from {}", path.display()))?;
        Ok((demand, calendar))
    }

    fn hashes(&self) -> anyhow::Result<std::collections::BTreeMap<String, String>> {
        let mut out = std::collections::BTreeMap::new();
        for (key, path) in [
            ("demand", self.data.clone()),
            ("dataset", self.dataset_path()),
        ] {
            let bytes =
                std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            out.insert(key.to_string(), sha256_hex(&bytes));
        }
        Ok(out)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, env = "STG2SEQ_REGIONS")]
    regions: usize,
    #[arg(long, env = "STG2SEQ_STEPS")]
    steps: usize,
    #[arg(long, env = "STG2SEQ_STEPS_PER_DAY", default_value_t = 24)]
    steps_per_day: usize,
    #[arg(long, env = "STG2SEQ_CHANNELS", default_value_t = 2)]
    channels: usize,
    #[arg(long, env = "STG2SEQ_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "STG2SEQ_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "STG2SEQ_EPSILON", default_value_t = DEFAULT_EPSILON, allow_negative_numbers = true)]
    epsilon: f64,
    #[arg(long, env = "STG2SEQ_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run config JSON (model sizes, epsilon, training settings).
    #[arg(long, env = "STG2SEQ_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "STG2SEQ_OUT")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Free,
    Teacher,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long, env = "STG2SEQ_CHECKPOINT")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Last observed step of the input window.
    #[arg(long, env = "STG2SEQ_ANCHOR")]
    anchor: usize,
    #[arg(long, env = "STG2SEQ_TAU")]
    tau: usize,
    #[arg(long, env = "STG2SEQ_MODE", value_enum, default_value_t = Mode::Free)]
    mode: Mode,
    /// Output CSV; standard output when absent.
    #[arg(long, env = "STG2SEQ_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, env = "STG2SEQ_FORECAST")]
    forecast: PathBuf,
    /// Demand CSV holding the observed values.
    #[arg(long, env = "STG2SEQ_TRUTH")]
    truth: PathBuf,
    #[arg(long, env = "STG2SEQ_MAPE_FLOOR", default_value_t = DEFAULT_MAPE_FLOOR)]
    mape_floor: f64,
    /// Also write metrics.json and metrics.csv here.
    #[arg(long, env = "STG2SEQ_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "STG2SEQ_CONFIG")]
    config: Option<PathBuf>,
    /// Use this checkpoint instead of training.
    #[arg(long, env = "STG2SEQ_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "STG2SEQ_OUT")]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json_path(p)
            .with_context(|| format!("reading run config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn synth_data(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        channels: args.channels,
        ..SynthConfig::new(args.regions, args.steps, args.steps_per_day, args.seed)
    };
    let ds = generate(&cfg)?;
    create_dir(&args.out)?;
    write(&args.out.join("demand.csv"), &ds.demand.to_csv_string())?;
    write(
        &args.out.join("dataset.json"),
        &serde_json::to_string_pretty(&ds.calendar)?,
    )?;
    eprintln!(
        "wrote {} steps x {} regions x {} channels to {}",
        args.steps,
        args.regions,
        args.channels,
        args.out.display()
    );
    Ok(())
}

fn build_graph(args: GraphArgs) -> anyhow::Result<()> {
    let (demand, calendar) = args.data.load()?;
    let end = calendar.train_end_step.min(demand.steps());
    let graph = build_adjacency(&demand.window(0..end)?, args.epsilon)?;
    create_dir(&args.out)?;
    write(
        &args.out.join("adjacency.csv"),
        &matrix_to_csv(graph.adjacency()),
    )?;
    write(
        &args.out.join("propagation.csv"),
        &matrix_to_csv(graph.propagation()),
    )?;
    let sidecar = GraphSidecar::from(&graph);
    write(
        &args.out.join("graph.json"),
        &serde_json::to_string_pretty(&sidecar)?,
    )?;
    eprintln!(
        "{} regions, {} edges at epsilon {}",
        sidecar.n_regions, sidecar.edge_count, sidecar.epsilon
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let (demand, calendar) = args.data.load()?;
    let prep = prepare(demand, calendar, &cfg)?;
    create_dir(&args.out)?;
    let mut manifest = run_manifest(&prep, &cfg);
    manifest.data_hashes = args.data.hashes()?;
    let sink = CheckpointSink {
        path: args.out.join("model.json"),
        manifest,
    };
    let out = train_model(&prep, &cfg, Some(&sink))?;
    let last = out.report.loss_history.last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "trained {} epochs ({} steps) on {} samples, final loss {last:.6}; checkpoint {}",
        out.report.epochs,
        out.report.steps,
        prep.train.len(),
        sink.path.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(ModelParams, RunManifest)> {
    let params = ModelParams::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).with_context(|| {
        format!(
            "reading run manifest {} (written beside every checkpoint)",
            mpath.display()
        )
    })?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", mpath.display()))?;
    Ok((params, manifest))
}

fn forecast_cmd(args: ForecastArgs) -> anyhow::Result<()> {
    let (params, manifest) = load_checkpoint(&args.checkpoint)?;
    let (demand, calendar) = args.data.load()?;
    let hp = &params.hyper;
    if demand.regions() != hp.regions || demand.channels() != hp.in_channels {
        return Err(Error::Input(format!(
            "data has {} regions x {} channels, checkpoint expects {} x {}",
            demand.regions(),
            demand.channels(),
            hp.regions,
            hp.in_channels
        ))
        .into());
    }
    if args.tau == 0 {
        return Err(Error::Input("--tau must be at least 1".into()).into());
    }
    if args.anchor + 1 < hp.history || args.anchor >= demand.steps() {
        return Err(Error::Input(format!(
            "anchor {} needs {} observed steps ending there; data has steps 0..{}",
            args.anchor,
            hp.history,
            demand.steps()
        ))
        .into());
    }
    let normalizer: Normalizer = manifest
        .normalizer
        .clone()
        .ok_or_else(|| Error::Format("run manifest lacks the normalizer".into()))?;
    let end = calendar.train_end_step.min(demand.steps());
    let graph = build_adjacency(&demand.window(0..end)?, manifest.graph_epsilon)?;
    let input = normalizer.transform(
        demand
            .window(args.anchor + 1 - hp.history..args.anchor + 1)?
            .tensor(),
    )?;
    let rows: Vec<f64> = (1..=args.tau)
        .flat_map(|i| encode_time(args.anchor + i, &calendar))
        .collect();
    let features = Tensor::new(vec![args.tau, calendar.feature_width()], rows)?;
    let pred = match args.mode {
        Mode::Free => forecast(
            &params,
            graph.propagation(),
            &input,
            &features,
            ForecastMode::FreeRunning,
        )?,
        Mode::Teacher => {
            if args.anchor + args.tau >= demand.steps() {
                return Err(Error::Input(format!(
                    "teacher forcing needs observed steps up to {}, data ends at {}",
                    args.anchor + args.tau,
                    demand.steps() - 1
                ))
                .into());
            }
            let truth = normalizer.transform(
                demand
                    .window(args.anchor + 1..args.anchor + 1 + args.tau)?
                    .tensor(),
            )?;
            forecast(
                &params,
                graph.propagation(),
                &input,
                &features,
                ForecastMode::TeacherForced(&truth),
            )?
        }
    };
    let pred = normalizer.inverse_transform(&pred)?;
    let mut shape = vec![1];
    shape.extend_from_slice(pred.shape());
    let table = ForecastTable::new(vec![args.anchor], pred.reshape(&shape)?)?;
    match &args.out {
        Some(p) => write(p, &table.to_csv()),
        None => emit(&table.to_csv()),
    }
}

fn evaluate_cmd(args: EvaluateArgs) -> anyhow::Result<()> {
    let table = ForecastTable::from_csv_path(&args.forecast)
        .with_context(|| format!("reading forecast {}", args.forecast.display()))?;
    let demand = DemandSeries::from_csv_path(&args.truth)
        .with_context(|| format!("reading truth {}", args.truth.display()))?;
    let truth = table.truth(&demand)?;
    let eval = evaluate(&table.values, &truth, args.mape_floor)?;
    let json = eval.to_json()?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write(&dir.join("metrics.json"), &json)?;
        write(&dir.join("metrics.csv"), &eval.to_csv())?;
    }
    emit(&format!("{json}\n"))
}

fn compare_cmd(args: CompareArgs) -> anyhow::Result<()> {
    let cfg = load_run_config(args.config.as_deref())?;
    let (demand, calendar) = args.data.load()?;
    let prep = prepare(demand, calendar, &cfg)?;
    create_dir(&args.out)?;
    let params = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => {
            let mut manifest = run_manifest(&prep, &cfg);
            manifest.data_hashes = args.data.hashes()?;
            let sink = CheckpointSink {
                path: args.out.join("model.json"),
                manifest,
            };
            train_model(&prep, &cfg, Some(&sink))?.params
        }
    };
    if params.hyper != prep.hyper {
        bail!(Error::Input(
            "checkpoint hyperparameters do not match the run config and data".into()
        ));
    }
    let cmp = compare(&params, &prep, &cfg)?;
    let anchors: Vec<usize> = prep.test.iter().map(|s| s.anchor).collect();
    let model_pred = forecast_samples(&params, &prep, &prep.test, false, cfg.train.batch_size)?;
    let ha = HistoricalAverage::fit(&prep.train_series()?, &prep.calendar)?;
    let ha_pred = ha_forecasts(&ha, &prep.test_raw)?.0;
    let olr_pred = olr_forecasts(&fit_olr(&prep.train_raw, OLR_RIDGE)?, &prep.test_raw)?;
    for (name, pred) in [("stg2seq", model_pred), ("ha", ha_pred), ("olr", olr_pred)] {
        let table = ForecastTable::new(anchors.clone(), pred)?;
        write(
            &args.out.join(format!("forecast_{name}.csv")),
            &table.to_csv(),
        )?;
    }
    for (name, eval) in cmp.methods() {
        write(
            &args.out.join(format!("metrics_{name}.csv")),
            &eval.to_csv(),
        )?;
    }
    write(
        &args.out.join("comparison.json"),
        &serde_json::to_string_pretty(&cmp)?,
    )?;
    write(&args.out.join("plot.csv"), &comparison_csv(&cmp.methods()))?;
    let mut table = String::from("method   step  rmse      mae       mape\n");
    for (name, eval) in cmp.methods() {
        for m in &eval.per_step {
            let mape = m
                .mape
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into());
            table += &format!(
                "{name:<8} {:<5} {:<9.4} {:<9.4} {mape}\n",
                m.step, m.rmse, m.mae
            );
        }
        let a = &eval.aggregate;
        let mape = a
            .mape
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        table += &format!("{name:<8} all   {:<9.4} {:<9.4} {mape}\n", a.rmse, a.mae);
    }
    emit(&table)
}

fn self_test() -> ExitCode {
    let checks = stg2seq::selftest::run();
    let mut ok = true;
    for c in &checks {
        println!(
            "[{}] {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.pass;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_SELF_TEST)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Numerical(_)) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::BuildGraph(a) => build_graph(a),
        Command::Train(a) => train_cmd(a),
        Command::Forecast(a) => forecast_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::SelfTest => return self_test(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e
                .chain()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(": ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
