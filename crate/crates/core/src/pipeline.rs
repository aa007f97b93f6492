//! End-to-end composition: split-aware preparation, training, forecasting
//! and the baseline comparison.

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_olr, predict_olr, HaLevel, HistoricalAverage, OlrModel, OLR_RIDGE};
use crate::error::{Error, Result};
use crate::features::{
    make_samples, split_samples, DatasetConfig, DemandSeries, Normalizer, Sample, TimeFeatureSeries,
};
use crate::graph::{build_adjacency, RegionGraph, DEFAULT_EPSILON};
use crate::metrics::{evaluate, Evaluation, DEFAULT_MAPE_FLOOR};
use crate::model::{forecast, ForecastMode, Hyper, ModelParams, Variant, DEFAULT_HIDDEN};
use crate::tensor::Tensor;
use crate::training::{train, CheckpointSink, RunManifest, TrainConfig, TrainOutcome};

/// Model and data settings for a run, as stored in the run config JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub history: usize,
    pub short_window: usize,
    pub patch: usize,
    pub horizon: usize,
    pub hidden: usize,
    /// Override the minimal long-term encoder depth.
    pub long_layers: Option<usize>,
    /// Override the minimal short-term encoder depth.
    pub short_layers: Option<usize>,
    pub variant: Variant,
    pub epsilon: f64,
    pub mape_floor: f64,
    pub model_seed: u64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            history: 12,
            short_window: 3,
            patch: 3,
            horizon: 3,
            hidden: DEFAULT_HIDDEN,
            long_layers: None,
            short_layers: None,
            variant: Variant::default(),
            epsilon: DEFAULT_EPSILON,
            mape_floor: DEFAULT_MAPE_FLOOR,
            model_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn hyper(&self, regions: usize, channels: usize, time_features: usize) -> Result<Hyper> {
        let mut hp = Hyper::new(
            self.history,
            self.short_window,
            self.patch,
            self.horizon,
            regions,
            channels,
            time_features,
        )
        .with_hidden(self.hidden)
        .with_variant(self.variant);
        if let Some(l) = self.long_layers {
            hp.long_layers = l;
        }
        if let Some(l) = self.short_layers {
            hp.short_layers = l;
        }
        hp.validate()?;
        Ok(hp)
    }
}

/// Everything derived from a dataset before training. Graph and normalizer
/// see only steps before the calendar's `train_end_step`.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub demand: DemandSeries,
    pub calendar: DatasetConfig,
    pub graph: RegionGraph,
    pub normalizer: Normalizer,
    pub hyper: Hyper,
    /// Normalized samples.
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// The same anchors in demand units.
    pub train_raw: Vec<Sample>,
    pub test_raw: Vec<Sample>,
}

impl Prepared {
    pub fn train_series(&self) -> Result<DemandSeries> {
        self.demand.window(0..self.calendar.train_end_step)
    }
}

pub fn prepare(demand: DemandSeries, calendar: DatasetConfig, cfg: &RunConfig) -> Result<Prepared> {
    calendar.validate()?;
    let train_end = calendar.train_end_step;
    if train_end == 0 || train_end > demand.steps() {
        return Err(Error::Config(format!(
            "train_end_step {train_end} must lie in 1..={}",
            demand.steps()
        )));
    }
    let train_series = demand.window(0..train_end)?;
    let graph = build_adjacency(&train_series, cfg.epsilon)?;
    let normalizer = Normalizer::fit(&train_series)?;
    let features = TimeFeatureSeries::encode(demand.steps(), &calendar);
    let hyper = cfg.hyper(demand.regions(), demand.channels(), features.width())?;
    let normalized = normalizer.transform_series(&demand)?;
    let (train, test) = split_samples(
        make_samples(&normalized, &features, cfg.history, cfg.horizon)?,
        train_end,
    );
    let (train_raw, test_raw) = split_samples(
        make_samples(&demand, &features, cfg.history, cfg.horizon)?,
        train_end,
    );
    if train.is_empty() {
        return Err(Error::Input(format!(
            "training split (steps 0..{train_end}) is too short for h={} and tau={}",
            cfg.history, cfg.horizon
        )));
    }
    Ok(Prepared {
        demand,
        calendar,
        graph,
        normalizer,
        hyper,
        train,
        test,
        train_raw,
        test_raw,
    })
}

/// Initializes and trains a model on the prepared training split.
pub fn train_model(
    prep: &Prepared,
    cfg: &RunConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    let params = ModelParams::init(prep.hyper.clone(), cfg.model_seed)?;
    train(
        params,
        &prep.train,
        prep.graph.propagation(),
        &cfg.train,
        sink,
    )
}

/// Manifest template for a run on prepared data.
pub fn run_manifest(prep: &Prepared, cfg: &RunConfig) -> RunManifest {
    let mut m = RunManifest::new(&cfg.train, &prep.hyper, cfg.epsilon);
    m.normalizer = Some(prep.normalizer.clone());
    m
}

/// De-normalized forecasts `(B, tau, N, d)` for normalized samples.
pub fn forecast_samples(
    params: &ModelParams,
    prep: &Prepared,
    samples: &[Sample],
    teacher_forced: bool,
    batch_size: usize,
) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to forecast".into()));
    }
    let mut outs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let e = Tensor::stack(
            &chunk
                .iter()
                .map(|s| s.target_features.clone())
                .collect::<Vec<_>>(),
        )?;
        let y = Tensor::stack(&chunk.iter().map(|s| s.targets.clone()).collect::<Vec<_>>())?;
        let mode = if teacher_forced {
            ForecastMode::TeacherForced(&y)
        } else {
            ForecastMode::FreeRunning
        };
        let p = forecast(params, prep.graph.propagation(), &x, &e, mode)?;
        for b in 0..chunk.len() {
            outs.push(prep.normalizer.inverse_transform(&p.index_axis0(b))?);
        }
    }
    Tensor::stack(&outs)
}

pub fn ha_forecasts(ha: &HistoricalAverage, samples: &[Sample]) -> Result<(Tensor, Vec<HaLevel>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut levels = Vec::new();
    for s in samples {
        let (p, l) = ha.predict(s.anchor, s.horizon())?;
        preds.push(p);
        levels.extend(l);
    }
    Ok((Tensor::stack(&preds)?, levels))
}

pub fn olr_forecasts(model: &OlrModel, samples: &[Sample]) -> Result<Tensor> {
    let preds = samples
        .iter()
        .map(|s| predict_olr(model, &s.input))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&preds)
}

pub fn stacked_targets(samples: &[Sample]) -> Result<Tensor> {
    Tensor::stack(
        &samples
            .iter()
            .map(|s| s.targets.clone())
            .collect::<Vec<_>>(),
    )
}

/// How often each Historical Average fallback level was used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HaFallbackCounts {
    pub slot: usize,
    pub time_of_day: usize,
    pub global: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub stg2seq: Evaluation,
    pub ha: Evaluation,
    pub olr: Evaluation,
    pub ha_fallbacks: HaFallbackCounts,
    pub test_samples: usize,
}

impl Comparison {
    pub fn methods(&self) -> [(&'static str, &Evaluation); 3] {
        [
            ("stg2seq", &self.stg2seq),
            ("ha", &self.ha),
            ("olr", &self.olr),
        ]
    }
}

/// Scores the model (free running) and both baselines on the test split.
pub fn compare(params: &ModelParams, prep: &Prepared, cfg: &RunConfig) -> Result<Comparison> {
    if prep.test.is_empty() {
        return Err(Error::Input("test split has no complete samples".into()));
    }
    let truth = stacked_targets(&prep.test_raw)?;
    let model_pred = forecast_samples(params, prep, &prep.test, false, cfg.train.batch_size)?;
    let ha = HistoricalAverage::fit(&prep.train_series()?, &prep.calendar)?;
    let (ha_pred, levels) = ha_forecasts(&ha, &prep.test_raw)?;
    let olr = fit_olr(&prep.train_raw, OLR_RIDGE)?;
    let olr_pred = olr_forecasts(&olr, &prep.test_raw)?;
    let mut counts = HaFallbackCounts::default();
    for l in levels {
        match l {
            HaLevel::Slot => counts.slot += 1,
            HaLevel::TimeOfDay => counts.time_of_day += 1,
            HaLevel::Global => counts.global += 1,
        }
    }
    Ok(Comparison {
        stg2seq: evaluate(&model_pred, &truth, cfg.mape_floor)?,
        ha: evaluate(&ha_pred, &truth, cfg.mape_floor)?,
        olr: evaluate(&olr_pred, &truth, cfg.mape_floor)?,
        ha_fallbacks: counts,
        test_samples: prep.test.len(),
    })
}

/// Forecasts keyed by anchor: `values` is `(B, tau, N, d)`, row `b`
/// belonging to `anchors[b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastTable {
    pub anchors: Vec<usize>,
    pub values: Tensor,
}

impl ForecastTable {
    pub fn new(anchors: Vec<usize>, values: Tensor) -> Result<Self> {
        if values.rank() != 4 || values.shape()[0] != anchors.len() {
            return Err(Error::Dimension(format!(
                "forecast values {:?} do not match {} anchors",
                values.shape(),
                anchors.len()
            )));
        }
        Ok(Self { anchors, values })
    }

    /// `anchor,horizon_step,region,channel,value` with 1-based horizon steps.
    pub fn to_csv(&self) -> String {
        let s = self.values.shape();
        let (tau, n, d) = (s[1], s[2], s[3]);
        let mut out = String::from("anchor,horizon_step,region,channel,value\n");
        let data = self.values.data();
        for (b, anchor) in self.anchors.iter().enumerate() {
            for t in 0..tau {
                for r in 0..n {
                    for c in 0..d {
                        let v = data[((b * tau + t) * n + r) * d + c];
                        out.push_str(&format!("{anchor},{},{r},{c},{v}\n", t + 1));
                    }
                }
            }
        }
        out
    }

    /// Parses the CSV written by [`ForecastTable::to_csv`]. Every anchor must
    /// carry the same complete `(tau, N, d)` grid.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != ["anchor", "horizon_step", "region", "channel", "value"] {
            return Err(Error::Format(format!(
                "forecast header must be anchor,horizon_step,region,channel,value, got {}",
                header.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<usize> {
                rec[k].trim().parse().map_err(|_| {
                    Error::Format(format!(
                        "forecast row {}: `{}` is not an index",
                        i + 2,
                        &rec[k]
                    ))
                })
            };
            let (a, t, r, c) = (field(0)?, field(1)?, field(2)?, field(3)?);
            let v: f64 = rec[4].trim().parse().map_err(|_| {
                Error::Format(format!(
                    "forecast row {}: `{}` is not a number",
                    i + 2,
                    &rec[4]
                ))
            })?;
            if t == 0 {
                return Err(Error::Format(format!(
                    "forecast row {}: horizon_step starts at 1",
                    i + 2
                )));
            }
            rows.push((a, t - 1, r, c, v));
        }
        if rows.is_empty() {
            return Err(Error::Format("forecast file has no rows".into()));
        }
        let mut anchors: Vec<usize> = rows.iter().map(|r| r.0).collect();
        anchors.sort_unstable();
        anchors.dedup();
        let tau = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        let n = rows.iter().map(|r| r.2).max().unwrap_or(0) + 1;
        let d = rows.iter().map(|r| r.3).max().unwrap_or(0) + 1;
        let expected = anchors.len() * tau * n * d;
        let mut values = vec![f64::NAN; expected];
        let mut seen = vec![false; expected];
        for (a, t, r, c, v) in rows {
            let b = anchors.binary_search(&a).expect("anchor listed");
            let idx = ((b * tau + t) * n + r) * d + c;
            if seen[idx] {
                return Err(Error::Format(format!(
                    "duplicate forecast row for anchor {a}, step {}, region {r}, channel {c}",
                    t + 1
                )));
            }
            seen[idx] = true;
            values[idx] = v;
        }
        let missing = seen.iter().filter(|s| !**s).count();
        if missing > 0 {
            return Err(Error::Format(format!(
                "forecast grid incomplete: {missing} of {expected} (anchor, step, region, channel) rows missing"
            )));
        }
        let batch = anchors.len();
        Self::new(anchors, Tensor::new(vec![batch, tau, n, d], values)?)
    }

    pub fn from_csv_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    /// Observed demand at the forecast steps, in the same layout.
    pub fn truth(&self, demand: &DemandSeries) -> Result<Tensor> {
        let s = self.values.shape();
        let (tau, n, d) = (s[1], s[2], s[3]);
        if n != demand.regions() || d != demand.channels() {
            return Err(Error::Dimension(format!(
                "forecast covers {n} regions x {d} channels, data has {} x {}",
                demand.regions(),
                demand.channels()
            )));
        }
        let mut frames = Vec::with_capacity(self.anchors.len());
        for &a in &self.anchors {
            if a + tau >= demand.steps() {
                return Err(Error::Input(format!(
                    "anchor {a} with {tau} steps runs past the data ({} steps)",
                    demand.steps()
                )));
            }
            frames.push(demand.window(a + 1..a + 1 + tau)?.tensor().clone());
        }
        Tensor::stack(&frames)
    }
}
