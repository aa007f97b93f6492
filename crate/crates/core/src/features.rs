//! Demand series, calendar features, Min-Max scaling and supervised samples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Citywide demand over time, shape `(T, N, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DemandSeries {
    data: Tensor,
}

impl DemandSeries {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Dimension(format!(
                "demand series must be (steps, regions, channels), got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn value(&self, step: usize, region: usize, channel: usize) -> f64 {
        self.data.get(&[step, region, channel])
    }

    /// Frame at one step, shape `(N, d)`.
    pub fn frame(&self, step: usize) -> Tensor {
        self.data.index_axis0(step)
    }

    /// Steps `range`, as a new series.
    pub fn window(&self, range: std::ops::Range<usize>) -> Result<DemandSeries> {
        if range.start > range.end || range.end > self.steps() {
            return Err(Error::Input(format!(
                "window {range:?} exceeds series of {} steps",
                self.steps()
            )));
        }
        let frame = self.regions() * self.channels();
        let data = self.data.data()[range.start * frame..range.end * frame].to_vec();
        DemandSeries::new(Tensor::new(
            vec![range.end - range.start, self.regions(), self.channels()],
            data,
        )?)
    }

    /// Parses the `step,region,channel,value` CSV schema. Every
    /// (step, region, channel) triple of the dense grid must appear once.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = ["step", "region", "channel", "value"];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Format(format!(
                "demand CSV header must be `step,region,channel,value`, found `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let parse_idx = |i: usize| -> Result<usize> {
                field(i).parse().map_err(|_| {
                    Error::Format(format!(
                        "row {}: `{}` is not a non-negative integer",
                        line + 2,
                        field(i)
                    ))
                })
            };
            let value: f64 = field(3).parse().map_err(|_| {
                Error::Format(format!("row {}: `{}` is not a number", line + 2, field(3)))
            })?;
            if !value.is_finite() {
                return Err(Error::Format(format!("row {}: non-finite value", line + 2)));
            }
            rows.push((parse_idx(0)?, parse_idx(1)?, parse_idx(2)?, value));
        }
        if rows.is_empty() {
            return Err(Error::Input("demand CSV has no rows".into()));
        }
        let t = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let n = rows.iter().map(|r| r.1).max().unwrap() + 1;
        let d = rows.iter().map(|r| r.2).max().unwrap() + 1;
        let mut data = vec![f64::NAN; t * n * d];
        for &(s, r, c, v) in &rows {
            let slot = &mut data[(s * n + r) * d + c];
            if !slot.is_nan() {
                return Err(Error::Format(format!(
                    "duplicate row for step {s}, region {r}, channel {c}"
                )));
            }
            *slot = v;
        }
        if let Some(pos) = data.iter().position(|v| v.is_nan()) {
            let (s, r, c) = (pos / (n * d), (pos / d) % n, pos % d);
            return Err(Error::Format(format!(
                "missing row for step {s}, region {r}, channel {c}"
            )));
        }
        DemandSeries::new(Tensor::new(vec![t, n, d], data)?)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("step,region,channel,value\n");
        for t in 0..self.steps() {
            for r in 0..self.regions() {
                for c in 0..self.channels() {
                    s.push_str(&format!("{t},{r},{c},{}\n", self.value(t, r, c)));
                }
            }
        }
        s
    }
}

/// Dataset calendar and split, as stored in the dataset config JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub steps_per_day: usize,
    /// Day of week of step 0, 0-based.
    pub weekday_of_step0: usize,
    /// Half-open step ranges `[start, end)` flagged as holidays.
    #[serde(default)]
    pub holidays: Vec<[usize; 2]>,
    /// First test step; steps before it form the training split.
    pub train_end_step: usize,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_day == 0 || 24 * 60 % self.steps_per_day != 0 {
            return Err(Error::Config(format!(
                "steps_per_day = {} does not divide a day into whole minutes",
                self.steps_per_day
            )));
        }
        if self.weekday_of_step0 >= 7 {
            return Err(Error::Config(format!(
                "weekday_of_step0 must be in 0..7, got {}",
                self.weekday_of_step0
            )));
        }
        if let Some(h) = self.holidays.iter().find(|h| h[0] > h[1]) {
            return Err(Error::Config(format!("holiday range {h:?} is reversed")));
        }
        Ok(())
    }

    /// Width of one encoded time-feature row.
    pub fn feature_width(&self) -> usize {
        self.steps_per_day + 7 + 1
    }

    pub fn is_holiday(&self, step: usize) -> bool {
        self.holidays.iter().any(|h| (h[0]..h[1]).contains(&step))
    }

    pub fn time_of_day(&self, step: usize) -> usize {
        step % self.steps_per_day
    }

    pub fn day_of_week(&self, step: usize) -> usize {
        (step / self.steps_per_day + self.weekday_of_step0) % 7
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let cfg: DatasetConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One-hot time of day, one-hot day of week, then a holiday flag.
pub fn encode_time(step: usize, calendar: &DatasetConfig) -> Vec<f64> {
    let s = calendar.steps_per_day;
    let mut v = vec![0.0; calendar.feature_width()];
    v[calendar.time_of_day(step)] = 1.0;
    v[s + calendar.day_of_week(step)] = 1.0;
    if calendar.is_holiday(step) {
        v[s + 7] = 1.0;
    }
    v
}

/// Encoded calendar rows for steps `0..steps`, shape `(T, d_e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFeatureSeries {
    data: Tensor,
}

impl TimeFeatureSeries {
    pub fn encode(steps: usize, calendar: &DatasetConfig) -> Self {
        let width = calendar.feature_width();
        let mut data = Vec::with_capacity(steps * width);
        for t in 0..steps {
            data.extend(encode_time(t, calendar));
        }
        Self {
            data: Tensor::new(vec![steps, width], data).expect("feature rows"),
        }
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn row(&self, step: usize) -> Tensor {
        self.data.index_axis0(step)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// Per-channel Min-Max scaling fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &DemandSeries) -> Result<Self> {
        if train.steps() == 0 || train.regions() == 0 {
            return Err(Error::Input(
                "cannot fit normalizer on empty training data".into(),
            ));
        }
        let d = train.channels();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for (i, &v) in train.tensor().data().iter().enumerate() {
            let c = i % d;
            min[c] = min[c].min(v);
            max[c] = max[c].max(v);
        }
        Ok(Self { min, max })
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    pub fn transform_value(&self, channel: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn inverse_value(&self, channel: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if hi > lo {
            x * (hi - lo) + lo
        } else {
            lo
        }
    }

    fn apply(&self, t: &Tensor, f: impl Fn(&Self, usize, f64) -> f64) -> Result<Tensor> {
        let d = self.channels();
        if t.shape().last() != Some(&d) {
            return Err(Error::Dimension(format!(
                "normalizer has {d} channels but tensor shape is {:?}",
                t.shape()
            )));
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(self, i % d, v))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    /// Scales a tensor whose last axis is the channel axis.
    pub fn transform(&self, t: &Tensor) -> Result<Tensor> {
        self.apply(t, Self::transform_value)
    }

    pub fn inverse_transform(&self, t: &Tensor) -> Result<Tensor> {
        self.apply(t, Self::inverse_value)
    }

    pub fn transform_series(&self, s: &DemandSeries) -> Result<DemandSeries> {
        DemandSeries::new(self.transform(s.tensor())?)
    }
}

/// One supervised example anchored at step `anchor` (the last input step).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(h, N, d)`
    pub input: Tensor,
    /// `(tau, N, d)`
    pub targets: Tensor,
    /// `(tau, d_e)`: calendar rows of the target steps.
    pub target_features: Tensor,
    pub anchor: usize,
}

impl Sample {
    pub fn horizon(&self) -> usize {
        self.targets.shape()[0]
    }
}

/// Every window of `h` inputs followed by `tau` targets, in time order.
/// Anchors run from `h - 1` to `T - tau - 1`.
pub fn make_samples(
    demand: &DemandSeries,
    features: &TimeFeatureSeries,
    h: usize,
    tau: usize,
) -> Result<Vec<Sample>> {
    let t = demand.steps();
    if h == 0 || tau == 0 {
        return Err(Error::Input(format!(
            "history ({h}) and horizon ({tau}) must both be positive"
        )));
    }
    if t < h + tau {
        return Err(Error::Input(format!(
            "series has {t} steps but h + tau = {} are needed ({} short)",
            h + tau,
            h + tau - t
        )));
    }
    if features.steps() < t {
        return Err(Error::Input(format!(
            "time features cover {} steps, demand covers {t}",
            features.steps()
        )));
    }
    let frame = demand.regions() * demand.channels();
    let width = features.width();
    let (n, d) = (demand.regions(), demand.channels());
    let src = demand.tensor().data();
    let fsrc = features.tensor().data();
    let samples = (h - 1..t - tau)
        .map(|anchor| {
            let start = anchor + 1 - h;
            let input = src[start * frame..(anchor + 1) * frame].to_vec();
            let targets = src[(anchor + 1) * frame..(anchor + 1 + tau) * frame].to_vec();
            let tf = fsrc[(anchor + 1) * width..(anchor + 1 + tau) * width].to_vec();
            Sample {
                input: Tensor::new(vec![h, n, d], input).expect("input window"),
                targets: Tensor::new(vec![tau, n, d], targets).expect("target window"),
                target_features: Tensor::new(vec![tau, width], tf).expect("feature window"),
                anchor,
            }
        })
        .collect();
    Ok(samples)
}

/// Chronological split: training samples have every target before
/// `train_end`, test samples have every target at or after it. Samples whose
/// targets straddle the boundary are dropped.
pub fn split_samples(samples: Vec<Sample>, train_end: usize) -> (Vec<Sample>, Vec<Sample>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        let last_target = s.anchor + s.horizon();
        if last_target < train_end {
            train.push(s);
        } else if s.anchor + 1 >= train_end {
            test.push(s);
        }
    }
    (train, test)
}
