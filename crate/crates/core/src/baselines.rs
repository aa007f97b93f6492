//! Historical Average and per-region Ordinary Linear Regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DatasetConfig, DemandSeries, Sample};
use crate::tensor::Tensor;

/// Ridge damping added to the OLR normal equations.
pub const OLR_RIDGE: f64 = 1e-6;

/// Which level of the Historical Average fallback chain produced a value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaLevel {
    /// Mean over training steps with the same time of day and day of week.
    Slot,
    /// Mean over training steps with the same time of day.
    TimeOfDay,
    /// Mean over the whole training split.
    Global,
}

#[derive(Clone, Debug, Default)]
struct Accumulator {
    sum: Vec<f64>,
    count: usize,
}

impl Accumulator {
    fn add(&mut self, frame: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; frame.len()];
        }
        for (s, v) in self.sum.iter_mut().zip(frame) {
            *s += v;
        }
        self.count += 1;
    }

    fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }
}

/// Per-slot training means with a time-of-day and global fallback.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    calendar: DatasetConfig,
    regions: usize,
    channels: usize,
    slots: Vec<Accumulator>,
    time_of_day: Vec<Accumulator>,
    global: Accumulator,
}

impl HistoricalAverage {
    /// Fits on a training series whose row `t` is absolute step `t`.
    pub fn fit(train: &DemandSeries, calendar: &DatasetConfig) -> Result<Self> {
        let frames: Vec<(usize, Tensor)> =
            (0..train.steps()).map(|t| (t, train.frame(t))).collect();
        Self::from_frames(&frames, calendar)
    }

    /// Fits on `(absolute step, (N, d) frame)` observations in any order.
    pub fn from_frames(frames: &[(usize, Tensor)], calendar: &DatasetConfig) -> Result<Self> {
        calendar.validate()?;
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("historical average needs training data".into()))?;
        let shape = first.1.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "expected (N, d) frames, got {shape:?}"
            )));
        }
        let s = calendar.steps_per_day;
        let mut slots = vec![Accumulator::default(); s * 7];
        let mut time_of_day = vec![Accumulator::default(); s];
        let mut global = Accumulator::default();
        for (step, frame) in frames {
            if frame.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "frame at step {step} has shape {:?}, expected {shape:?}",
                    frame.shape()
                )));
            }
            let tod = calendar.time_of_day(*step);
            let dow = calendar.day_of_week(*step);
            slots[dow * s + tod].add(frame.data());
            time_of_day[tod].add(frame.data());
            global.add(frame.data());
        }
        Ok(Self {
            calendar: calendar.clone(),
            regions: shape[0],
            channels: shape[1],
            slots,
            time_of_day,
            global,
        })
    }

    /// Prediction `(N, d)` for an absolute step and the level that supplied it.
    pub fn predict_step(&self, step: usize) -> (Tensor, HaLevel) {
        let s = self.calendar.steps_per_day;
        let tod = self.calendar.time_of_day(step);
        let dow = self.calendar.day_of_week(step);
        let (mean, level) = if let Some(m) = self.slots[dow * s + tod].mean() {
            (m, HaLevel::Slot)
        } else if let Some(m) = self.time_of_day[tod].mean() {
            (m, HaLevel::TimeOfDay)
        } else {
            (
                self.global.mean().expect("fit requires data"),
                HaLevel::Global,
            )
        };
        let t = Tensor::new(vec![self.regions, self.channels], mean).expect("frame shape");
        (t, level)
    }

    /// Forecast `(tau, N, d)` for the steps following `anchor`.
    pub fn predict(&self, anchor: usize, tau: usize) -> Result<(Tensor, Vec<HaLevel>)> {
        let (frames, levels): (Vec<Tensor>, Vec<HaLevel>) =
            (1..=tau).map(|i| self.predict_step(anchor + i)).unzip();
        Ok((Tensor::stack(&frames)?, levels))
    }
}

/// Independent lag regressions, one per (horizon step, region, channel).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlrModel {
    pub history: usize,
    pub horizon: usize,
    pub regions: usize,
    pub channels: usize,
    pub ridge: f64,
    /// `(tau, N, d, h)`; the last entry multiplies the most recent frame.
    pub coefficients: Tensor,
    /// `(tau, N, d)`
    pub intercepts: Tensor,
}

impl OlrModel {
    /// Coefficient on the value `lag` steps before the forecast origin
    /// (`lag = 1` is the most recent input frame).
    pub fn lag_coefficient(&self, step: usize, region: usize, channel: usize, lag: usize) -> f64 {
        self.coefficients
            .get(&[step, region, channel, self.history - lag])
    }
}

/// Fits OLR by ridge-damped normal equations on centered data, so the
/// intercept is not penalized.
pub fn fit_olr(samples: &[Sample], ridge: f64) -> Result<OlrModel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Input("OLR needs at least one training sample".into()))?;
    let [h, n, d]: [usize; 3] = first.input.shape().try_into().map_err(|_| {
        Error::Dimension(format!(
            "sample input {:?} is not (h, N, d)",
            first.input.shape()
        ))
    })?;
    let tau = first.horizon();
    if let Some(s) = samples.iter().find(|s| {
        s.input.shape() != first.input.shape() || s.targets.shape() != first.targets.shape()
    }) {
        return Err(Error::Dimension(format!(
            "sample at anchor {} differs in shape from the first sample",
            s.anchor
        )));
    }
    let m = samples.len() as f64;
    let mut coefficients = Tensor::zeros(&[tau, n, d, h]);
    let mut intercepts = Tensor::zeros(&[tau, n, d]);
    for r in 0..n {
        for c in 0..d {
            let x = DMatrix::from_fn(samples.len(), h, |i, j| samples[i].input.get(&[j, r, c]));
            let x_mean = x.row_mean();
            let mut xc = x.clone();
            for mut row in xc.row_iter_mut() {
                row -= &x_mean;
            }
            let mut gram = xc.transpose() * &xc;
            for j in 0..h {
                gram[(j, j)] += ridge;
            }
            let chol = gram.cholesky().ok_or_else(|| {
                Error::Config(format!(
                    "OLR normal equations for region {r}, channel {c} are singular even with ridge {ridge}"
                ))
            })?;
            for s in 0..tau {
                let y = DVector::from_fn(samples.len(), |i, _| samples[i].targets.get(&[s, r, c]));
                let y_mean = y.sum() / m;
                let yc = y.add_scalar(-y_mean);
                let w = chol.solve(&(xc.transpose() * yc));
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!(
                        "OLR solution for region {r}, channel {c} is not finite"
                    )));
                }
                let b = y_mean - (x_mean.clone() * &w)[(0, 0)];
                for j in 0..h {
                    coefficients.set(&[s, r, c, j], w[j]);
                }
                intercepts.set(&[s, r, c], b);
            }
        }
    }
    Ok(OlrModel {
        history: h,
        horizon: tau,
        regions: n,
        channels: d,
        ridge,
        coefficients,
        intercepts,
    })
}

/// Forecast `(tau, N, d)` from an input window `(h, N, d)`.
pub fn predict_olr(model: &OlrModel, window: &Tensor) -> Result<Tensor> {
    let (h, n, d) = (model.history, model.regions, model.channels);
    if window.shape() != [h, n, d] {
        return Err(Error::Dimension(format!(
            "OLR window {:?} does not match ({h}, {n}, {d})",
            window.shape()
        )));
    }
    let mut out = Tensor::zeros(&[model.horizon, n, d]);
    for s in 0..model.horizon {
        for r in 0..n {
            for c in 0..d {
                let mut v = model.intercepts.get(&[s, r, c]);
                for j in 0..h {
                    v += model.coefficients.get(&[s, r, c, j]) * window.get(&[j, r, c]);
                }
                out.set(&[s, r, c], v);
            }
        }
    }
    Ok(out)
}
