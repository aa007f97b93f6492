//! RMSE, MAE and floored MAPE per forecast step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAPE_FLOOR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when every true value is below the floor.
    pub mape: Option<f64>,
    /// Entries left out of MAPE because the true value is below the floor.
    pub mape_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub mape_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mape_floor: f64,
    pub per_step: Vec<StepMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Scores de-normalized forecasts. Shapes are `(tau, N, d)` or
/// `(B, tau, N, d)`; in the batched case each step pools every sample.
pub fn evaluate(pred: &Tensor, truth: &Tensor, mape_floor: f64) -> Result<Evaluation> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    let (batch, tau, frame) = match *pred.shape() {
        [t, n, d] => (1, t, n * d),
        [b, t, n, d] => (b, t, n * d),
        _ => {
            return Err(Error::Dimension(format!(
                "expected (tau, N, d) or (B, tau, N, d), got {:?}",
                pred.shape()
            )))
        }
    };
    if pred.is_empty() {
        return Err(Error::Input("cannot evaluate an empty forecast".into()));
    }
    if !pred.is_finite() || !truth.is_finite() {
        return Err(Error::Numerical(
            "forecast or truth contains non-finite values".into(),
        ));
    }
    let (p, y) = (pred.data(), truth.data());
    let per_step: Vec<StepMetrics> = (0..tau)
        .map(|s| {
            let (mut se, mut ae, mut pe) = (0.0, 0.0, 0.0);
            let (mut kept, mut excluded) = (0usize, 0usize);
            for b in 0..batch {
                let base = (b * tau + s) * frame;
                for i in base..base + frame {
                    let e = p[i] - y[i];
                    se += e * e;
                    ae += e.abs();
                    if y[i] >= mape_floor {
                        pe += e.abs() / y[i];
                        kept += 1;
                    } else {
                        excluded += 1;
                    }
                }
            }
            let count = (batch * frame) as f64;
            StepMetrics {
                step: s + 1,
                rmse: (se / count).sqrt(),
                mae: ae / count,
                mape: (kept > 0).then(|| pe / kept as f64),
                mape_excluded: excluded,
            }
        })
        .collect();
    let mean = |f: &dyn Fn(&StepMetrics) -> f64| per_step.iter().map(f).sum::<f64>() / tau as f64;
    let mapes: Vec<f64> = per_step.iter().filter_map(|m| m.mape).collect();
    let aggregate = AggregateMetrics {
        rmse: mean(&|m| m.rmse),
        mae: mean(&|m| m.mae),
        mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
        mape_excluded: per_step.iter().map(|m| m.mape_excluded).sum(),
    };
    Ok(Evaluation {
        mape_floor,
        per_step,
        aggregate,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Evaluation {
    /// `step,rmse,mae,mape,mape_excluded`, one row per step plus an
    /// `aggregate` row. An absent MAPE is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,rmse,mae,mape,mape_excluded\n");
        for m in &self.per_step {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.step,
                m.rmse,
                m.mae,
                opt(m.mape),
                m.mape_excluded
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "aggregate,{},{},{},{}\n",
            a.rmse,
            a.mae,
            opt(a.mape),
            a.mape_excluded
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Long-format plot series: `method,step,rmse,mae,mape`.
pub fn comparison_csv(rows: &[(&str, &Evaluation)]) -> String {
    let mut out = String::from("method,step,rmse,mae,mape\n");
    for (name, e) in rows {
        for m in &e.per_step {
            out.push_str(&format!(
                "{name},{},{},{},{}\n",
                m.step,
                m.rmse,
                m.mae,
                opt(m.mape)
            ));
        }
    }
    out
}
