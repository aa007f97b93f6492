//! The graph-convolutional sequence-to-sequence forecaster.

mod network;
mod params;

pub use network::{
    attention_output, encoder_forward, forecast_on_tape, ggcm_forward, AttentionOutput,
    AttentionWeights, BoundParams, ChannelWeights, Feed, ForecastGraph, GgcmWeights,
    TemporalWeights,
};
pub use params::{
    layers_for_receptive_field, Hyper, ModelParams, Variant, CHECKPOINT_FORMAT_VERSION,
    DEFAULT_HIDDEN,
};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Value-level counterpart of [`Feed`].
#[derive(Clone, Copy, Debug)]
pub enum ForecastMode<'a> {
    FreeRunning,
    /// Ground-truth frames for the forecast steps, `(tau, N, d)` or
    /// `(B, tau, N, d)` matching the input's batching.
    TeacherForced(&'a Tensor),
}

/// Forecast plus the intermediate quantities tests and diagnostics look at.
#[derive(Clone, Debug)]
pub struct ForecastValues {
    pub predictions: Tensor,
    pub short_inputs: Vec<Tensor>,
    pub alphas: Vec<Tensor>,
    pub betas: Vec<Vec<Tensor>>,
}

fn batched(t: &Tensor, rank: usize) -> Result<Tensor> {
    if t.rank() == rank {
        Ok(t.clone())
    } else if t.rank() + 1 == rank {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    } else {
        Err(Error::Dimension(format!(
            "expected rank {} or {rank}, got shape {:?}",
            rank - 1,
            t.shape()
        )))
    }
}

/// Runs a forecast without recording gradients.
///
/// `input` is `(h, N, d)` with `target_features` `(tau, d_e)`, or both carry
/// a leading batch axis; the result matches.
pub fn forecast_detailed(
    params: &ModelParams,
    propagation: &Tensor,
    input: &Tensor,
    target_features: &Tensor,
    mode: ForecastMode<'_>,
) -> Result<ForecastValues> {
    let single = input.rank() == 3;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false)?;
    let prop = tape.constant(propagation.clone());
    let x = tape.constant(batched(input, 4)?);
    let e = tape.constant(batched(target_features, 3)?);
    let feed = match mode {
        ForecastMode::FreeRunning => Feed::FreeRunning,
        ForecastMode::TeacherForced(truth) => {
            Feed::TeacherForced(tape.constant(batched(truth, 4)?))
        }
    };
    let g = forecast_on_tape(&mut tape, &bound, prop, x, e, feed)?;
    let unbatch = |t: &Tensor| -> Tensor {
        if single {
            t.index_axis0(0)
        } else {
            t.clone()
        }
    };
    Ok(ForecastValues {
        predictions: unbatch(tape.value(g.predictions)),
        short_inputs: g
            .short_inputs
            .iter()
            .map(|&v| unbatch(tape.value(v)))
            .collect(),
        alphas: g.alphas.iter().map(|&v| unbatch(tape.value(v))).collect(),
        betas: g
            .betas
            .iter()
            .map(|bs| bs.iter().map(|&v| unbatch(tape.value(v))).collect())
            .collect(),
    })
}

/// Predictions only; see [`forecast_detailed`].
pub fn forecast(
    params: &ModelParams,
    propagation: &Tensor,
    input: &Tensor,
    target_features: &Tensor,
    mode: ForecastMode<'_>,
) -> Result<Tensor> {
    Ok(forecast_detailed(params, propagation, input, target_features, mode)?.predictions)
}
