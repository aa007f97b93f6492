//! Forward pass on a [`Tape`]: GGCM stacks, attention output, multi-step loop.
//!
//! All activations carry a leading batch axis. Demand frames are laid out
//! `(batch, time, region, channel)`.

use std::collections::BTreeMap;

use super::params::{Hyper, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{PadSide, Tape, Tensor, Var};

/// Tape handles for one GGCM layer.
#[derive(Clone, Debug)]
pub struct GgcmWeights {
    /// Linear path, `(k * C_in, C_out)`.
    pub w1: Var,
    /// Gate path, same shape as `w1`. `None` swaps the gate for tanh.
    pub w2: Option<Var>,
    /// Residual projection `(C_in, C_out)`, present iff the widths differ.
    pub wr: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TemporalWeights {
    /// `(S, N * d_out)`: one logit projection per joint time slice.
    pub w3: Var,
    /// `(d_e, S)`
    pub w4: Var,
    /// `(S)`
    pub b1: Var,
}

#[derive(Clone, Debug)]
pub struct ChannelWeights {
    /// `(N, d_out)`: one logit projection per hidden channel.
    pub w5: Var,
    /// `(d_e, d_out)`
    pub w6: Var,
    /// `(d_out)`
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub temporal: Option<TemporalWeights>,
    /// One block per predicted channel, or `None` for mean pooling.
    pub channels: Option<Vec<ChannelWeights>>,
    pub out_channels: usize,
}

/// A [`ModelParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub hyper: Hyper,
    pub vars: BTreeMap<String, Var>,
    pub long: Vec<GgcmWeights>,
    pub short: Vec<GgcmWeights>,
    pub attention: AttentionWeights,
}

impl BoundParams {
    /// Registers every tensor as a leaf. With `trainable`, leaves require
    /// gradients.
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Result<Self> {
        params.validate()?;
        let mut vars = BTreeMap::new();
        for (name, t) in &params.tensors {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable));
        }
        Self::from_vars(params.hyper.clone(), vars)
    }

    /// Assembles the layer structure from leaves already on a tape, keyed by
    /// parameter name.
    pub fn from_vars(hyper: Hyper, vars: BTreeMap<String, Var>) -> Result<Self> {
        let var = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
        };
        let encoder = |prefix: &str, layers: usize| -> Result<Vec<GgcmWeights>> {
            (0..layers)
                .map(|l| {
                    Ok(GgcmWeights {
                        w1: var(&format!("{prefix}.{l}.w1"))?,
                        w2: vars.get(&format!("{prefix}.{l}.w2")).copied(),
                        wr: vars.get(&format!("{prefix}.{l}.wr")).copied(),
                    })
                })
                .collect()
        };
        let long = encoder("long", hyper.long_layers)?;
        let short = if hyper.variant.short_term_encoder {
            encoder("short", hyper.short_layers)?
        } else {
            Vec::new()
        };
        let temporal = if hyper.variant.temporal_attention {
            Some(TemporalWeights {
                w3: var("attn.w3")?,
                w4: var("attn.w4")?,
                b1: var("attn.b1")?,
            })
        } else {
            None
        };
        let channels = if hyper.variant.channel_attention {
            Some(
                (0..hyper.out_channels())
                    .map(|c| {
                        Ok(ChannelWeights {
                            w5: var(&format!("attn.c{c}.w5"))?,
                            w6: var(&format!("attn.c{c}.w6"))?,
                            b2: var(&format!("attn.c{c}.b2"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let attention = AttentionWeights {
            temporal,
            channels,
            out_channels: hyper.out_channels(),
        };
        Ok(Self {
            hyper,
            vars,
            long,
            short,
            attention,
        })
    }
}

/// One gated graph-convolution module over a `(B, L, N, C)` sequence
/// (a rank-3 `(L, N, C)` input is treated as a batch of one).
///
/// `k - 1` zero frames are prepended so output frame `i` sees input frames
/// `i - k + 1 ..= i` only. Each window is flattened time-major to
/// `N x (k * C)`, propagated over the graph, and combined as
/// `(P X W1 + R) * sigmoid(P X W2)`, with `R` the window's last frame
/// (projected by `wr` when the widths differ).
pub fn ggcm_forward(
    tape: &mut Tape,
    x: Var,
    propagation: Var,
    layer: &GgcmWeights,
    patch: usize,
) -> Result<Var> {
    let unbatched = tape.shape(x).len() == 3;
    let x = if unbatched {
        let s = tape.shape(x).to_vec();
        tape.reshape(x, &[1, s[0], s[1], s[2]])?
    } else {
        x
    };
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "GGCM input must be (batch, time, region, channel), got {s:?}"
        )));
    }
    let (b, l, n, c) = (s[0], s[1], s[2], s[3]);
    if l == 0 {
        return Err(Error::Dimension("GGCM input has no frames".into()));
    }
    let w1_shape = tape.shape(layer.w1).to_vec();
    if w1_shape.len() != 2 || w1_shape[0] != patch * c {
        return Err(Error::Dimension(format!(
            "GGCM weights {w1_shape:?} do not accept {c} input channels with patch {patch}"
        )));
    }
    let c_out = w1_shape[1];
    if tape.shape(propagation) != [n, n] {
        return Err(Error::Dimension(format!(
            "propagation matrix {:?} does not match {n} regions",
            tape.shape(propagation)
        )));
    }

    let padded = tape.zero_pad(x, 1, patch - 1, PadSide::Front)?;
    let mut shifted = Vec::with_capacity(patch);
    for j in 0..patch {
        shifted.push(tape.slice(padded, 1, j..j + l)?);
    }
    let windows = tape.concat(&shifted, 3)?;
    let windows = tape.reshape(windows, &[b * l, n, patch * c])?;
    let spread = tape.matmul(propagation, windows)?;
    let spread = tape.reshape(spread, &[b * l * n, patch * c])?;

    let linear = tape.matmul(spread, layer.w1)?;
    let flat_x = tape.reshape(x, &[b * l * n, c])?;
    let residual = match layer.wr {
        Some(wr) => tape.matmul(flat_x, wr)?,
        None if c == c_out => flat_x,
        None => {
            return Err(Error::Dimension(format!(
                "GGCM maps {c} -> {c_out} channels but has no residual projection"
            )))
        }
    };
    let linear = tape.add(linear, residual)?;
    let out = match layer.w2 {
        Some(w2) => {
            let gate = tape.matmul(spread, w2)?;
            let gate = tape.sigmoid(gate)?;
            tape.mul(linear, gate)?
        }
        None => tape.tanh(linear)?,
    };
    if unbatched {
        tape.reshape(out, &[l, n, c_out])
    } else {
        tape.reshape(out, &[b, l, n, c_out])
    }
}

/// Serial GGCM stack; output length equals input length.
pub fn encoder_forward(
    tape: &mut Tape,
    x: Var,
    propagation: Var,
    layers: &[GgcmWeights],
    patch: usize,
) -> Result<Var> {
    layers.iter().try_fold(x, |acc, layer| {
        ggcm_forward(tape, acc, propagation, layer, patch)
    })
}

/// Output of the attention module for one target step.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `(B, N, d_target)`
    pub prediction: Var,
    /// Temporal weights `(B, S)`.
    pub alpha: Var,
    /// Channel weights `(B, d_out)`, one per predicted channel.
    pub betas: Vec<Var>,
}

/// Decodes a joint representation `(B, S, N, d_out)` given the target step's
/// calendar features `(B, d_e)`.
pub fn attention_output(
    tape: &mut Tape,
    joint: Var,
    time_features: Var,
    weights: &AttentionWeights,
) -> Result<AttentionOutput> {
    let s = tape.shape(joint).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "joint representation must be (batch, time, region, channel), got {s:?}"
        )));
    }
    let (b, steps, n, d) = (s[0], s[1], s[2], s[3]);
    let fs = tape.shape(time_features).to_vec();
    if fs.len() != 2 || fs[0] != b {
        return Err(Error::Dimension(format!(
            "time features {fs:?} do not match batch of {b}"
        )));
    }
    let flat = tape.reshape(joint, &[b, steps, n * d])?;

    let alpha = match &weights.temporal {
        Some(tw) => {
            let w3 = tape.shape(tw.w3).to_vec();
            if w3 != [steps, n * d] {
                return Err(Error::Dimension(format!(
                    "temporal projection {w3:?} does not match joint {s:?}"
                )));
            }
            let scored = tape.mul(flat, tw.w3)?;
            let logits = tape.sum(scored, Some(2))?;
            let cal = tape.matmul(time_features, tw.w4)?;
            let logits = tape.add(logits, cal)?;
            let logits = tape.add(logits, tw.b1)?;
            let logits = tape.tanh(logits)?;
            tape.softmax(logits, 1)?
        }
        None => tape.constant(Tensor::full(&[b, steps], 1.0 / steps as f64)),
    };
    let a = tape.reshape(alpha, &[b, 1, steps])?;
    let pooled = tape.matmul(a, flat)?;
    let pooled = tape.reshape(pooled, &[b, n, d])?;

    let mut columns = Vec::with_capacity(weights.out_channels);
    let mut betas = Vec::with_capacity(weights.out_channels);
    for c in 0..weights.out_channels {
        let beta = match &weights.channels {
            Some(blocks) => {
                let cw = &blocks[c];
                let w5 = tape.shape(cw.w5).to_vec();
                if w5 != [n, d] {
                    return Err(Error::Dimension(format!(
                        "channel projection {w5:?} does not match ({n}, {d})"
                    )));
                }
                let scored = tape.mul(pooled, cw.w5)?;
                let logits = tape.sum(scored, Some(1))?;
                let cal = tape.matmul(time_features, cw.w6)?;
                let logits = tape.add(logits, cal)?;
                let logits = tape.add(logits, cw.b2)?;
                let logits = tape.tanh(logits)?;
                tape.softmax(logits, 1)?
            }
            None => tape.constant(Tensor::full(&[b, d], 1.0 / d as f64)),
        };
        let bcol = tape.reshape(beta, &[b, d, 1])?;
        columns.push(tape.matmul(pooled, bcol)?);
        betas.push(beta);
    }
    let prediction = tape.concat(&columns, 2)?;
    Ok(AttentionOutput {
        prediction,
        alpha,
        betas,
    })
}

/// What feeds the short-term encoder after the first forecast step.
#[derive(Clone, Copy, Debug)]
pub enum Feed {
    /// The model's own previous predictions.
    FreeRunning,
    /// Ground truth `(B, tau, N, d)`.
    TeacherForced(Var),
}

#[derive(Clone, Debug)]
pub struct ForecastGraph {
    /// `(B, tau, N, d)`
    pub predictions: Var,
    /// Short-term encoder input at each step, `(B, q, N, d)`.
    pub short_inputs: Vec<Var>,
    pub alphas: Vec<Var>,
    pub betas: Vec<Vec<Var>>,
}

/// Multi-step forecast from an input window `(B, h, N, d)` and the target
/// steps' calendar rows `(B, tau, d_e)`.
///
/// The long-term encoding is computed once; at each step the short-term
/// encoder reads the last `q` frames of input followed by earlier steps'
/// predictions (or truth when teacher-forced).
pub fn forecast_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    propagation: Var,
    input: Var,
    target_features: Var,
    feed: Feed,
) -> Result<ForecastGraph> {
    let hp = &params.hyper;
    let s = tape.shape(input).to_vec();
    if s.len() != 4 || s[1] != hp.history || s[2] != hp.regions || s[3] != hp.in_channels {
        return Err(Error::Dimension(format!(
            "forecast input {s:?} does not match (batch, {}, {}, {})",
            hp.history, hp.regions, hp.in_channels
        )));
    }
    let b = s[0];
    let fs = tape.shape(target_features).to_vec();
    if fs.len() != 3 || fs[0] != b || fs[2] != hp.time_features {
        return Err(Error::Dimension(format!(
            "target features {fs:?} do not match (batch {b}, tau, {})",
            hp.time_features
        )));
    }
    let tau = fs[1];
    if tau < 1 {
        return Err(Error::Input("forecast horizon must be at least 1".into()));
    }
    if !hp.variant.short_term_encoder && tau != 1 {
        return Err(Error::Input(format!(
            "model without short-term encoder forecasts one step only, asked for {tau}"
        )));
    }
    if let Feed::TeacherForced(truth) = feed {
        let ts = tape.shape(truth).to_vec();
        if ts.len() != 4 || ts[0] != b || ts[1] < tau || ts[2..] != s[2..] {
            return Err(Error::Dimension(format!(
                "teacher-forcing truth {ts:?} does not cover ({b}, {tau}, {}, {})",
                s[2], s[3]
            )));
        }
    }

    let long = encoder_forward(tape, input, propagation, &params.long, hp.patch)?;
    let q = hp.short_window;
    let mut window = tape.slice(input, 1, hp.history - q..hp.history)?;
    let mut preds = Vec::with_capacity(tau);
    let mut short_inputs = Vec::with_capacity(tau);
    let mut alphas = Vec::with_capacity(tau);
    let mut betas = Vec::with_capacity(tau);
    let (n, d) = (hp.regions, hp.in_channels);

    for step in 0..tau {
        let e = tape.slice(target_features, 1, step..step + 1)?;
        let e = tape.reshape(e, &[b, hp.time_features])?;
        let joint = if hp.variant.short_term_encoder {
            short_inputs.push(window);
            let short = encoder_forward(tape, window, propagation, &params.short, hp.patch)?;
            tape.concat(&[long, short], 1)?
        } else {
            long
        };
        let out = attention_output(tape, joint, e, &params.attention)?;
        let frame = tape.reshape(out.prediction, &[b, 1, n, d])?;
        preds.push(frame);
        alphas.push(out.alpha);
        betas.push(out.betas);

        if step + 1 < tau {
            let next = match feed {
                Feed::FreeRunning => frame,
                Feed::TeacherForced(truth) => tape.slice(truth, 1, step..step + 1)?,
            };
            let kept = tape.slice(window, 1, 1..q)?;
            window = tape.concat(&[kept, next], 1)?;
        }
    }
    let predictions = if preds.len() == 1 {
        preds[0]
    } else {
        tape.concat(&preds, 1)?
    };
    Ok(ForecastGraph {
        predictions,
        short_inputs,
        alphas,
        betas,
    })
}
