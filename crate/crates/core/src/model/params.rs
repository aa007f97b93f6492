use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 32;

/// Component switches used for ablations. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    /// Sigmoid gate in every GGCM; off replaces the gate with a plain tanh.
    pub gated: bool,
    /// Short-term encoder; off restricts forecasts to one step.
    pub short_term_encoder: bool,
    /// Temporal attention; off averages the joint representation over time.
    pub temporal_attention: bool,
    /// Channel attention; off averages the hidden channels.
    pub channel_attention: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            gated: true,
            short_term_encoder: true,
            temporal_attention: true,
            channel_attention: true,
        }
    }
}

/// Architecture sizes. The predicted channels equal `in_channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Long-term history length `h`.
    pub history: usize,
    /// Short-term window `q`.
    pub short_window: usize,
    /// Temporal patch size `k`.
    pub patch: usize,
    /// Training horizon `tau`.
    pub horizon: usize,
    pub regions: usize,
    pub in_channels: usize,
    /// Width of every GGCM output, `d_out`.
    pub hidden: usize,
    /// Calendar feature width `d_e`.
    pub time_features: usize,
    pub long_layers: usize,
    pub short_layers: usize,
    #[serde(default)]
    pub variant: Variant,
}

/// Fewest stacked GGCMs whose receptive field spans `len` frames.
pub fn layers_for_receptive_field(len: usize, patch: usize) -> usize {
    if len <= 1 {
        1
    } else {
        (len - 1).div_ceil(patch - 1).max(1)
    }
}

pub(crate) type LayoutEntry = (String, Vec<usize>, Option<(usize, usize)>);

impl Hyper {
    /// Full-model hyperparameters with default width and the minimal layer
    /// counts covering each encoder's input.
    pub fn new(
        history: usize,
        short_window: usize,
        patch: usize,
        horizon: usize,
        regions: usize,
        in_channels: usize,
        time_features: usize,
    ) -> Self {
        let safe_patch = patch.max(2);
        Self {
            history,
            short_window,
            patch,
            horizon,
            regions,
            in_channels,
            hidden: DEFAULT_HIDDEN,
            time_features,
            long_layers: layers_for_receptive_field(history, safe_patch),
            short_layers: layers_for_receptive_field(short_window, safe_patch),
            variant: Variant::default(),
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels
    }

    /// Length of the joint representation fed to attention.
    pub fn joint_len(&self) -> usize {
        if self.variant.short_term_encoder {
            self.history + self.short_window
        } else {
            self.history
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, q, k) = (self.history, self.short_window, self.patch);
        if k < 2 {
            return Err(Error::Config(format!(
                "patch size k must be at least 2, got {k}"
            )));
        }
        if !(h > q && q >= k) {
            return Err(Error::Config(format!(
                "need h > q >= k, got h={h}, q={q}, k={k}"
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon tau must be at least 1".into()));
        }
        if !self.variant.short_term_encoder && self.horizon != 1 {
            return Err(Error::Config(format!(
                "without the short-term encoder only one-step forecasts exist; set tau = 1 (got {})",
                self.horizon
            )));
        }
        if self.regions == 0 || self.in_channels == 0 || self.hidden == 0 || self.time_features == 0
        {
            return Err(Error::Config(
                "regions, channels, hidden width and time-feature width must be positive".into(),
            ));
        }
        let need_long = layers_for_receptive_field(h, k);
        let need_short = layers_for_receptive_field(q, k);
        if self.long_layers < need_long {
            return Err(Error::Config(format!(
                "long-term encoder needs at least {need_long} layers to cover h={h} with k={k}, got {}",
                self.long_layers
            )));
        }
        if self.variant.short_term_encoder && self.short_layers < need_short {
            return Err(Error::Config(format!(
                "short-term encoder needs at least {need_short} layers to cover q={q} with k={k}, got {}",
                self.short_layers
            )));
        }
        Ok(())
    }

    /// Every parameter tensor: name, shape, and (fan_in, fan_out) for
    /// initialization, or `None` for zero-initialized biases.
    pub(crate) fn layout(&self) -> Vec<LayoutEntry> {
        let mut out = Vec::new();
        let k = self.patch;
        let hid = self.hidden;
        let mut encoder = |prefix: &str, layers: usize| {
            for l in 0..layers {
                let c_in = if l == 0 { self.in_channels } else { hid };
                let fans = Some((k * c_in, hid));
                out.push((format!("{prefix}.{l}.w1"), vec![k * c_in, hid], fans));
                if self.variant.gated {
                    out.push((format!("{prefix}.{l}.w2"), vec![k * c_in, hid], fans));
                }
                if c_in != hid {
                    out.push((
                        format!("{prefix}.{l}.wr"),
                        vec![c_in, hid],
                        Some((c_in, hid)),
                    ));
                }
            }
        };
        encoder("long", self.long_layers);
        if self.variant.short_term_encoder {
            encoder("short", self.short_layers);
        }
        let s = self.joint_len();
        let (n, de) = (self.regions, self.time_features);
        if self.variant.temporal_attention {
            out.push(("attn.w3".into(), vec![s, n * hid], Some((n * hid, 1))));
            out.push(("attn.w4".into(), vec![de, s], Some((de, s))));
            out.push(("attn.b1".into(), vec![s], None));
        }
        if self.variant.channel_attention {
            for c in 0..self.out_channels() {
                out.push((format!("attn.c{c}.w5"), vec![n, hid], Some((n, 1))));
                out.push((format!("attn.c{c}.w6"), vec![de, hid], Some((de, hid))));
                out.push((format!("attn.c{c}.b2"), vec![hid], None));
            }
        }
        out
    }
}

/// All learnable tensors of one model, keyed by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    hyper: Hyper,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases. Deterministic per seed.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fans) in hyper.layout() {
            let t = match fans {
                None => Tensor::zeros(&shape),
                Some((fan_in, fan_out)) => {
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
                    Tensor::new(shape, data)?
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { hyper, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter tensor `{name}`")))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that the stored tensors match the hyperparameters exactly.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let layout = self.hyper.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in layout {
            let t = self.get(&name).map_err(|_| {
                Error::Format(format!("checkpoint lacks parameter tensor `{name}`"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameter `{name}` is not finite"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            hyper: self.hyper.clone(),
            tensors: self.tensors.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {} (expected {})",
                ck.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let params = Self {
            hyper: ck.hyper,
            tensors: ck.tensors,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
