//! Dual-stream DenseNet regressing the six rigid misregistration
//! parameters from an (attenuation map, SPECT) pair.
//!
//! Each stream runs three levels of dense block + stride-2 conv. After every
//! level the two streams meet in a DuSFE module (when enabled), which is the
//! only place they exchange information before the late fusion. The final
//! maps are concatenated, passed through two 3×3×3 conv + ReLU layers, and
//! a fully connected head maps them to `(tx, ty, tz, ax, ay, az)`.

use std::path::Path;

use cardioreg_tensor::{
    load_checkpoint, save_checkpoint, Bound, Element, ParamId, ParamStore, Tape, Tensor, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dusfe::{dusfe, uniform, DuSfeWeights, FeaturePair};
use crate::geometry::{invert, resample, RigidParams};
use crate::seed::rng_from;
use crate::{CoreError, Modality, Result, Volume};

pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    pub widths: [usize; LEVELS],
    pub dense_layers: usize,
    /// Growth rate per level; half the level width when absent.
    #[serde(default)]
    pub growth: Option<[usize; LEVELS]>,
    pub use_dusfe: bool,
    /// Widths of the registration convs; twice the last level width (the
    /// fused width) when absent.
    #[serde(default)]
    pub reg_widths: Option<Vec<usize>>,
    pub head_widths: Vec<usize>,
    /// Input multipliers bringing attenuation values (~0.15 cm⁻¹) and
    /// mean-normalized SPECT counts to comparable magnitudes.
    pub mu_input_scale: f64,
    pub spect_input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [32; 3],
            widths: [16, 32, 64],
            dense_layers: 2,
            growth: None,
            use_dusfe: true,
            reg_widths: None,
            head_widths: vec![256, 64],
            mu_input_scale: 6.0,
            spect_input_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn growth_rates(&self) -> [usize; LEVELS] {
        self.growth
            .unwrap_or(self.widths.map(|w| (w / 2).max(1)))
    }

    pub fn registration_widths(&self) -> Vec<usize> {
        self.reg_widths
            .clone()
            .unwrap_or_else(|| vec![2 * self.widths[LEVELS - 1]; 2])
    }

    /// Spatial extents after each stride-2 level.
    pub fn level_dims(&self) -> [[usize; 3]; LEVELS] {
        let mut d = self.input_dims;
        let mut out = [[0; 3]; LEVELS];
        for o in out.iter_mut() {
            d = d.map(|n| (n - 1) / 2 + 1);
            *o = d;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("model: {m}")));
        if self.input_dims.iter().any(|&d| d == 0) {
            return bad(format!("input dims {:?}", self.input_dims));
        }
        if self.widths.iter().any(|&w| w == 0) || self.growth_rates().iter().any(|&g| g == 0) {
            return bad("level widths and growth rates must be positive".into());
        }
        if self.registration_widths().iter().any(|&w| w == 0)
            || self.head_widths.iter().any(|&w| w == 0)
        {
            return bad("registration and head widths must be positive".into());
        }
        if !(self.mu_input_scale > 0.0 && self.spect_input_scale > 0.0) {
            return bad("input scales must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct StreamLevel {
    dense: Vec<ConvIds>,
    down: ConvIds,
}

/// Network parameters plus the layout needed to run them.
#[derive(Clone, Debug)]
pub struct RegNet<T: Element = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    streams: [Vec<StreamLevel>; 2],
    attention: Vec<DuSfeWeights>,
    reg: Vec<ConvIds>,
    head: Vec<ConvIds>,
}

const STREAM_NAMES: [&str; 2] = ["mu", "spect"];

fn he_uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let fan_in: usize = shape[1..].iter().product();
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

fn add_layer<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    relu_follows: bool,
    rng: &mut R,
) -> Result<ConvIds> {
    let w = if relu_follows {
        he_uniform(shape, rng)?
    } else {
        let fan_in: usize = shape[1..].iter().product();
        uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)?
    };
    Ok(ConvIds {
        w: store.add(format!("{name}.w"), w)?,
        b: store.add(format!("{name}.b"), Tensor::zeros(vec![shape[0]])?)?,
    })
}

impl<T: Element> RegNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let growth = config.growth_rates();
        let mut streams: [Vec<StreamLevel>; 2] = [Vec::new(), Vec::new()];
        let mut attention = Vec::new();
        let mut in_ch = 1;
        for level in 0..LEVELS {
            for (s, stream) in streams.iter_mut().enumerate() {
                let prefix = format!("{}.level{}", STREAM_NAMES[s], level + 1);
                let mut ch = in_ch;
                let mut dense = Vec::new();
                for j in 0..config.dense_layers {
                    let shape = [growth[level], ch, 3, 3, 3];
                    dense.push(add_layer(&mut store, &format!("{prefix}.dense{j}"), &shape, true, &mut rng)?);
                    ch += growth[level];
                }
                let shape = [config.widths[level], ch, 3, 3, 3];
                let down = add_layer(&mut store, &format!("{prefix}.down"), &shape, true, &mut rng)?;
                stream.push(StreamLevel { dense, down });
            }
            if config.use_dusfe {
                attention.push(DuSfeWeights::register(
                    &mut store,
                    &format!("level{}", level + 1),
                    config.widths[level],
                    &mut rng,
                )?);
            }
            in_ch = config.widths[level];
        }
        let mut ch = 2 * in_ch;
        let mut reg = Vec::new();
        for (j, &w) in config.registration_widths().iter().enumerate() {
            reg.push(add_layer(&mut store, &format!("reg.conv{j}"), &[w, ch, 3, 3, 3], true, &mut rng)?);
            ch = w;
        }
        let [dx, dy, dz] = config.level_dims()[LEVELS - 1];
        let mut n = ch * dx * dy * dz;
        let mut head = Vec::new();
        for (j, &w) in config.head_widths.iter().enumerate() {
            head.push(add_layer(&mut store, &format!("head.fc{j}"), &[w, n], true, &mut rng)?);
            n = w;
        }
        let j = config.head_widths.len();
        head.push(add_layer(&mut store, &format!("head.fc{j}"), &[6, n], false, &mut rng)?);
        Ok(Self {
            config,
            store,
            streams,
            attention,
            reg,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Parameters belonging to the DuSFE modules, in registration order.
    pub fn attention_ids(&self) -> Vec<ParamId> {
        self.attention.iter().flat_map(|a| a.ids()).collect()
    }

    /// Ids of the output layer, `(weight, bias)`.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        let last = self.head.last().expect("head has an output layer");
        (last.w, last.b)
    }

    fn conv_relu(
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        ids: ConvIds,
        stride: usize,
    ) -> Result<Var> {
        let y = tape.conv3d(x, bound.var(ids.w), bound.var(ids.b), stride, 1)?;
        Ok(tape.relu(y)?)
    }

    fn level(tape: &mut Tape<T>, bound: &Bound, x: Var, l: &StreamLevel) -> Result<Var> {
        let mut feats = x;
        for &layer in &l.dense {
            let y = Self::conv_relu(tape, bound, feats, layer, 1)?;
            feats = tape.concat_channels(feats, y)?;
        }
        Self::conv_relu(tape, bound, feats, l.down, 2)
    }

    /// Records the network on `tape`. Inputs are `[B, 1, nx, ny, nz]`
    /// tensors already multiplied by the configured input scales; the
    /// result is `[B, 6]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, mu: Var, spect: Var) -> Result<Var> {
        let want = self.config.input_dims;
        for v in [mu, spect] {
            let s = tape.shape(v);
            if s.len() != 5 || s[1] != 1 || s[2..] != want {
                return Err(CoreError::Mismatch(format!(
                    "network expects [B, 1, {}, {}, {}] inputs, got {s:?}",
                    want[0], want[1], want[2]
                )));
            }
        }
        let mut pair = FeaturePair { f1: mu, f2: spect };
        for level in 0..LEVELS {
            pair = FeaturePair {
                f1: Self::level(tape, bound, pair.f1, &self.streams[0][level])?,
                f2: Self::level(tape, bound, pair.f2, &self.streams[1][level])?,
            };
            if let Some(w) = self.attention.get(level) {
                pair = dusfe(tape, bound, w, pair)?;
            }
        }
        let mut x = tape.concat_channels(pair.f1, pair.f2)?;
        for &layer in &self.reg {
            x = Self::conv_relu(tape, bound, x, layer, 1)?;
        }
        x = tape.flatten(x)?;
        let last = self.head.len() - 1;
        for (j, &layer) in self.head.iter().enumerate() {
            x = tape.fully_connected(x, bound.var(layer.w), bound.var(layer.b))?;
            if j < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Stacks volumes of one modality into a scaled `[B, 1, ...]` tensor.
    pub fn batch_input(&self, volumes: &[&Volume], modality: Modality) -> Result<Tensor<T>> {
        let dims = self.config.input_dims;
        let scale = match modality {
            Modality::MuMap => self.config.mu_input_scale,
            Modality::Spect => self.config.spect_input_scale,
        };
        let mut data = Vec::with_capacity(volumes.len() * dims.iter().product::<usize>());
        for v in volumes {
            if v.dims() != dims {
                return Err(CoreError::Mismatch(format!(
                    "volume {:?} does not match network input {dims:?}",
                    v.dims()
                )));
            }
            if v.modality() != modality {
                return Err(CoreError::Mismatch(format!(
                    "expected {modality:?} volume, got {:?}",
                    v.modality()
                )));
            }
            data.extend(v.data().iter().map(|&x| T::from_f64(x as f64 * scale)));
        }
        Ok(Tensor::new(
            vec![volumes.len(), 1, dims[0], dims[1], dims[2]],
            data,
        )?)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, pairs: &[(&Volume, &Volume)]) -> Result<Vec<RigidParams>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mus: Vec<&Volume> = pairs.iter().map(|p| p.0).collect();
        let spects: Vec<&Volume> = pairs.iter().map(|p| p.1).collect();
        let mut tape = Tape::new();
        let bound = self.store.bind_with(&mut tape, false);
        let mu = tape.constant(self.batch_input(&mus, Modality::MuMap)?);
        let spect = tape.constant(self.batch_input(&spects, Modality::Spect)?);
        let out = self.forward(&mut tape, &bound, mu, spect)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(6)
            .map(|c| {
                let mut a = [0.0; 6];
                for (d, s) in a.iter_mut().zip(c) {
                    *d = s.as_f64();
                }
                RigidParams::from_array(a)
            })
            .collect())
    }
}

impl RegNet<f32> {
    pub fn save(&self, index_path: &Path) -> Result<()> {
        save_checkpoint(&self.store, index_path)?;
        Ok(())
    }

    /// Builds the architecture from `config` and loads weights saved by
    /// [`RegNet::save`].
    pub fn load(config: ModelConfig, index_path: &Path) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        let ckpt = load_checkpoint(index_path)?;
        net.store.load_values(&ckpt)?;
        Ok(net)
    }
}

/// Undoes a predicted misregistration: samples `mu_moved` through the
/// inverse of `predicted`.
pub fn apply_correction(mu_moved: &Volume, predicted: RigidParams) -> Result<Volume> {
    resample(mu_moved, &invert(predicted, mu_moved.dims()))
}

/// Predicts the misregistration of one pair and returns it together with
/// the corrected attenuation map.
pub fn register(
    model: &RegNet<f32>,
    mu_moved: &Volume,
    spect: &Volume,
) -> Result<(RigidParams, Volume)> {
    let predicted = model.predict(&[(mu_moved, spect)])?[0];
    if !predicted.is_finite() {
        return Err(CoreError::Mismatch(format!(
            "network produced non-finite parameters {predicted:?}"
        )));
    }
    Ok((predicted, apply_correction(mu_moved, predicted)?))
}
