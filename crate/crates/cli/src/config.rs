//! Experiment configuration: one JSON document layered over scale defaults.

use std::path::{Path, PathBuf};

use cardioreg_core::{
    Method, MiConfig, ModelConfig, MotionRanges, PhantomConfig, PhantomJitter, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    /// Where the cohort and dataset live; `<output_dir>/<run_name>/data`
    /// when absent.
    pub data_dir: Option<PathBuf>,
    /// Grid size shared by phantoms and the network input.
    pub dims: [usize; 3],
    pub phantom: PhantomConfig,
    pub cohort_size: usize,
    pub jitter: PhantomJitter,
    pub motion: MotionRanges,
    pub per_case: usize,
    /// Train / validation / test fractions of the phantoms.
    pub split_fractions: [f64; 3],
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mi: MiConfig,
    pub methods: Vec<Method>,
    /// Every stage derives its own seed from this one.
    pub seed: u64,
}

impl ExperimentConfig {
    /// 64³ phantoms, 450 studies with two motions each split 400/100/400,
    /// full motion ranges and the 300-epoch recipe.
    pub fn full_for(dims: [usize; 3]) -> Self {
        Self {
            run_name: "full".into(),
            output_dir: "runs".into(),
            data_dir: None,
            dims,
            phantom: PhantomConfig::for_dims(dims),
            cohort_size: 450,
            jitter: PhantomJitter::default(),
            motion: MotionRanges::default(),
            per_case: 2,
            split_fractions: [4.0 / 9.0, 1.0 / 9.0, 4.0 / 9.0],
            model: ModelConfig {
                input_dims: dims,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            mi: MiConfig {
                start_ranges: MotionRanges::default(),
                ..MiConfig::default()
            },
            methods: Method::ALL.to_vec(),
            seed: 0,
        }
    }

    /// 32³ phantoms, 80 phantoms split 50/10/20 with two motions each,
    /// reduced motion ranges, narrower network and 60 epochs.
    pub fn desk_for(dims: [usize; 3]) -> Self {
        Self {
            run_name: "desk".into(),
            cohort_size: 80,
            motion: MotionRanges::reduced(),
            split_fractions: [0.625, 0.125, 0.25],
            model: ModelConfig {
                input_dims: dims,
                widths: [8, 16, 32],
                ..ModelConfig::default()
            },
            train: TrainConfig::desk(),
            mi: MiConfig::default(),
            ..Self::full_for(dims)
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Input(format!("config: {m}")));
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return bad(format!("run_name {:?} must be a plain directory name", self.run_name));
        }
        if self.phantom.dims != self.dims || self.model.input_dims != self.dims {
            return bad(format!(
                "phantom dims {:?} and model input {:?} must equal dims {:?}",
                self.phantom.dims, self.model.input_dims, self.dims
            ));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_fractions.iter().any(|f| *f < 0.0) {
            return bad(format!("split fractions {:?} must be non-negative and sum to 1", self.split_fractions));
        }
        if self.cohort_size == 0 || self.per_case == 0 {
            return bad("cohort_size and per_case must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        self.phantom.validate()?;
        self.motion.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.mi.validate()?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.run_dir().join("data"))
    }
}

/// Recursively overlays `patch` on `base`; objects merge key by key, every
/// other value replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builds the configuration: scale defaults for the requested grid, then
/// the file's values on top, then command-line overrides.
pub fn load(path: Option<&Path>, desk: bool, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let user: Value = match path {
        None => Value::Object(Default::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?
        }
    };
    if !user.is_object() {
        return Err(CliError::Input("config must be a JSON object".into()));
    }
    let default_dims = if desk { [32; 3] } else { [64; 3] };
    let dims = match user.get("dims") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Input(format!("config dims: {e}")))?,
        None => default_dims,
    };
    let base = if desk {
        ExperimentConfig::desk_for(dims)
    } else {
        ExperimentConfig::full_for(dims)
    };
    let mut value = serde_json::to_value(base).expect("config serializes");
    merge(&mut value, user);
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Input(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}
