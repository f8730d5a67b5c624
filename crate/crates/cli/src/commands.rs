use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cardioreg_core::metrics::{csv_table, markdown_table};
use cardioreg_core::motion::{assign_splits, read_jsonl, write_jsonl, DatasetRecord};
use cardioreg_core::regnet::apply_correction;
use cardioreg_core::{
    aggregate, build_dataset, derive_seed, generate_cohort, register_mi, train, CaseResult, Method,
    MiConfig, ModelConfig, RegNet, RigidParams, SamplePair, Split, TrainConfig, Volume,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// One cohort member as listed in `cohort.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortRecord {
    pub index: usize,
    pub mu_path: String,
    pub spect_path: String,
    pub mu_digest: String,
    pub spect_digest: String,
    pub config_digest: String,
}

/// A registration estimate. Network and MI paths emit the same record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub method: Method,
    pub predicted: RigidParams,
    /// Set by MI when no start beat zero motion.
    #[serde(default)]
    pub fell_back_to_identity: bool,
}

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_text(p: &Path, text: &str) -> CliResult<()> {
    fs::write(p, text).map_err(|e| CliError::io(p, e))
}

fn cohort_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data_root().join("cohort")
}

fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data_root().join("dataset")
}

fn model_dir(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.run_dir().join("models").join(method.as_str())
}

/// Records the resolved configuration next to the run's artifacts.
pub fn save_resolved(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = cfg.run_dir();
    mkdir(&dir)?;
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_text(&dir.join("config.json"), &text)
}

pub fn phantom(cfg: &ExperimentConfig) -> CliResult<Vec<CohortRecord>> {
    let dir = cohort_dir(cfg);
    mkdir(&dir)?;
    let master = derive_seed(cfg.seed, "cohort");
    let cohort = generate_cohort(cfg.cohort_size, &cfg.phantom, &cfg.jitter, master)?;
    let mut records = Vec::with_capacity(cohort.len());
    for m in &cohort {
        let mu_path = format!("cohort/p{:04}_mu.volr", m.index);
        let spect_path = format!("cohort/p{:04}_spect.volr", m.index);
        m.mu.write_volr(&cfg.data_root().join(&mu_path))?;
        m.spect.write_volr(&cfg.data_root().join(&spect_path))?;
        records.push(CohortRecord {
            index: m.index,
            mu_path,
            spect_path,
            mu_digest: m.mu.digest(),
            spect_digest: m.spect.digest(),
            config_digest: m.config.digest(),
        });
    }
    write_jsonl(&dir.join("cohort.jsonl"), &records)?;
    log::info!("wrote {} phantoms to {}", records.len(), dir.display());
    Ok(records)
}

fn read_volume(root: &Path, rel: &str) -> CliResult<Volume> {
    let p = root.join(rel);
    if !p.exists() {
        return Err(CliError::MissingArtifact(format!("missing volume {}", p.display())));
    }
    Ok(Volume::read_volr(&p)?)
}

pub fn simulate(cfg: &ExperimentConfig) -> CliResult<Vec<DatasetRecord>> {
    let index = cohort_dir(cfg).join("cohort.jsonl");
    if !index.exists() {
        return Err(CliError::Input(format!(
            "no cohort at {}; run `phantom` first",
            index.display()
        )));
    }
    let root = cfg.data_root();
    let cohort: Vec<CohortRecord> = read_jsonl(&index)?;
    let pairs = cohort
        .iter()
        .map(|r| Ok((read_volume(&root, &r.mu_path)?, read_volume(&root, &r.spect_path)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let splits = assign_splits(pairs.len(), cfg.split_fractions, derive_seed(cfg.seed, "splits"))?;
    let cases = build_dataset(&pairs, &splits, cfg.per_case, &cfg.motion, derive_seed(cfg.seed, "motion"))?;

    let dir = dataset_dir(cfg);
    mkdir(&dir.join("moved"))?;
    let mut records = Vec::with_capacity(cases.len());
    for c in &cases {
        let phantom: usize = c.case_id[1..5].parse().expect("case ids start with p####");
        let moved = format!("dataset/moved/{}.volr", c.case_id);
        c.mu_moved.write_volr(&root.join(&moved))?;
        records.push(DatasetRecord {
            case_id: c.case_id.clone(),
            seed: c.seed,
            truth: c.truth.to_array(),
            spect_path: cohort[phantom].spect_path.clone(),
            mu_moved_path: moved,
            mu_ref_path: cohort[phantom].mu_path.clone(),
            split: c.split,
        });
    }
    write_jsonl(&dir.join("manifest.jsonl"), &records)?;
    let count = |s| records.iter().filter(|r| r.split == s).count();
    log::info!(
        "{} cases: {} train / {} val / {} test",
        records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(records)
}

/// Loads every case of the manifest, or only those of `split`.
pub fn load_cases(cfg: &ExperimentConfig, split: Option<Split>) -> CliResult<Vec<SamplePair>> {
    let manifest = dataset_dir(cfg).join("manifest.jsonl");
    if !manifest.exists() {
        return Err(CliError::MissingArtifact(format!(
            "no dataset manifest at {}; run `simulate` first",
            manifest.display()
        )));
    }
    let root = cfg.data_root();
    let records: Vec<DatasetRecord> = read_jsonl(&manifest)?;
    records
        .into_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| {
            Ok(SamplePair {
                spect: read_volume(&root, &r.spect_path)?,
                mu_moved: read_volume(&root, &r.mu_moved_path)?,
                mu_registered: read_volume(&root, &r.mu_ref_path)?,
                case_id: r.case_id,
                seed: r.seed,
                truth: RigidParams::from_array(r.truth),
                split: r.split,
            })
        })
        .collect()
}

/// Final record of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub parameters: usize,
    pub train_cases: usize,
    pub val_cases: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_dt_mm: f64,
    pub best_val_dr_deg: f64,
}

fn model_config(cfg: &ExperimentConfig, method: Method) -> ModelConfig {
    ModelConfig {
        use_dusfe: method == Method::DensenetDusfe,
        ..cfg.model.clone()
    }
}

pub fn train_method(cfg: &ExperimentConfig, method: Method, cases: &[SamplePair]) -> CliResult<()> {
    let train_set: Vec<&SamplePair> = cases.iter().filter(|c| c.split == Split::Train).collect();
    let val_set: Vec<&SamplePair> = cases.iter().filter(|c| c.split == Split::Val).collect();
    let dir = model_dir(cfg, method);
    mkdir(&dir)?;
    let model_cfg = model_config(cfg, method);
    write_text(
        &dir.join("model.json"),
        &serde_json::to_string_pretty(&model_cfg).expect("model config serializes"),
    )?;
    let tc = TrainConfig {
        seed: derive_seed(cfg.seed, &format!("train-{}", method.as_str())),
        ..cfg.train.clone()
    };
    let mut net = RegNet::<f32>::new(model_cfg, derive_seed(cfg.seed, &format!("model-{}", method.as_str())))?;
    log::info!(
        "training {} ({} parameters) on {} cases, validating on {}",
        method.label(),
        net.num_parameters(),
        train_set.len(),
        val_set.len()
    );
    let log_path = dir.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let latest = dir.join("latest.ckpt.json");
    let outcome = train(&mut net, &train_set, &val_set, &tc, |entry, model| {
        serde_json::to_writer(&mut log_file, entry)?;
        log_file.write_all(b"\n")?;
        log::info!(
            "epoch {} train {:.4} val {:.4} ΔT {:.2} mm ΔR {:.2}°",
            entry.epoch,
            entry.train_loss,
            entry.val_loss,
            entry.val_dt_mm,
            entry.val_dr_deg
        );
        if tc.checkpoint_every > 0 && (entry.epoch + 1) % tc.checkpoint_every == 0 {
            model.save(&latest)?;
        }
        Ok(())
    })?;
    *net.store_mut() = outcome.best;
    net.save(&dir.join("best.ckpt.json"))?;
    let best = &outcome.history[outcome.best_epoch];
    let summary = TrainSummary {
        method,
        parameters: net.num_parameters(),
        train_cases: train_set.len(),
        val_cases: val_set.len(),
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: best.val_loss,
        best_val_dt_mm: best.val_dt_mm,
        best_val_dr_deg: best.val_dr_deg,
    };
    write_text(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    log::info!("{}: best epoch {}", method.label(), outcome.best_epoch);
    Ok(())
}

pub fn load_model(cfg: &ExperimentConfig, method: Method) -> CliResult<RegNet<f32>> {
    let dir = model_dir(cfg, method);
    let ckpt = dir.join("best.ckpt.json");
    if !ckpt.exists() {
        return Err(CliError::MissingArtifact(format!(
            "no checkpoint for method {} at {}; run `train` first",
            method.as_str(),
            ckpt.display()
        )));
    }
    let model_path = dir.join("model.json");
    let text = fs::read_to_string(&model_path).map_err(|e| CliError::io(&model_path, e))?;
    let model_cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", model_path.display())))?;
    Ok(RegNet::load(model_cfg, &ckpt)?)
}

fn mi_config(cfg: &ExperimentConfig) -> MiConfig {
    MiConfig {
        seed: derive_seed(cfg.seed, "mi"),
        ..cfg.mi.clone()
    }
}

/// Registration estimates of `method` for every case.
pub fn predict(cfg: &ExperimentConfig, method: Method, cases: &[SamplePair]) -> CliResult<Vec<Prediction>> {
    let record = |c: &SamplePair, predicted, fell_back_to_identity| Prediction {
        case_id: c.case_id.clone(),
        method,
        predicted,
        fell_back_to_identity,
    };
    match method {
        Method::BaselineMotion => Ok(cases.iter().map(|c| record(c, RigidParams::ZERO, false)).collect()),
        Method::MutualInformation => {
            let mi = mi_config(cfg);
            cases
                .par_iter()
                .map(|c| {
                    let r = register_mi(&c.mu_moved, &c.spect, &mi)?;
                    Ok(record(c, r.params, r.fell_back_to_identity))
                })
                .collect()
        }
        Method::Densenet | Method::DensenetDusfe => {
            let net = load_model(cfg, method)?;
            // The model is read-only here, so batches run in parallel.
            let batches: Vec<Vec<Prediction>> = cases
                .par_chunks(cfg.train.batch_size.max(1))
                .map(|chunk| {
                    let pairs: Vec<_> = chunk.iter().map(|c| (&c.mu_moved, &c.spect)).collect();
                    chunk
                        .iter()
                        .zip(net.predict(&pairs)?)
                        .map(|(c, p)| {
                            if p.is_finite() {
                                Ok(record(c, p, false))
                            } else {
                                Err(CliError::Numerical(format!(
                                    "{}: non-finite prediction for {}",
                                    method.as_str(),
                                    c.case_id
                                )))
                            }
                        })
                        .collect()
                })
                .collect::<CliResult<_>>()?;
            Ok(batches.into_iter().flatten().collect())
        }
    }
}

pub fn write_predictions(cfg: &ExperimentConfig, method: Method, preds: &[Prediction]) -> CliResult<PathBuf> {
    let dir = cfg.run_dir().join("predictions");
    mkdir(&dir)?;
    let path = dir.join(format!("{}.jsonl", method.as_str()));
    write_jsonl(&path, preds)?;
    Ok(path)
}

/// Scores predictions against the cases they were made for.
pub fn score(cases: &[SamplePair], preds: &[Prediction]) -> CliResult<Vec<CaseResult>> {
    cases
        .par_iter()
        .zip(preds)
        .map(|(c, p)| {
            debug_assert_eq!(c.case_id, p.case_id);
            let corrected = apply_correction(&c.mu_moved, p.predicted)?;
            Ok(CaseResult::score(&c.case_id, p.method, p.predicted, c.truth, &corrected, &c.mu_registered)?)
        })
        .collect()
}

fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run_dir().join("eval")
}

/// Aggregates per-case results into the comparison table, writes it and
/// returns the markdown form.
pub fn summarize(cfg: &ExperimentConfig, results: &[CaseResult]) -> CliResult<String> {
    let summaries = aggregate(results)?;
    let dir = eval_dir(cfg);
    mkdir(&dir)?;
    let md = markdown_table(&summaries);
    write_text(&dir.join("summary.md"), &md)?;
    write_text(&dir.join("summary.csv"), &csv_table(&summaries))?;
    write_text(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summaries).expect("summaries serialize"),
    )?;
    Ok(md)
}

pub fn evaluate(cfg: &ExperimentConfig, methods: &[Method]) -> CliResult<String> {
    // Fail on missing checkpoints before spending time on other methods.
    for &m in methods.iter().filter(|m| m.is_learned()) {
        load_model(cfg, m)?;
    }
    let cases = load_cases(cfg, Some(Split::Test))?;
    if cases.is_empty() {
        return Err(CliError::Input("the test split is empty".into()));
    }
    let mut results = Vec::new();
    for &m in methods {
        log::info!("evaluating {} on {} test cases", m.label(), cases.len());
        let preds = predict(cfg, m, &cases)?;
        write_predictions(cfg, m, &preds)?;
        results.extend(score(&cases, &preds)?);
    }
    let dir = eval_dir(cfg);
    mkdir(&dir)?;
    write_jsonl(&dir.join("cases.jsonl"), &results)?;
    summarize(cfg, &results)
}

pub fn report(cfg: &ExperimentConfig) -> CliResult<String> {
    let path = eval_dir(cfg).join("cases.jsonl");
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "no per-case results at {}; run `evaluate` first",
            path.display()
        )));
    }
    let results: Vec<CaseResult> = read_jsonl(&path)?;
    summarize(cfg, &results)
}
