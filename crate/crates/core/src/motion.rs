//! Random rigid misregistration of attenuation maps.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{params_to_matrix, resample, RigidParams};
use crate::seed::{derive_seed, rng_from};
use crate::{CoreError, Result, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionRanges {
    /// Translation limits in voxels.
    pub max_t: [f64; 3],
    /// Rotation limits in degrees.
    pub max_r: [f64; 3],
    pub quantum: f64,
}

impl Default for MotionRanges {
    fn default() -> Self {
        Self {
            max_t: [8.0, 8.0, 4.0],
            max_r: [10.0, 10.0, 30.0],
            quantum: 0.01,
        }
    }
}

impl MotionRanges {
    /// Half of the default limits, used for desk-scale learning runs.
    pub fn reduced() -> Self {
        Self {
            max_t: [4.0, 4.0, 2.0],
            max_r: [5.0, 5.0, 15.0],
            quantum: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.max_t.iter().chain(&self.max_r);
        if !(self.quantum > 0.0) || all.clone().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(CoreError::Config(format!("motion ranges must be positive: {self:?}")));
        }
        for &m in all {
            let k = m / self.quantum;
            if (k - k.round()).abs() > 1e-9 {
                return Err(CoreError::Config(format!(
                    "limit {m} is not a multiple of quantum {}",
                    self.quantum
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: RigidParams) -> bool {
        let a = p.to_array();
        let lim = self.limits();
        a.iter().zip(lim).all(|(v, m)| v.abs() <= m + 1e-9)
    }

    fn limits(&self) -> [f64; 6] {
        let (t, r) = (self.max_t, self.max_r);
        [t[0], t[1], t[2], r[0], r[1], r[2]]
    }
}

/// Rounds to the nearest multiple of `quantum`, ties away from zero.
pub fn quantize(v: f64, quantum: f64) -> f64 {
    let steps = (v / quantum).round();
    // Dividing by the reciprocal keeps e.g. 0.01 multiples as close to
    // k/100 as a double allows.
    let inv = 1.0 / quantum;
    if inv.fract() == 0.0 {
        steps / inv
    } else {
        steps * quantum
    }
}

/// Draws each component independently and uniformly in `[-max, max]`.
pub fn sample_params<R: Rng + ?Sized>(ranges: &MotionRanges, rng: &mut R) -> RigidParams {
    let mut a = [0.0; 6];
    for (v, m) in a.iter_mut().zip(ranges.limits()) {
        *v = quantize(rng.gen_range(-m..=m), ranges.quantum).clamp(-m, m);
    }
    RigidParams::from_array(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One simulated case. `mu_registered` is kept alongside so volume-space
/// metrics can be computed without reloading the cohort.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub case_id: String,
    pub seed: u64,
    pub truth: RigidParams,
    pub spect: Volume,
    pub mu_moved: Volume,
    pub mu_registered: Volume,
    pub split: Split,
}

pub fn case_id(phantom: usize, motion: usize) -> String {
    format!("p{phantom:04}_m{motion}")
}

/// Rebuilds one case from its recorded seed.
pub fn simulate_case(mu: &Volume, ranges: &MotionRanges, seed: u64) -> Result<(RigidParams, Volume)> {
    let mut rng = rng_from(seed);
    let truth = sample_params(ranges, &mut rng);
    let moved = resample(mu, &params_to_matrix(truth, mu.dims()))?;
    Ok((truth, moved))
}

/// Assigns whole phantoms to splits so that motions of one phantom never
/// straddle train and test. Counts are rounded, with the remainder going to
/// training.
pub fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(CoreError::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = ((fractions[2] * n as f64).round() as usize).min(n - n_val.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            splits[i] = Split::Val;
        } else if rank < n_val + n_test {
            splits[i] = Split::Test;
        }
    }
    Ok(splits)
}

/// Simulates `per_case` motions for every registered pair.
pub fn build_dataset(
    pairs: &[(Volume, Volume)],
    splits: &[Split],
    per_case: usize,
    ranges: &MotionRanges,
    master_seed: u64,
) -> Result<Vec<SamplePair>> {
    if per_case == 0 {
        return Err(CoreError::Config("per_case must be at least 1".into()));
    }
    if splits.len() != pairs.len() {
        return Err(CoreError::Mismatch(format!(
            "{} splits for {} phantoms",
            splits.len(),
            pairs.len()
        )));
    }
    ranges.validate()?;
    for (i, (mu, spect)) in pairs.iter().enumerate() {
        if !mu.same_grid(spect) {
            return Err(CoreError::Mismatch(format!(
                "phantom {i}: mu-map {:?}@{:?} vs SPECT {:?}@{:?}",
                mu.dims(),
                mu.spacing_mm(),
                spect.dims(),
                spect.spacing_mm()
            )));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..per_case).map(move |m| (p, m)))
        .collect();
    jobs.par_iter()
        .map(|&(p, m)| {
            let (mu, spect) = &pairs[p];
            let id = case_id(p, m);
            let seed = derive_seed(master_seed, &id);
            let (truth, mu_moved) = simulate_case(mu, ranges, seed)?;
            Ok(SamplePair {
                case_id: id,
                seed,
                truth,
                spect: spect.clone(),
                mu_moved,
                mu_registered: mu.clone(),
                split: splits[p],
            })
        })
        .collect()
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub case_id: String,
    pub seed: u64,
    pub truth: [f64; 6],
    pub spect_path: String,
    pub mu_moved_path: String,
    pub mu_ref_path: String,
    pub split: Split,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CoreError::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}
