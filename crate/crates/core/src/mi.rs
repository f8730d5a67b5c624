//! Mutual-information registration baseline.
//!
//! Intensities of each volume are min–max normalized to `[0, 1]` and
//! assigned to the nearest of `bins` levels; MI is read off the joint
//! histogram of voxel pairs in bits. The search maximizes MI between the
//! corrected attenuation map and the SPECT volume with coordinate descent
//! over the six parameters, restarted from several seeded starting points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{invert, resample, RigidParams};
use crate::motion::MotionRanges;
use crate::seed::{derive_seed, rng_from};
use crate::{CoreError, Result, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub bins: usize,
    /// Initial steps: voxels for translations, degrees for rotations.
    pub step_t: f64,
    pub step_r: f64,
    pub shrink: f64,
    pub min_step_t: f64,
    pub min_step_r: f64,
    pub max_evals: usize,
    /// Number of starts; the first is always zero motion, the rest are
    /// drawn uniformly from `start_ranges`.
    pub restarts: usize,
    pub start_ranges: MotionRanges,
    pub seed: u64,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            step_t: 2.0,
            step_r: 5.0,
            shrink: 0.5,
            min_step_t: 0.05,
            min_step_r: 0.05,
            max_evals: 200,
            restarts: 4,
            start_ranges: MotionRanges::reduced(),
            seed: 0,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 8 {
            return Err(CoreError::Config(format!("MI needs at least 8 bins, got {}", self.bins)));
        }
        let steps = [self.step_t, self.step_r, self.min_step_t, self.min_step_r];
        if steps.iter().any(|s| !(*s > 0.0)) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(CoreError::Config("MI steps must be positive and shrink in (0, 1)".into()));
        }
        if self.restarts == 0 || self.max_evals == 0 {
            return Err(CoreError::Config("MI needs at least one restart and evaluation".into()));
        }
        self.start_ranges.validate()
    }
}

/// Nearest-level bin indices of min–max normalized intensities, or `None`
/// for a constant volume.
fn quantize_levels(v: &Volume, bins: usize) -> Option<Vec<u16>> {
    let (lo, hi) = v
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return None;
    }
    let scale = (bins - 1) as f64 / (hi - lo) as f64;
    Some(
        v.data()
            .iter()
            .map(|&x| (((x - lo) as f64 * scale).round() as usize).min(bins - 1) as u16)
            .collect(),
    )
}

fn entropy_of(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy of the binned intensities, in bits.
pub fn entropy(v: &Volume, bins: usize) -> f64 {
    match quantize_levels(v, bins) {
        None => 0.0,
        Some(q) => {
            let mut counts = vec![0u64; bins];
            q.iter().for_each(|&b| counts[b as usize] += 1);
            entropy_of(&counts, q.len() as f64)
        }
    }
}

fn mi_from_levels(a: &[u16], b: &[u16], bins: usize) -> f64 {
    let mut joint = vec![0u64; bins * bins];
    let mut ca = vec![0u64; bins];
    let mut cb = vec![0u64; bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * bins + y as usize] += 1;
        ca[x as usize] += 1;
        cb[y as usize] += 1;
    }
    let n = a.len() as f64;
    let mi = entropy_of(&ca, n) + entropy_of(&cb, n) - entropy_of(&joint, n);
    mi.max(0.0)
}

/// `H(A) + H(B) − H(A, B)` in bits over voxel pairs.
pub fn mutual_information(a: &Volume, b: &Volume, bins: usize) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(CoreError::Mismatch(format!(
            "MI of {:?} and {:?} volumes",
            a.dims(),
            b.dims()
        )));
    }
    if bins < 2 {
        return Err(CoreError::Config("MI needs at least 2 bins".into()));
    }
    match (quantize_levels(a, bins), quantize_levels(b, bins)) {
        (Some(qa), Some(qb)) => Ok(mi_from_levels(&qa, &qb, bins)),
        _ => {
            log::warn!("mutual information of a constant volume is defined as 0");
            Ok(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    pub params: RigidParams,
    pub mi: f64,
    pub identity_mi: f64,
    pub evaluations: usize,
    /// Set when no start improved on zero motion; `params` is then zero.
    pub fell_back_to_identity: bool,
}

struct Objective<'a> {
    mu_moved: &'a Volume,
    spect_levels: Vec<u16>,
    bins: usize,
}

impl Objective<'_> {
    fn eval(&self, p: RigidParams) -> Result<f64> {
        let corrected = resample(self.mu_moved, &invert(p, self.mu_moved.dims()))?;
        Ok(match quantize_levels(&corrected, self.bins) {
            Some(q) => mi_from_levels(&q, &self.spect_levels, self.bins),
            None => 0.0,
        })
    }
}

fn descend(obj: &Objective, start: RigidParams, cfg: &MiConfig) -> Result<(RigidParams, f64, usize)> {
    let mut x = start.to_array();
    let mut best = obj.eval(start)?;
    let mut evals = 1;
    let mut steps = [cfg.step_t, cfg.step_t, cfg.step_t, cfg.step_r, cfg.step_r, cfg.step_r];
    let mins = [cfg.min_step_t, cfg.min_step_t, cfg.min_step_t, cfg.min_step_r, cfg.min_step_r, cfg.min_step_r];
    'search: loop {
        let mut moved = false;
        for i in 0..6 {
            if steps[i] < mins[i] {
                continue;
            }
            for dir in [1.0, -1.0] {
                if evals >= cfg.max_evals {
                    break 'search;
                }
                let mut y = x;
                y[i] += dir * steps[i];
                let v = obj.eval(RigidParams::from_array(y))?;
                evals += 1;
                if v > best {
                    best = v;
                    x = y;
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            for s in steps.iter_mut() {
                *s *= cfg.shrink;
            }
            if steps.iter().zip(&mins).all(|(s, m)| s < m) {
                break;
            }
        }
    }
    Ok((RigidParams::from_array(x), best, evals))
}

/// Estimates the misregistration of `mu_moved` relative to `spect`, in the
/// same convention as the network output.
pub fn register_mi(mu_moved: &Volume, spect: &Volume, cfg: &MiConfig) -> Result<MiResult> {
    cfg.validate()?;
    if !mu_moved.same_grid(spect) {
        return Err(CoreError::Mismatch(format!(
            "attenuation map {:?} and SPECT {:?} grids differ",
            mu_moved.dims(),
            spect.dims()
        )));
    }
    let Some(spect_levels) = quantize_levels(spect, cfg.bins) else {
        log::warn!("constant SPECT volume; MI registration returns zero motion");
        return Ok(MiResult {
            params: RigidParams::ZERO,
            mi: 0.0,
            identity_mi: 0.0,
            evaluations: 0,
            fell_back_to_identity: true,
        });
    };
    let obj = Objective {
        mu_moved,
        spect_levels,
        bins: cfg.bins,
    };
    let identity_mi = obj.eval(RigidParams::ZERO)?;
    let starts: Vec<RigidParams> = (0..cfg.restarts)
        .map(|k| {
            if k == 0 {
                RigidParams::ZERO
            } else {
                let mut rng = rng_from(derive_seed(cfg.seed, &format!("mi-start-{k}")));
                crate::motion::sample_params(&cfg.start_ranges, &mut rng)
            }
        })
        .collect();
    let runs: Vec<(RigidParams, f64, usize)> = starts
        .par_iter()
        .map(|&s| descend(&obj, s, cfg))
        .collect::<Result<_>>()?;
    let evaluations = 1 + runs.iter().map(|r| r.2).sum::<usize>();
    let (params, mi, _) = runs
        .into_iter()
        .fold(None::<(RigidParams, f64, usize)>, |acc, r| match acc {
            Some(a) if a.1 >= r.1 => Some(a),
            _ => Some(r),
        })
        .expect("at least one restart");
    if mi <= identity_mi {
        return Ok(MiResult {
            params: RigidParams::ZERO,
            mi: identity_mi,
            identity_mi,
            evaluations,
            fell_back_to_identity: true,
        });
    }
    Ok(MiResult {
        params,
        mi,
        identity_mi,
        evaluations,
        fell_back_to_identity: false,
    })
}
