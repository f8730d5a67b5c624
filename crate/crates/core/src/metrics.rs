//! Parameter-space and volume-space registration errors, and their
//! per-method aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::RigidParams;
use crate::{CoreError, Result, Volume};

/// Mean absolute translation error in millimetres.
pub fn delta_t(pred: RigidParams, truth: RigidParams, spacing_mm: f64) -> f64 {
    let (p, t) = (pred.translation(), truth.translation());
    let vox = (0..3).map(|i| (p[i] - t[i]).abs()).sum::<f64>() / 3.0;
    vox * spacing_mm
}

/// Mean absolute rotation error in degrees.
pub fn delta_r(pred: RigidParams, truth: RigidParams) -> f64 {
    let (p, t) = (pred.rotation(), truth.rotation());
    (0..3).map(|i| (p[i] - t[i]).abs()).sum::<f64>() / 3.0
}

/// `(Σ(x−r)² / Σr², Σ|x−r| / Σ|r|)` as fractions.
pub fn nmse_nmae(x: &Volume, reference: &Volume) -> Result<(f64, f64)> {
    if x.dims() != reference.dims() {
        return Err(CoreError::Mismatch(format!(
            "volume {:?} vs reference {:?}",
            x.dims(),
            reference.dims()
        )));
    }
    let (mut se, mut ae, mut ss, mut sa) = (0.0, 0.0, 0.0, 0.0);
    for (&a, &r) in x.data().iter().zip(reference.data()) {
        let (a, r) = (a as f64, r as f64);
        let d = a - r;
        se += d * d;
        ae += d.abs();
        ss += r * r;
        sa += r.abs();
    }
    if ss == 0.0 {
        return Err(CoreError::Mismatch("reference volume is all zero".into()));
    }
    Ok((se / ss, ae / sa))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No correction: the prediction is always zero motion.
    BaselineMotion,
    MutualInformation,
    /// Dual-stream network without attention.
    Densenet,
    DensenetDusfe,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::BaselineMotion,
        Method::MutualInformation,
        Method::Densenet,
        Method::DensenetDusfe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::BaselineMotion => "baseline_motion",
            Method::MutualInformation => "mutual_information",
            Method::Densenet => "densenet",
            Method::DensenetDusfe => "densenet_dusfe",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::BaselineMotion => "Baseline (no correction)",
            Method::MutualInformation => "Mutual Information",
            Method::Densenet => "DenseNet",
            Method::DensenetDusfe => "DenseNet+DuSFE",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Densenet | Method::DensenetDusfe)
    }

    pub fn parse(s: &str) -> Option<Method> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub method: Method,
    pub predicted: RigidParams,
    pub truth: RigidParams,
    pub dt_mm: f64,
    pub dr_deg: f64,
    pub nmse_mu: f64,
    pub nmae_mu: f64,
}

impl CaseResult {
    /// Scores `predicted` against `truth`, and the corrected map against
    /// the registered reference.
    pub fn score(
        case_id: &str,
        method: Method,
        predicted: RigidParams,
        truth: RigidParams,
        mu_corrected: &Volume,
        mu_reference: &Volume,
    ) -> Result<Self> {
        let (nmse_mu, nmae_mu) = nmse_nmae(mu_corrected, mu_reference)?;
        Ok(Self {
            case_id: case_id.to_string(),
            method,
            predicted,
            truth,
            dt_mm: delta_t(predicted, truth, mu_reference.spacing_mm()[0]),
            dr_deg: delta_r(predicted, truth),
            nmse_mu,
            nmae_mu,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
}

/// Mean and sample standard deviation. The flag is set when there is only
/// one value and the deviation is undefined.
pub fn mean_std(values: &[f64]) -> (Stat, bool) {
    let n = values.len();
    if n == 0 {
        return (Stat { mean: f64::NAN, std: f64::NAN }, true);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Stat { mean, std: 0.0 }, true);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Stat { mean, std: var.sqrt() }, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n: usize,
    pub dt_mm: Stat,
    pub dr_deg: Stat,
    pub nmse_mu: Stat,
    pub nmae_mu: Stat,
    pub single_case: bool,
}

/// Per-method summaries in [`Method`] order.
pub fn aggregate(results: &[CaseResult]) -> Result<Vec<MethodSummary>> {
    if results.is_empty() {
        return Err(CoreError::Config("no results to aggregate".into()));
    }
    let mut out = Vec::new();
    for method in Method::ALL {
        let group: Vec<&CaseResult> = results.iter().filter(|r| r.method == method).collect();
        if group.is_empty() {
            continue;
        }
        let col = |f: fn(&CaseResult) -> f64| -> Vec<f64> { group.iter().map(|r| f(r)).collect() };
        let (dt_mm, single_case) = mean_std(&col(|r| r.dt_mm));
        out.push(MethodSummary {
            method,
            n: group.len(),
            dt_mm,
            dr_deg: mean_std(&col(|r| r.dr_deg)).0,
            nmse_mu: mean_std(&col(|r| r.nmse_mu)).0,
            nmae_mu: mean_std(&col(|r| r.nmae_mu)).0,
            single_case,
        });
    }
    Ok(out)
}

fn pm(s: Stat, scale: f64) -> String {
    format!("{:.2} ± {:.2}", s.mean * scale, s.std * scale)
}

pub fn markdown_table(summaries: &[MethodSummary]) -> String {
    let mut s = String::from(
        "| Method | n | ΔT (mm) | ΔR (deg) | NMSE (%) | NMAE (%) |\n|---|---:|---:|---:|---:|---:|\n",
    );
    for m in summaries {
        let _ = writeln!(
            s,
            "| {}{} | {} | {} | {} | {} | {} |",
            m.method.label(),
            if m.single_case { " †" } else { "" },
            m.n,
            pm(m.dt_mm, 1.0),
            pm(m.dr_deg, 1.0),
            pm(m.nmse_mu, 100.0),
            pm(m.nmae_mu, 100.0)
        );
    }
    if summaries.iter().any(|m| m.single_case) {
        s.push_str("\n† single case: standard deviation undefined, shown as 0.\n");
    }
    s
}

pub fn csv_table(summaries: &[MethodSummary]) -> String {
    let mut s = String::from(
        "method,n,dt_mm_mean,dt_mm_std,dr_deg_mean,dr_deg_std,nmse_pct_mean,nmse_pct_std,nmae_pct_mean,nmae_pct_std,single_case\n",
    );
    for m in summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.method.as_str(),
            m.n,
            m.dt_mm.mean,
            m.dt_mm.std,
            m.dr_deg.mean,
            m.dr_deg.std,
            m.nmse_mu.mean * 100.0,
            m.nmse_mu.std * 100.0,
            m.nmae_mu.mean * 100.0,
            m.nmae_mu.std * 100.0,
            m.single_case
        );
    }
    s
}
