//! Synthetic torso phantoms: a piecewise-constant attenuation map and a
//! matching myocardial perfusion SPECT image, aligned by construction.
//!
//! Axes: x is patient left-right, y is posterior (-) to anterior (+), z is
//! the scanner axis. The spine and lungs show up only in the attenuation
//! map, which is what makes the pair genuinely cross-modality.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seed::{derive_seed, rng_from};
use crate::{CoreError, Modality, Result, Volume, DEFAULT_SPACING_MM};

/// Geometry in voxels, offsets relative to the volume center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub torso_half_axes: [f64; 3],
    pub lung_half_axes: [f64; 3],
    /// Left lung center; the right lung mirrors it in x.
    pub lung_offset: [f64; 3],
    pub spine_radius: f64,
    /// (x, y) of the spine axis; it runs the full torso length in z.
    pub spine_offset: [f64; 2],
    pub heart_offset: [f64; 3],
    /// Outer radii of the left-ventricle ellipsoid: long axis first.
    pub heart_radii: [f64; 3],
    pub heart_thickness: f64,
    /// Long-axis orientation: azimuth in the x-y plane, then elevation
    /// toward -z, in degrees.
    pub heart_tilt_deg: [f64; 2],
    pub mu_soft: f64,
    pub mu_lung: f64,
    pub mu_bone: f64,
    pub mu_myocardium: f64,
    pub uptake_myocardium: f64,
    pub uptake_background: f64,
    pub blur_sigma: f64,
    pub noise_level: f64,
    pub seed: u64,
}

const REFERENCE_EXTENT: f64 = 64.0;

impl PhantomConfig {
    /// Adult chest geometry laid out for a 64³ grid at 6.8 mm, scaled
    /// linearly to `dims`.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let s = [
            dims[0] as f64 / REFERENCE_EXTENT,
            dims[1] as f64 / REFERENCE_EXTENT,
            dims[2] as f64 / REFERENCE_EXTENT,
        ];
        let iso = (s[0] * s[1] * s[2]).cbrt();
        Self {
            dims,
            spacing_mm: DEFAULT_SPACING_MM,
            torso_half_axes: [25.0 * s[0], 17.0 * s[1], 29.0 * s[2]],
            lung_half_axes: [8.0 * s[0], 11.0 * s[1], 17.0 * s[2]],
            lung_offset: [11.0 * s[0], -1.0 * s[1], 5.0 * s[2]],
            spine_radius: 3.0 * iso,
            spine_offset: [0.0, -12.0 * s[1]],
            heart_offset: [2.0 * s[0], 5.0 * s[1], -3.0 * s[2]],
            heart_radii: [10.0 * iso, 6.0 * iso, 6.0 * iso],
            heart_thickness: 2.4 * iso,
            heart_tilt_deg: [40.0, 25.0],
            mu_soft: 0.15,
            mu_lung: 0.04,
            mu_bone: 0.25,
            mu_myocardium: 0.16,
            uptake_myocardium: 1.0,
            uptake_background: 0.05,
            blur_sigma: 1.0,
            noise_level: 0.1,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self::for_dims([32; 3])
    }

    pub fn full() -> Self {
        Self::for_dims([64; 3])
    }

    fn center(&self) -> [f64; 3] {
        [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ]
    }

    /// Checks that every body is positive-sized and lies inside the grid.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(format!("phantom: {msg}")));
        if self.dims.iter().any(|&d| d < 4) {
            return bad(format!("dims {:?} too small", self.dims));
        }
        if !(self.spacing_mm > 0.0) {
            return bad("spacing must be positive".into());
        }
        let coeffs = [
            self.mu_soft,
            self.mu_lung,
            self.mu_bone,
            self.mu_myocardium,
        ];
        if coeffs.iter().any(|&c| !(c > 0.0)) {
            return bad(format!("attenuation coefficients must be positive: {coeffs:?}"));
        }
        if !(self.uptake_myocardium >= 0.0)
            || !(self.uptake_background >= 0.0)
            || !(self.noise_level >= 0.0)
            || !(self.blur_sigma >= 0.0)
        {
            return bad("uptakes, noise level and blur must be non-negative".into());
        }
        let sizes = self
            .torso_half_axes
            .iter()
            .chain(&self.lung_half_axes)
            .chain(&self.heart_radii)
            .chain([&self.spine_radius, &self.heart_thickness]);
        if sizes.clone().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return bad("body sizes must be positive".into());
        }
        if self.heart_thickness >= self.heart_radii[1].min(self.heart_radii[2]) {
            return bad("myocardial wall thicker than the ventricle".into());
        }
        let c = self.center();
        let fits = |off: [f64; 3], half: [f64; 3]| {
            (0..3).all(|i| {
                let lo = c[i] + off[i] - half[i];
                let hi = c[i] + off[i] + half[i];
                lo >= 0.0 && hi <= self.dims[i] as f64 - 1.0
            })
        };
        if !fits([0.0; 3], self.torso_half_axes) {
            return bad(format!(
                "torso {:?} exceeds dims {:?}",
                self.torso_half_axes, self.dims
            ));
        }
        let l = self.lung_offset;
        for off in [l, [-l[0], l[1], l[2]]] {
            if !fits(off, self.lung_half_axes) {
                return bad("lung exceeds dims".into());
            }
        }
        let r = self.heart_radii[0].max(self.heart_radii[1]).max(self.heart_radii[2]);
        if !fits(self.heart_offset, [r; 3]) {
            return bad("heart exceeds dims".into());
        }
        let sp = [self.spine_offset[0], self.spine_offset[1], 0.0];
        if !fits(sp, [self.spine_radius, self.spine_radius, 0.0]) {
            return bad("spine exceeds dims".into());
        }
        // The heart must sit inside the body, otherwise its attenuation
        // would float in air.
        if torso_level(self, add(c, self.heart_offset)) > 1.0 {
            return bad("heart center outside torso".into());
        }
        Ok(())
    }

    /// Short hex digest of the serialized configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&json);
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn ellipsoid_level(p: [f64; 3], center: [f64; 3], half: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((p[i] - center[i]) / half[i]).powi(2))
        .sum()
}

fn torso_level(cfg: &PhantomConfig, p: [f64; 3]) -> f64 {
    ellipsoid_level(p, cfg.center(), cfg.torso_half_axes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Air,
    Soft,
    Lung,
    Bone,
    Myocardium,
}

/// Point classifier shared by both modalities.
struct Anatomy<'a> {
    cfg: &'a PhantomConfig,
    center: [f64; 3],
    heart_center: [f64; 3],
    /// Rows are the ventricle's local axes: long, then the two short ones.
    heart_axes: [[f64; 3]; 3],
}

impl<'a> Anatomy<'a> {
    fn new(cfg: &'a PhantomConfig) -> Self {
        let center = cfg.center();
        let (sa, ca) = cfg.heart_tilt_deg[0].to_radians().sin_cos();
        let (se, ce) = cfg.heart_tilt_deg[1].to_radians().sin_cos();
        let long = [ca * ce, sa * ce, -se];
        let short1 = [-sa, ca, 0.0];
        let short2 = [
            long[1] * short1[2] - long[2] * short1[1],
            long[2] * short1[0] - long[0] * short1[2],
            long[0] * short1[1] - long[1] * short1[0],
        ];
        Self {
            cfg,
            center,
            heart_center: add(center, cfg.heart_offset),
            heart_axes: [long, short1, short2],
        }
    }

    fn heart_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.heart_center[0],
            p[1] - self.heart_center[1],
            p[2] - self.heart_center[2],
        ];
        self.heart_axes
            .map(|a| a[0] * d[0] + a[1] * d[1] + a[2] * d[2])
    }

    /// Half-ellipsoidal shell: the apex points along +long, the base plane
    /// through the center is open.
    fn in_myocardium(&self, p: [f64; 3]) -> bool {
        let q = self.heart_local(p);
        if q[0] < 0.0 {
            return false;
        }
        let r = self.cfg.heart_radii;
        let t = self.cfg.heart_thickness;
        let outer = ellipsoid_level(q, [0.0; 3], r);
        let inner = ellipsoid_level(q, [0.0; 3], [r[0] - t, r[1] - t, r[2] - t]);
        outer <= 1.0 && inner > 1.0
    }

    fn classify(&self, p: [f64; 3]) -> Tissue {
        let cfg = self.cfg;
        if torso_level(cfg, p) > 1.0 {
            return Tissue::Air;
        }
        let dx = p[0] - (self.center[0] + cfg.spine_offset[0]);
        let dy = p[1] - (self.center[1] + cfg.spine_offset[1]);
        if dx * dx + dy * dy <= cfg.spine_radius * cfg.spine_radius {
            return Tissue::Bone;
        }
        if self.in_myocardium(p) {
            return Tissue::Myocardium;
        }
        let l = cfg.lung_offset;
        for off in [l, [-l[0], l[1], l[2]]] {
            if ellipsoid_level(p, add(self.center, off), cfg.lung_half_axes) <= 1.0 {
                return Tissue::Lung;
            }
        }
        Tissue::Soft
    }
}

const SUPERSAMPLE: usize = 2;

/// Per-voxel tissue fractions from `SUPERSAMPLE³` sub-voxel samples, folded
/// into attenuation and noiseless emission values.
fn rasterize(cfg: &PhantomConfig) -> (Vec<f32>, Vec<f64>) {
    let anatomy = Anatomy::new(cfg);
    let [nx, ny, nz] = cfg.dims;
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE * SUPERSAMPLE) as f64;
    let offsets: Vec<f64> = (0..SUPERSAMPLE)
        .map(|k| (k as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5)
        .collect();
    let planes: Vec<(Vec<f32>, Vec<f64>)> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut mu = vec![0.0f32; nx * ny];
            let mut act = vec![0.0f64; nx * ny];
            for y in 0..ny {
                for x in 0..nx {
                    let (mut m, mut a) = (0.0, 0.0);
                    for &oz in &offsets {
                        for &oy in &offsets {
                            for &ox in &offsets {
                                let p = [x as f64 + ox, y as f64 + oy, z as f64 + oz];
                                let (tm, ta) = match anatomy.classify(p) {
                                    Tissue::Air => (0.0, 0.0),
                                    Tissue::Soft => (cfg.mu_soft, cfg.uptake_background),
                                    Tissue::Lung => (cfg.mu_lung, cfg.uptake_background),
                                    Tissue::Bone => (cfg.mu_bone, cfg.uptake_background),
                                    Tissue::Myocardium => {
                                        (cfg.mu_myocardium, cfg.uptake_myocardium)
                                    }
                                };
                                m += tm;
                                a += ta;
                            }
                        }
                    }
                    mu[y * nx + x] = (m / n_sub) as f32;
                    act[y * nx + x] = a / n_sub;
                }
            }
            (mu, act)
        })
        .collect();
    let mut mu = Vec::with_capacity(nx * ny * nz);
    let mut act = Vec::with_capacity(nx * ny * nz);
    for (m, a) in planes {
        mu.extend(m);
        act.extend(a);
    }
    (mu, act)
}

/// Separable Gaussian blur, truncated at 3σ, zero outside the grid.
pub fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let [nx, ny, _] = dims;
    let strides = [1, nx, nx * ny];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let q = pos + k as isize - radius;
                if q >= 0 && q < n {
                    acc += w * cur[(i as isize + (q - pos) * stride as isize) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Scales to unit mean; an all-zero volume is returned unchanged.
pub fn mean_normalize(data: &mut [f64]) {
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    if mean > 0.0 {
        data.iter_mut().for_each(|v| *v /= mean);
    }
}

/// Builds the registered (μ-map, SPECT) pair for `cfg`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, Volume)> {
    cfg.validate()?;
    let (mu, act) = rasterize(cfg);
    let mut spect = gaussian_blur(&act, cfg.dims, cfg.blur_sigma);
    if cfg.noise_level > 0.0 {
        let mut rng = rng_from(derive_seed(cfg.seed, "spect-noise"));
        for v in spect.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v + cfg.noise_level * v.max(0.0).sqrt() * z).max(0.0);
        }
    }
    mean_normalize(&mut spect);
    let spacing = [cfg.spacing_mm; 3];
    let mu = Volume::new(cfg.dims, spacing, Modality::MuMap, mu)?;
    let spect = Volume::new(
        cfg.dims,
        spacing,
        Modality::Spect,
        spect.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok((mu, spect))
}

/// Fraction of each voxel covered by myocardium.
pub fn myocardium_fraction(cfg: &PhantomConfig) -> Vec<f64> {
    let anatomy = Anatomy::new(cfg);
    let [nx, ny, nz] = cfg.dims;
    let offsets: Vec<f64> = (0..SUPERSAMPLE)
        .map(|k| (k as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5)
        .collect();
    let n_sub = offsets.len().pow(3) as f64;
    let mut out = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut hit = 0.0;
                for &oz in &offsets {
                    for &oy in &offsets {
                        for &ox in &offsets {
                            let p = [x as f64 + ox, y as f64 + oy, z as f64 + oz];
                            if anatomy.in_myocardium(p) && torso_level(cfg, p) <= 1.0 {
                                hit += 1.0;
                            }
                        }
                    }
                }
                out[x + nx * (y + ny * z)] = hit / n_sub;
            }
        }
    }
    out
}

/// Fractional ranges used to vary phantoms across a cohort. Sizes are
/// scaled by `1 + U(-f, f)`; offsets move by `U(-f, f)` times the relevant
/// half-axis; uptakes scale by `1 + U(-f, f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomJitter {
    pub size: f64,
    pub position: f64,
    pub uptake: f64,
    pub tilt_deg: f64,
}

impl PhantomJitter {
    pub const NONE: PhantomJitter = PhantomJitter {
        size: 0.0,
        position: 0.0,
        uptake: 0.0,
        tilt_deg: 0.0,
    };
}

impl Default for PhantomJitter {
    fn default() -> Self {
        Self {
            size: 0.1,
            position: 0.1,
            uptake: 0.1,
            tilt_deg: 10.0,
        }
    }
}

fn jitter_once<R: Rng + ?Sized>(base: &PhantomConfig, j: &PhantomJitter, rng: &mut R) -> PhantomConfig {
    let mut u = |f: f64| if f > 0.0 { rng.gen_range(-f..=f) } else { 0.0 };
    let mut c = base.clone();
    for v in c.torso_half_axes.iter_mut() {
        *v *= 1.0 + u(j.size);
    }
    for v in c.lung_half_axes.iter_mut() {
        *v *= 1.0 + u(j.size);
    }
    for v in c.heart_radii.iter_mut() {
        *v *= 1.0 + u(j.size);
    }
    c.spine_radius *= 1.0 + u(j.size);
    c.heart_thickness *= 1.0 + u(j.size);
    for i in 0..3 {
        c.lung_offset[i] += u(j.position) * base.lung_half_axes[i];
        c.heart_offset[i] += u(j.position) * base.heart_radii[i];
    }
    for i in 0..2 {
        c.spine_offset[i] += u(j.position) * base.spine_radius;
        c.heart_tilt_deg[i] += u(j.tilt_deg);
    }
    c.uptake_myocardium *= 1.0 + u(j.uptake);
    c.uptake_background *= 1.0 + u(j.uptake);
    c
}

pub const MAX_JITTER_ATTEMPTS: usize = 100;

/// Draws the configuration of cohort member `index`.
pub fn cohort_member_config(
    base: &PhantomConfig,
    jitter: &PhantomJitter,
    master_seed: u64,
    index: usize,
) -> Result<PhantomConfig> {
    let seed = derive_seed(master_seed, &format!("phantom-{index}"));
    let mut rng = rng_from(seed);
    for _ in 0..MAX_JITTER_ATTEMPTS {
        let mut cfg = jitter_once(base, jitter, &mut rng);
        cfg.seed = seed;
        if cfg.validate().is_ok() {
            return Ok(cfg);
        }
    }
    Err(CoreError::Config(format!(
        "phantom {index}: no valid geometry after {MAX_JITTER_ATTEMPTS} jitter draws"
    )))
}

pub struct CohortMember {
    pub index: usize,
    pub config: PhantomConfig,
    pub mu: Volume,
    pub spect: Volume,
}

pub fn generate_cohort(
    n: usize,
    base: &PhantomConfig,
    jitter: &PhantomJitter,
    master_seed: u64,
) -> Result<Vec<CohortMember>> {
    if n == 0 {
        return Err(CoreError::Config("cohort size must be at least 1".into()));
    }
    base.validate()?;
    (0..n)
        .into_par_iter()
        .map(|index| {
            let config = cohort_member_config(base, jitter, master_seed, index)?;
            let (mu, spect) = generate_phantom(&config)?;
            Ok(CohortMember {
                index,
                config,
                mu,
                spect,
            })
        })
        .collect()
}
