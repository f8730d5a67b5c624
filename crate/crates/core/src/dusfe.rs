//! Dual-branch squeeze-fusion-excitation attention.
//!
//! Two same-shaped feature maps (attenuation stream and SPECT stream) are
//! squeezed, fused, and turned into one recalibration gate per stream:
//!
//! - channel branch: global average pooling, a fusion FC over the
//!   concatenated descriptors, one excitation FC per stream, sigmoid,
//!   channel-wise product;
//! - spatial branch: 1×1×1 squeeze convs down to one channel, a 1×1×1
//!   fusion conv over both, one 3×3×3 excitation conv per stream, sigmoid,
//!   voxel-wise product broadcast over channels.
//!
//! Each stream's output is `F + F_channel + F_spatial`. Excitation layers
//! start at zero, so a fresh module maps `F` to exactly `2F`.

use cardioreg_tensor::{Bound, Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::{CoreError, Result};

/// The two streams at one point of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePair {
    pub f1: Var,
    pub f2: Var,
}

impl FeaturePair {
    pub fn swapped(self) -> Self {
        Self {
            f1: self.f2,
            f2: self.f1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CsfeWeights {
    pub w_fuse: ParamId,
    pub b_fuse: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SsfeWeights {
    pub k_in1: ParamId,
    pub b_in1: ParamId,
    pub k_in2: ParamId,
    pub b_in2: ParamId,
    pub k_fuse: ParamId,
    pub b_fuse: ParamId,
    pub k_out1: ParamId,
    pub b_out1: ParamId,
    pub k_out2: ParamId,
    pub b_out2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DuSfeWeights {
    pub channels: usize,
    pub csfe: CsfeWeights,
    pub ssfe: SsfeWeights,
}

/// Uniform in `[-bound, bound]`.
pub(crate) fn uniform<T: Element, R: Rng + ?Sized>(
    shape: &[usize],
    bound: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        T::from_f64(rng.gen_range(-bound..=bound))
    })?)
}

fn fan_in_uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let fan_in: usize = shape[1..].iter().product();
    uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl DuSfeWeights {
    /// Adds the module's parameters to `store` under `{prefix}.dusfe.*`.
    pub fn register<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(CoreError::Config("DuSFE needs at least one channel".into()));
        }
        let c = channels;
        let mut add = |name: &str, t: Tensor<T>| -> Result<ParamId> {
            Ok(store.add(format!("{prefix}.dusfe.{name}"), t)?)
        };
        let csfe = CsfeWeights {
            w_fuse: add("csfe.w_fuse", fan_in_uniform(&[c, 2 * c], rng)?)?,
            b_fuse: add("csfe.b_fuse", Tensor::zeros(vec![c])?)?,
            w1: add("csfe.w1", Tensor::zeros(vec![c, c])?)?,
            b1: add("csfe.b1", Tensor::zeros(vec![c])?)?,
            w2: add("csfe.w2", Tensor::zeros(vec![c, c])?)?,
            b2: add("csfe.b2", Tensor::zeros(vec![c])?)?,
        };
        let ssfe = SsfeWeights {
            k_in1: add("ssfe.k_in1", fan_in_uniform(&[1, c, 1, 1, 1], rng)?)?,
            b_in1: add("ssfe.b_in1", Tensor::zeros(vec![1])?)?,
            k_in2: add("ssfe.k_in2", fan_in_uniform(&[1, c, 1, 1, 1], rng)?)?,
            b_in2: add("ssfe.b_in2", Tensor::zeros(vec![1])?)?,
            k_fuse: add("ssfe.k_fuse", fan_in_uniform(&[1, 2, 1, 1, 1], rng)?)?,
            b_fuse: add("ssfe.b_fuse", Tensor::zeros(vec![1])?)?,
            k_out1: add("ssfe.k_out1", Tensor::zeros(vec![1, 1, 3, 3, 3])?)?,
            b_out1: add("ssfe.b_out1", Tensor::zeros(vec![1])?)?,
            k_out2: add("ssfe.k_out2", Tensor::zeros(vec![1, 1, 3, 3, 3])?)?,
            b_out2: add("ssfe.b_out2", Tensor::zeros(vec![1])?)?,
        };
        Ok(Self {
            channels,
            csfe,
            ssfe,
        })
    }

    /// Scalar weight count of a module at width `c`.
    pub fn num_elements(c: usize) -> usize {
        let csfe = (2 * c * c + c) + 2 * (c * c + c);
        let ssfe = 2 * (c + 1) + (2 + 1) + 2 * (27 + 1);
        csfe + ssfe
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let c = &self.csfe;
        let s = &self.ssfe;
        vec![
            c.w_fuse, c.b_fuse, c.w1, c.b1, c.w2, c.b2, s.k_in1, s.b_in1, s.k_in2, s.b_in2,
            s.k_fuse, s.b_fuse, s.k_out1, s.b_out1, s.k_out2, s.b_out2,
        ]
    }
}

fn check_pair<T: Element>(tape: &Tape<T>, pair: FeaturePair, channels: usize) -> Result<()> {
    let (a, b) = (tape.shape(pair.f1), tape.shape(pair.f2));
    if a != b {
        return Err(CoreError::Mismatch(format!(
            "feature pair shapes differ: {a:?} vs {b:?}"
        )));
    }
    if a.len() != 5 || a[1] != channels {
        return Err(CoreError::Mismatch(format!(
            "expected [B, {channels}, D, H, W] features, got {a:?}"
        )));
    }
    Ok(())
}

/// Channel branch: returns `σ(R₁)⊙F₁, σ(R₂)⊙F₂`.
pub fn csfe<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    w: &DuSfeWeights,
    pair: FeaturePair,
) -> Result<FeaturePair> {
    check_pair(tape, pair, w.channels)?;
    let c = &w.csfe;
    let v1 = tape.global_avg_pool(pair.f1)?;
    let v2 = tape.global_avg_pool(pair.f2)?;
    let v = tape.concat_channels(v1, v2)?;
    let fused = tape.fully_connected(v, bound.var(c.w_fuse), bound.var(c.b_fuse))?;
    let r1 = tape.fully_connected(fused, bound.var(c.w1), bound.var(c.b1))?;
    let r2 = tape.fully_connected(fused, bound.var(c.w2), bound.var(c.b2))?;
    let g1 = tape.sigmoid(r1)?;
    let g2 = tape.sigmoid(r2)?;
    Ok(FeaturePair {
        f1: tape.mul(pair.f1, g1)?,
        f2: tape.mul(pair.f2, g2)?,
    })
}

/// Spatial branch: returns `σ(S₁)⊗F₁, σ(S₂)⊗F₂`.
pub fn ssfe<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    w: &DuSfeWeights,
    pair: FeaturePair,
) -> Result<FeaturePair> {
    check_pair(tape, pair, w.channels)?;
    let s = &w.ssfe;
    let m1 = tape.conv3d(pair.f1, bound.var(s.k_in1), bound.var(s.b_in1), 1, 0)?;
    let m2 = tape.conv3d(pair.f2, bound.var(s.k_in2), bound.var(s.b_in2), 1, 0)?;
    let m = tape.concat_channels(m1, m2)?;
    let fused = tape.conv3d(m, bound.var(s.k_fuse), bound.var(s.b_fuse), 1, 0)?;
    let s1 = tape.conv3d(fused, bound.var(s.k_out1), bound.var(s.b_out1), 1, 1)?;
    let s2 = tape.conv3d(fused, bound.var(s.k_out2), bound.var(s.b_out2), 1, 1)?;
    let g1 = tape.sigmoid(s1)?;
    let g2 = tape.sigmoid(s2)?;
    Ok(FeaturePair {
        f1: tape.mul(pair.f1, g1)?,
        f2: tape.mul(pair.f2, g2)?,
    })
}

/// `F + F_channel + F_spatial` for each stream.
pub fn dusfe<T: Element>(
    tape: &mut Tape<T>,
    bound: &Bound,
    w: &DuSfeWeights,
    pair: FeaturePair,
) -> Result<FeaturePair> {
    let c = csfe(tape, bound, w, pair)?;
    let s = ssfe(tape, bound, w, pair)?;
    let a1 = tape.add(pair.f1, c.f1)?;
    let a2 = tape.add(pair.f2, c.f2)?;
    Ok(FeaturePair {
        f1: tape.add(a1, s.f1)?,
        f2: tape.add(a2, s.f2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from;

    #[test]
    fn fresh_module_doubles_features() {
        let mut store = ParamStore::<f64>::new();
        let w = DuSfeWeights::register(&mut store, "t", 3, &mut rng_from(1)).unwrap();
        assert_eq!(store.num_elements(), DuSfeWeights::num_elements(3));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut r = rng_from(2);
        let f1 = tape.constant(uniform(&[2, 3, 2, 3, 4], 1.0, &mut r).unwrap());
        let f2 = tape.constant(uniform(&[2, 3, 2, 3, 4], 1.0, &mut r).unwrap());
        let out = dusfe(&mut tape, &bound, &w, FeaturePair { f1, f2 }).unwrap();
        for (i, o) in [(f1, out.f1), (f2, out.f2)] {
            let want = tape.value(i).map(|x| 2.0 * x);
            assert!(tape.value(o).max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn parameter_names_carry_branch_paths() {
        let mut store = ParamStore::<f32>::new();
        DuSfeWeights::register(&mut store, "stream.level1", 2, &mut rng_from(0)).unwrap();
        assert!(store.id("stream.level1.dusfe.csfe.w_fuse").is_some());
        assert!(store.id("stream.level1.dusfe.ssfe.k_out2").is_some());
        assert!(store.iter().all(|p| p.name.starts_with("stream.level1.dusfe.")));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let w = DuSfeWeights::register(&mut store, "t", 2, &mut rng_from(1)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f1 = tape.constant(Tensor::zeros(vec![1, 3, 2, 2, 2]).unwrap());
        let f2 = tape.constant(Tensor::zeros(vec![1, 3, 2, 2, 2]).unwrap());
        assert!(csfe(&mut tape, &bound, &w, FeaturePair { f1, f2 }).is_err());
    }
}
