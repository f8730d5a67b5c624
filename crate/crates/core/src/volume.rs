//! Scalar 3-D volumes and the VOLR file format.
//!
//! A VOLR file is one UTF-8 JSON header line followed by the raw
//! little-endian `f32` payload in x-fastest order:
//!
//! ```text
//! {"magic":"VOLR1","dims":[nx,ny,nz],"spacing_mm":[sx,sy,sz],"modality":"mu_map","dtype":"f32le","order":"x-fastest"}\n<payload>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CoreError, Result};

pub const DEFAULT_SPACING_MM: f64 = 6.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Linear attenuation coefficients in cm⁻¹.
    MuMap,
    /// Emission counts, mean-normalized.
    Spect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    modality: Modality,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct VolrHeader {
    magic: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    modality: Modality,
    dtype: String,
    order: String,
}

impl Volume {
    /// Validates length, finiteness and non-negativity.
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        modality: Modality,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::Volume(format!("zero extent in {dims:?}")));
        }
        if spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(CoreError::Volume(format!("bad spacing {spacing_mm:?}")));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(CoreError::Volume(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Volume(format!(
                "voxel {i} holds {}, values must be finite and non-negative",
                data[i]
            )));
        }
        Ok(Self {
            dims,
            spacing_mm,
            modality,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing_mm: [f64; 3], modality: Modality) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing_mm, modality, vec![0.0; n])
    }

    pub(crate) fn from_parts(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        modality: Modality,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            spacing_mm,
            modality,
            data,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing_mm == other.spacing_mm
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = VolrHeader {
            magic: "VOLR1".into(),
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            modality: self.modality,
            dtype: "f32le".into(),
            order: "x-fastest".into(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CoreError::Format("VOLR header line is not terminated".into()))?;
        let header: VolrHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.magic != "VOLR1" || header.dtype != "f32le" || header.order != "x-fastest" {
            return Err(CoreError::Format(format!(
                "unsupported VOLR header {} / {} / {}",
                header.magic, header.dtype, header.order
            )));
        }
        let payload = &bytes[nl + 1..];
        let n: usize = header.dims.iter().product();
        if payload.len() != n * 4 {
            return Err(CoreError::Format(format!(
                "payload has {} bytes, dims {:?} need {}",
                payload.len(),
                header.dims,
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header.dims, header.spacing_mm, header.modality, data)
    }

    pub fn write_volr(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_volr(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the VOLR encoding, hex encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volr_round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin().abs() + 1e-38).collect();
        let v = Volume::new([3, 4, 5], [6.8, 6.8, 5.0], Modality::Spect, data).unwrap();
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing_mm(), v.spacing_mm());
        assert_eq!(back.modality(), Modality::Spect);
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn header_is_one_json_line() {
        let v = Volume::zeros([2, 2, 2], [6.8; 3], Modality::MuMap).unwrap();
        let bytes = v.to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["magic"], "VOLR1");
        assert_eq!(header["modality"], "mu_map");
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["order"], "x-fastest");
        assert_eq!(bytes.len(), nl + 1 + 32);
    }

    #[test]
    fn rejects_truncated_payload() {
        let v = Volume::zeros([2, 2, 2], [6.8; 3], Modality::MuMap).unwrap();
        let bytes = v.to_bytes();
        assert!(Volume::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_negative_values() {
        assert!(Volume::new([1, 1, 2], [1.0; 3], Modality::MuMap, vec![0.0, -1.0]).is_err());
    }
}
