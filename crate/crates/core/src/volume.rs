//! Volume file format: magic "MRVL", version, three u32 dims, then f32
//! little-endian voxels in row-major order.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"MRVL";
const VERSION: u32 = 1;

/// Cap on voxels accepted by the reader; rejects absurd headers before
/// allocating.
const MAX_VOXELS: u64 = 1 << 28;

/// A 3D scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("not a volume file: bad magic")]
    BadMagic,
    #[error("unsupported volume file version {0}")]
    BadVersion(u32),
    #[error("volume file truncated or dims inconsistent with payload")]
    Truncated,
    #[error("volume dims out of range")]
    BadDims,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), voxels.len());
        Self { dims, voxels }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Standardize to zero mean, unit variance in place. A constant volume
    /// becomes all zeros.
    pub fn standardize(&mut self) {
        let n = self.voxels.len() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .voxels
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        if sd == 0.0 {
            self.voxels.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for v in &mut self.voxels {
                *v = ((*v as f64 - mean) / sd) as f32;
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.voxels.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, VolumeError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(VolumeError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(VolumeError::BadVersion(version));
        }
        if bytes.len() < 20 {
            return Err(VolumeError::Truncated);
        }
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let at = 8 + i * 4;
            *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        }
        let count = dims.iter().map(|&d| d as u64).product::<u64>();
        if count == 0 || count > MAX_VOXELS {
            return Err(VolumeError::BadDims);
        }
        let payload = &bytes[20..];
        if payload.len() as u64 != count * 4 {
            return Err(VolumeError::Truncated);
        }
        let voxels = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            dims,
            voxels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VolumeError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let v = Volume::new([2, 3, 4], (0..24).map(|i| i as f32 * 0.5 - 3.0).collect());
        assert_eq!(Volume::decode(&v.encode()).unwrap(), v);
    }

    #[test]
    fn reject_garbage() {
        assert!(matches!(Volume::decode(b"nope"), Err(VolumeError::BadMagic)));
        let mut good = Volume::new([1, 1, 2], vec![1.0, 2.0]).encode();
        good.pop();
        assert!(matches!(Volume::decode(&good), Err(VolumeError::Truncated)));
        // dims that would overflow the payload
        let mut huge = Vec::new();
        huge.extend_from_slice(b"MRVL");
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Volume::decode(&huge), Err(VolumeError::BadDims)));
    }

    #[test]
    fn standardize_zero_mean_unit_var() {
        let mut v = Volume::new([1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        v.standardize();
        let mean: f32 = v.voxels.iter().sum::<f32>() / 4.0;
        let var: f32 = v.voxels.iter().map(|x| x * x).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);

        let mut c = Volume::new([1, 1, 3], vec![7.0, 7.0, 7.0]);
        c.standardize();
        assert_eq!(c.voxels, vec![0.0, 0.0, 0.0]);
    }
}
