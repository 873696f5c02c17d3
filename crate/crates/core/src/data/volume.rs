//! AVOL volume files and the per-dataset annotation index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Box3D;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"AVOL1\n";
const HEADER: usize = 6 + 3 * 4 + 3 * 4 + 1;

/// Scalar volume held depth-last (`[X, Y, Z]`, z fastest) like the network
/// inputs; files store x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Tensor,
    /// `(r_x, r_y, r_z)` in mm.
    pub spacing: [f32; 3],
    /// Binary label mask in the voxel layout.
    pub mask: Option<Vec<u8>>,
}

fn index(d: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * d[1] + y) * d[2] + z
}

impl Volume {
    pub fn new(voxels: Tensor, spacing: [f32; 3], mask: Option<Vec<u8>>) -> Result<Self> {
        if voxels.rank() != 3 || voxels.is_empty() {
            return Err(Error::Data(format!("volume must be a non-empty X×Y×Z grid, got {:?}", voxels.shape())));
        }
        if let Some(m) = &mask {
            if m.len() != voxels.len() {
                return Err(Error::Data(format!("mask has {} voxels, volume {}", m.len(), voxels.len())));
            }
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Volume { voxels, spacing, mask })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    /// `(1, 1, X, Y, Z)` network input.
    pub fn as_input(&self) -> Tensor {
        let mut s = vec![1, 1];
        s.extend(self.voxels.shape());
        self.voxels.clone().reshape(s).expect("same length")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims();
        let n = self.voxels.len();
        let mut out = Vec::with_capacity(HEADER + n * 5);
        out.extend_from_slice(MAGIC);
        for v in d {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for r in self.spacing {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.push(self.mask.is_some() as u8);
        let v = self.voxels.data();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    out.extend_from_slice(&v[index(d, x, y, z)].to_le_bytes());
                }
            }
        }
        if let Some(m) = &self.mask {
            for z in 0..d[2] {
                for y in 0..d[1] {
                    for x in 0..d[0] {
                        out.push(m[index(d, x, y, z)]);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes.len() < HEADER {
            return Err(Error::Format("truncated header".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        let f = |i: usize| f32::from_le_bytes(bytes[18 + 4 * i..22 + 4 * i].try_into().unwrap());
        let d = [u(0), u(1), u(2)];
        let spacing = [f(0), f(1), f(2)];
        let has_mask = match bytes[HEADER - 1] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad mask flag {b}"))),
        };
        let n = d.iter().product::<usize>();
        let want = HEADER + n * 4 + if has_mask { n } else { 0 };
        if bytes.len() != want {
            return Err(Error::Format(format!("expected {want} bytes for {d:?}, got {}", bytes.len())));
        }
        let body = &bytes[HEADER..];
        let mut vox = vec![0.0f32; n];
        let mut mask = has_mask.then(|| vec![0u8; n]);
        let mut i = 0;
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let j = index(d, x, y, z);
                    vox[j] = f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap());
                    if let Some(m) = mask.as_mut() {
                        m[j] = body[4 * n + i];
                    }
                    i += 1;
                }
            }
        }
        Volume::new(Tensor::from_vec(d.to_vec(), vox)?, spacing, mask)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Clamps to `range` if given, then scales to zero mean and unit variance.
    pub fn normalized(&self, range: Option<[f32; 2]>) -> Volume {
        let v = match range {
            Some([lo, hi]) => self.voxels.map(|x| x.clamp(lo, hi)),
            None => self.voxels.clone(),
        };
        let n = v.len() as f64;
        let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        Volume {
            voxels: v.map(|x| ((x as f64 - mean) * inv) as f32),
            spacing: self.spacing,
            mask: self.mask.clone(),
        }
    }
}

/// One row of the annotation index; `volume` is the file name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub volume: String,
    pub center: [f64; 3],
    pub extent: [f64; 3],
}

impl Annotation {
    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new(self.center, self.extent)
    }
}

pub fn write_annotations(path: impl AsRef<Path>, rows: &[Annotation]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad annotation index: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let d = [3, 2, 4];
        let vals = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let mask = (0..24).map(|i| (i % 3 == 0) as u8).collect();
        Volume::new(Tensor::from_vec(d.to_vec(), vals).unwrap(), [0.5, 0.5, 4.0], Some(mask)).unwrap()
    }

    #[test]
    fn round_trip() {
        let v = sample();
        assert_eq!(Volume::from_bytes(&v.to_bytes()).unwrap(), v);
        let mut nm = v.clone();
        nm.mask = None;
        assert_eq!(Volume::from_bytes(&nm.to_bytes()).unwrap(), nm);
    }

    #[test]
    fn file_is_x_fastest() {
        let v = sample();
        let b = v.to_bytes();
        let second = f32::from_le_bytes(b[HEADER + 4..HEADER + 8].try_into().unwrap());
        assert_eq!(second, v.voxels.at(&[1, 0, 0]));
    }

    #[test]
    fn corrupt_files() {
        let mut b = sample().to_bytes();
        assert!(Volume::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Volume::from_bytes(&b).unwrap_err().to_string().contains("bad magic"));
    }
}
