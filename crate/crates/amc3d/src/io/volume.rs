//! Volume container and intensity-normalization policies.
//!
//! File format "AMCV", little-endian: magic, version u32, dtype tag u8
//! (0 = f32 image, 2 = i32 mask), C/H/W/S as u64, spacing as 3×f64,
//! modality string (u16 length + UTF-8), normalization tag string, raw data.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"AMCV";
pub const VOLUME_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I32: u8 = 2;

/// Intensity normalization applied at read time, recorded on the record so a
/// second application is refused.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NormPolicy {
    /// Linear map [lo, hi] → [0, 1], clamped.
    Window { lo: f64, hi: f64 },
    /// Subtract mean, divide by standard deviation.
    ZScore,
    /// Clip to [0.5th, 99.5th] percentiles, then map to [0, 1].
    PercentileClip,
}

impl NormPolicy {
    pub fn tag(&self) -> String {
        match self {
            NormPolicy::Window { lo, hi } => {
                let mut s = String::from("window(");
                let _ = write!(s, "{lo},{hi})");
                s
            }
            NormPolicy::ZScore => "z-score".to_string(),
            NormPolicy::PercentileClip => "percentile-clip(0.5,99.5)".to_string(),
        }
    }
}

/// A single-channel-or-more volume with C×H×W×S data.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Scalar> {
    pub data: Tensor<T>,
    /// Voxel spacing in mm, per spatial axis (H, W, S).
    pub spacing: [f64; 3],
    pub modality: String,
    /// "none" or the tag of the policy already applied.
    pub normalization: String,
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Tensor<T>, spacing: [f64; 3], modality: &str) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(AmcError::Contract(format!(
                "volume data must be C×H×W×S, got {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(AmcError::Contract(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume {
            data,
            spacing,
            modality: modality.to_string(),
            normalization: "none".to_string(),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial extents (H, W, S).
    pub fn spatial(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Index (0=H, 1=W, 2=S) of the largest spatial extent; ties go to the
    /// later axis so a cubic volume slices along S.
    pub fn default_slice_axis(&self) -> usize {
        let sp = self.spatial();
        let mut best = 0;
        for axis in 1..3 {
            if sp[axis] >= sp[best] {
                best = axis;
            }
        }
        best
    }

    /// Apply a normalization policy once; a second application is refused.
    pub fn normalize(&mut self, policy: NormPolicy) -> Result<()> {
        if self.normalization != "none" {
            return Err(AmcError::Contract(format!(
                "volume already normalized with {}; refusing to re-normalize",
                self.normalization
            )));
        }
        match policy {
            NormPolicy::Window { lo, hi } => {
                if hi <= lo {
                    return Err(AmcError::Contract(format!("window needs hi > lo, got [{lo}, {hi}]")));
                }
                let span = hi - lo;
                for v in self.data.data_mut() {
                    let x = ((v.to_f64() - lo) / span).clamp(0.0, 1.0);
                    *v = T::from_f64(x);
                }
            }
            NormPolicy::ZScore => {
                let n = self.data.numel() as f64;
                let mean = self.data.data().iter().map(|v| v.to_f64()).sum::<f64>() / n;
                let var = self
                    .data
                    .data()
                    .iter()
                    .map(|v| (v.to_f64() - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let std = var.sqrt().max(1e-12);
                for v in self.data.data_mut() {
                    *v = T::from_f64((v.to_f64() - mean) / std);
                }
            }
            NormPolicy::PercentileClip => {
                let mut sorted: Vec<f64> = self.data.data().iter().map(|v| v.to_f64()).collect();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let pick = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
                let (lo, hi) = (pick(0.005), pick(0.995));
                let span = (hi - lo).max(1e-12);
                for v in self.data.data_mut() {
                    let x = ((v.to_f64() - lo) / span).clamp(0.0, 1.0);
                    *v = T::from_f64(x);
                }
            }
        }
        self.normalization = policy.tag();
        Ok(())
    }
}

/// Integer label volume (H×W×S) paired with image volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub shape: [usize; 3],
    pub labels: Vec<i32>,
    pub spacing: [f64; 3],
}

impl MaskVolume {
    pub fn new(shape: [usize; 3], labels: Vec<i32>, spacing: [f64; 3]) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(AmcError::Contract(format!(
                "mask has {} labels for shape {shape:?}",
                labels.len()
            )));
        }
        Ok(MaskVolume { shape, labels, spacing })
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u16::<LittleEndian>(s.len() as u16)?;
    w.write_all(s.as_bytes())
}

fn read_string<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| AmcError::Format {
        path: path.display().to_string(),
        detail: "string field is not UTF-8".to_string(),
    })
}

fn write_header<W: Write>(
    w: &mut W,
    dtype: u8,
    shape: &[u64; 4],
    spacing: &[f64; 3],
    modality: &str,
    normalization: &str,
) -> std::io::Result<()> {
    w.write_all(VOLUME_MAGIC)?;
    w.write_u32::<LittleEndian>(VOLUME_VERSION)?;
    w.write_u8(dtype)?;
    for &e in shape {
        w.write_u64::<LittleEndian>(e)?;
    }
    for &s in spacing {
        w.write_f64::<LittleEndian>(s)?;
    }
    write_string(w, modality)?;
    write_string(w, normalization)
}

struct Header {
    dtype: u8,
    shape: [usize; 4],
    spacing: [f64; 3],
    modality: String,
    normalization: String,
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VOLUME_MAGIC {
        return Err(AmcError::Format {
            path: path.display().to_string(),
            detail: format!("bad magic {magic:?}, expected AMCV"),
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VOLUME_VERSION {
        return Err(AmcError::Format {
            path: path.display().to_string(),
            detail: format!("unsupported volume format version {version}"),
        });
    }
    let dtype = r.read_u8()?;
    let mut shape = [0usize; 4];
    for e in &mut shape {
        *e = r.read_u64::<LittleEndian>()? as usize;
    }
    let mut spacing = [0.0f64; 3];
    for s in &mut spacing {
        *s = r.read_f64::<LittleEndian>()?;
    }
    let modality = read_string(r, path)?;
    let normalization = read_string(r, path)?;
    Ok(Header {
        dtype,
        shape,
        spacing,
        modality,
        normalization,
    })
}

pub fn write_volume<T: Scalar>(path: &Path, vol: &Volume<T>) -> Result<()> {
    let s = vol.data.shape();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        DTYPE_F32,
        &[s[0] as u64, s[1] as u64, s[2] as u64, s[3] as u64],
        &vol.spacing,
        &vol.modality,
        &vol.normalization,
    )?;
    for v in vol.data.data() {
        w.write_f32::<LittleEndian>(v.to_f64() as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, path)?;
    if h.dtype != DTYPE_F32 {
        return Err(AmcError::Format {
            path: path.display().to_string(),
            detail: format!("expected image dtype f32, found tag {}", h.dtype),
        });
    }
    let numel: usize = h.shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(T::from_f64(r.read_f32::<LittleEndian>()? as f64));
    }
    let mut vol = Volume::new(Tensor::new(h.shape.to_vec(), data)?, h.spacing, &h.modality)?;
    vol.normalization = h.normalization;
    Ok(vol)
}

pub fn write_mask(path: &Path, mask: &MaskVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        DTYPE_I32,
        &[1, mask.shape[0] as u64, mask.shape[1] as u64, mask.shape[2] as u64],
        &mask.spacing,
        "mask",
        "none",
    )?;
    for &v in &mask.labels {
        w.write_i32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, path)?;
    if h.dtype != DTYPE_I32 {
        return Err(AmcError::Format {
            path: path.display().to_string(),
            detail: format!("expected mask dtype i32, found tag {}", h.dtype),
        });
    }
    let numel: usize = h.shape.iter().product();
    let mut labels = Vec::with_capacity(numel);
    for _ in 0..numel {
        labels.push(r.read_i32::<LittleEndian>()?);
    }
    MaskVolume::new([h.shape[1], h.shape[2], h.shape[3]], labels, h.spacing)
}

/// Trilinear resize of a single-channel volume to target spatial extents,
/// using half-pixel-centered sampling with edge clamping.
pub fn resize_volume<T: Scalar>(vol: &Volume<T>, target: [usize; 3]) -> Result<Volume<T>> {
    if vol.channels() != 1 {
        return Err(AmcError::Contract(format!(
            "resize supports single-channel volumes, got C={}",
            vol.channels()
        )));
    }
    let src = vol.spatial();
    if target.iter().any(|&t| t == 0) {
        return Err(AmcError::Contract("resize target extents must be positive".into()));
    }
    let axis_samples = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let lo = x.floor() as usize;
                (lo, (lo + 1).min(n_in - 1), x - lo as f64)
            })
            .collect()
    };
    let hs = axis_samples(target[0], src[0]);
    let ws = axis_samples(target[1], src[1]);
    let ss = axis_samples(target[2], src[2]);
    let d = vol.data.data();
    let (sw, sd) = (src[1], src[2]);
    let at = |h: usize, w: usize, s: usize| d[(h * sw + w) * sd + s].to_f64();
    let mut out = Vec::with_capacity(target.iter().product());
    for &(h0, h1, fh) in &hs {
        for &(w0, w1, fw) in &ws {
            for &(s0, s1, fs) in &ss {
                let c00 = at(h0, w0, s0) * (1.0 - fs) + at(h0, w0, s1) * fs;
                let c01 = at(h0, w1, s0) * (1.0 - fs) + at(h0, w1, s1) * fs;
                let c10 = at(h1, w0, s0) * (1.0 - fs) + at(h1, w0, s1) * fs;
                let c11 = at(h1, w1, s0) * (1.0 - fs) + at(h1, w1, s1) * fs;
                let c0 = c00 * (1.0 - fw) + c01 * fw;
                let c1 = c10 * (1.0 - fw) + c11 * fw;
                out.push(T::from_f64(c0 * (1.0 - fh) + c1 * fh));
            }
        }
    }
    let spacing = [
        vol.spacing[0] * src[0] as f64 / target[0] as f64,
        vol.spacing[1] * src[1] as f64 / target[1] as f64,
        vol.spacing[2] * src[2] as f64 / target[2] as f64,
    ];
    let mut res = Volume::new(
        Tensor::new(vec![1, target[0], target[1], target[2]], out)?,
        spacing,
        &vol.modality,
    )?;
    res.normalization = vol.normalization.clone();
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_volume() -> Volume<f32> {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 10.0 - 50.0).collect();
        Volume::new(Tensor::new(vec![1, 2, 3, 4], data).unwrap(), [1.0, 1.0, 2.5], "CECT").unwrap()
    }

    #[test]
    fn round_trip_bit_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.amcv");
        let v = toy_volume();
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume::<f32>(&p).unwrap(), v);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.amcv");
        let m = MaskVolume::new([2, 2, 2], vec![0, 1, 1, 0, 0, 0, 1, 0], [1.0; 3]).unwrap();
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.amcv");
        std::fs::write(&p, b"NOPE0000000000000000000000000000").unwrap();
        assert!(matches!(read_volume::<f32>(&p), Err(AmcError::Format { .. })));
    }

    #[test]
    fn window_maps_endpoints_and_midpoint() {
        let mut v = Volume::new(
            Tensor::new(vec![1, 1, 1, 3], vec![-150.0f32, 50.0, 250.0]).unwrap(),
            [1.0; 3],
            "CECT",
        )
        .unwrap();
        v.normalize(NormPolicy::Window { lo: -150.0, hi: 250.0 }).unwrap();
        assert_eq!(v.data.data(), &[0.0, 0.5, 1.0]);
        // second application refused
        assert!(v.normalize(NormPolicy::ZScore).is_err());
    }

    #[test]
    fn z_score_yields_zero_mean_unit_std() {
        let mut v = toy_volume();
        v.normalize(NormPolicy::ZScore).unwrap();
        let n = v.data.numel() as f64;
        let mean: f64 = v.data.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 = v.data.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn percentile_clip_lands_in_unit_interval() {
        let mut v = toy_volume();
        v.normalize(NormPolicy::PercentileClip).unwrap();
        assert!(v.data.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn resize_preserves_constant_volumes() {
        let v = Volume::new(Tensor::full(vec![1, 4, 4, 4], 3.25f32), [1.0; 3], "CECT").unwrap();
        let r = resize_volume(&v, [8, 6, 2]).unwrap();
        assert_eq!(r.spatial(), [8, 6, 2]);
        assert!(r.data.data().iter().all(|&x| (x - 3.25).abs() < 1e-6));
    }

    #[test]
    fn default_axis_is_largest_extent() {
        let v = Volume::new(Tensor::<f32>::zeros(vec![1, 4, 9, 2]), [1.0; 3], "CECT").unwrap();
        assert_eq!(v.default_slice_axis(), 1);
    }
}
