//! Label-preserving training augmentation: per-axis flips, Gaussian noise,
//! gamma correction, brightness scaling. Geometric transforms are applied
//! identically to the paired mask.

use crate::io::volume::{MaskVolume, Volume};
use crate::rng::AmcRng;
use crate::tensor::Scalar;
use crate::{AmcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub flip_p: f64,
    pub noise_p: f64,
    pub noise_std: f64,
    pub gamma_p: f64,
    pub gamma_range: (f64, f64),
    pub brightness_p: f64,
    pub brightness_range: (f64, f64),
    /// Accepted in configuration but not implemented; must stay 0.
    pub rotation_p: f64,
    pub zoom_p: f64,
    pub contrast_p: f64,
    pub low_res_p: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_p: 0.5,
            noise_p: 0.25,
            noise_std: 0.03,
            gamma_p: 0.2,
            gamma_range: (0.7, 1.5),
            brightness_p: 0.15,
            brightness_range: (0.75, 1.25),
            rotation_p: 0.0,
            zoom_p: 0.0,
            contrast_p: 0.0,
            low_res_p: 0.0,
        }
    }
}

impl AugmentPolicy {
    pub fn off() -> Self {
        AugmentPolicy {
            flip_p: 0.0,
            noise_p: 0.0,
            gamma_p: 0.0,
            brightness_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.flip_p, self.noise_p, self.gamma_p, self.brightness_p] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AmcError::Contract(format!("augmentation probability {p} outside [0,1]")));
            }
        }
        for p in [self.rotation_p, self.zoom_p, self.contrast_p, self.low_res_p] {
            if p != 0.0 {
                return Err(AmcError::Contract(
                    "rotation/zoom/contrast/low-res augmentation is configured but not implemented".into(),
                ));
            }
        }
        Ok(())
    }
}

fn flip_axis<V: Copy>(data: &mut [V], shape: [usize; 3], axis: usize) {
    let [h, w, s] = shape;
    let idx = |ih: usize, iw: usize, is: usize| (ih * w + iw) * s + is;
    match axis {
        0 => {
            for ih in 0..h / 2 {
                for iw in 0..w {
                    for is in 0..s {
                        data.swap(idx(ih, iw, is), idx(h - 1 - ih, iw, is));
                    }
                }
            }
        }
        1 => {
            for ih in 0..h {
                for iw in 0..w / 2 {
                    for is in 0..s {
                        data.swap(idx(ih, iw, is), idx(ih, w - 1 - iw, is));
                    }
                }
            }
        }
        _ => {
            for ih in 0..h {
                for iw in 0..w {
                    for is in 0..s / 2 {
                        data.swap(idx(ih, iw, is), idx(ih, iw, s - 1 - is));
                    }
                }
            }
        }
    }
}

/// Augment a single-channel volume (and its mask, if present) in place-free
/// style: returns new values, label alignment preserved.
pub fn augment_volume<T: Scalar>(
    volume: &Volume<T>,
    mask: Option<&MaskVolume>,
    policy: &AugmentPolicy,
    rng: &mut AmcRng,
) -> Result<(Volume<T>, Option<MaskVolume>)> {
    policy.validate()?;
    if volume.channels() != 1 {
        return Err(AmcError::Contract("augmentation expects a single-channel volume".into()));
    }
    let mut vol = volume.clone();
    let mut msk = mask.cloned();
    let shape = vol.spatial();

    for axis in 0..3 {
        if rng.bernoulli(policy.flip_p) {
            flip_axis(vol.data.data_mut(), shape, axis);
            if let Some(m) = &mut msk {
                flip_axis(&mut m.labels, shape, axis);
            }
        }
    }
    if rng.bernoulli(policy.noise_p) {
        for v in vol.data.data_mut() {
            *v = T::from_f64(v.to_f64() + rng.normal() * policy.noise_std);
        }
    }
    if rng.bernoulli(policy.gamma_p) {
        let gamma = rng.uniform(policy.gamma_range.0, policy.gamma_range.1);
        for v in vol.data.data_mut() {
            *v = T::from_f64(v.to_f64().max(0.0).powf(gamma));
        }
    }
    if rng.bernoulli(policy.brightness_p) {
        let factor = rng.uniform(policy.brightness_range.0, policy.brightness_range.1);
        for v in vol.data.data_mut() {
            *v = T::from_f64(v.to_f64() * factor);
        }
    }
    Ok((vol, msk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy() -> (Volume<f32>, MaskVolume) {
        let data: Vec<f32> = (0..24).map(|i| i as f32 / 24.0).collect();
        let vol = Volume::new(Tensor::new(vec![1, 2, 3, 4], data).unwrap(), [1.0; 3], "CECT").unwrap();
        let labels: Vec<i32> = (0..24).map(|i| (i % 5 == 0) as i32).collect();
        let mask = MaskVolume::new([2, 3, 4], labels, [1.0; 3]).unwrap();
        (vol, mask)
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let (vol, mask) = toy();
        let mut rng = AmcRng::split(1, "aug");
        let (v2, m2) = augment_volume(&vol, Some(&mask), &AugmentPolicy::off(), &mut rng).unwrap();
        assert_eq!(v2, vol);
        assert_eq!(m2.unwrap(), mask);
    }

    #[test]
    fn double_flip_is_identity() {
        let (vol, _) = toy();
        let mut d = vol.data.data().to_vec();
        for axis in 0..3 {
            flip_axis(&mut d, vol.spatial(), axis);
            flip_axis(&mut d, vol.spatial(), axis);
            assert_eq!(d, vol.data.data());
        }
    }

    #[test]
    fn flips_keep_voxelwise_alignment() {
        let (vol, mask) = toy();
        // voxel value uniquely identifies position; count overlap of
        // (value > t) with mask before and after
        let policy = AugmentPolicy {
            flip_p: 1.0,
            noise_p: 0.0,
            gamma_p: 0.0,
            brightness_p: 0.0,
            ..Default::default()
        };
        let mut rng = AmcRng::split(2, "aug");
        let (v2, m2) = augment_volume(&vol, Some(&mask), &policy, &mut rng).unwrap();
        let m2 = m2.unwrap();
        let overlap = |v: &Volume<f32>, m: &MaskVolume| {
            v.data
                .data()
                .iter()
                .zip(&m.labels)
                .filter(|(&x, &l)| l == 1 && x > 0.4)
                .count()
        };
        assert_eq!(overlap(&vol, &mask), overlap(&v2, &m2));
        // and each masked voxel still carries its original value set
        let vals = |v: &Volume<f32>, m: &MaskVolume| {
            let mut xs: Vec<f32> = v
                .data
                .data()
                .iter()
                .zip(&m.labels)
                .filter(|(_, &l)| l == 1)
                .map(|(&x, _)| x)
                .collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs
        };
        assert_eq!(vals(&vol, &mask), vals(&v2, &m2));
    }

    #[test]
    fn stubbed_transforms_rejected_when_enabled() {
        let (vol, _) = toy();
        let policy = AugmentPolicy {
            rotation_p: 0.5,
            ..Default::default()
        };
        let mut rng = AmcRng::split(3, "aug");
        assert!(augment_volume(&vol, None, &policy, &mut rng).is_err());
    }
}
