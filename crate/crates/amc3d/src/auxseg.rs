//! Auxiliary dense supervision: pseudo-3D token volumes from patch tokens,
//! a lightweight 3D decoder to voxel logits, and the Dice+CE objective.

use std::collections::BTreeMap;

use crate::backbone::BackboneConfig;
use crate::rng::AmcRng;
use crate::tensor::graph::{Graph, VarId};
use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

pub const DICE_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Stack per-slice patch-token grids into a d×(H/P)×(W/P)×S volume.
/// Slice order is preserved along the last axis.
pub fn assemble_token_volume<T: Scalar>(
    g: &mut Graph<T>,
    patch_tokens: VarId,
    grid: (usize, usize),
) -> Result<VarId> {
    let shape = g.value(patch_tokens).shape().to_vec();
    let (gh, gw) = grid;
    if shape.len() != 3 || shape[1] != gh * gw {
        return Err(AmcError::Contract(format!(
            "patch tokens must be S×N×d with N={}, got {shape:?}",
            gh * gw
        )));
    }
    let (s, d) = (shape[0], shape[2]);
    let x = g.reshape(patch_tokens, vec![s, gh, gw, d])?;
    g.permute(x, vec![3, 1, 2, 0])
}

/// Decoder layout: 1×1×1 projection to `base_width`, then stages of
/// {trilinear upsample → 3×3×3 conv → instance norm → leaky-ReLU 0.01} with
/// widths halving, then a 1×1×1 conv to `k_seg` classes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegDecoderConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub k_seg: usize,
    /// Per-stage upsample factors (H, W, S axes).
    pub stages: Vec<[usize; 3]>,
}

impl SegDecoderConfig {
    /// Stages that map the token grid back to full resolution: log2(P)
    /// doublings along H and W, the slice axis untouched.
    pub fn for_backbone(config: &BackboneConfig, k_seg: usize, base_width: usize) -> Result<Self> {
        let p = config.patch_size;
        if !p.is_power_of_two() {
            return Err(AmcError::Contract(format!(
                "decoder needs a power-of-two patch size, got {p}"
            )));
        }
        if k_seg < 2 || base_width < 2 {
            return Err(AmcError::Contract(
                "decoder needs k_seg ≥ 2 and base width ≥ 2".into(),
            ));
        }
        let stages = (0..p.trailing_zeros()).map(|_| [2, 2, 1]).collect();
        Ok(SegDecoderConfig {
            in_channels: config.embed_dim,
            base_width,
            k_seg,
            stages,
        })
    }

    /// Channel width entering stage `i` (stage 0 sees `base_width`).
    pub fn stage_in(&self, i: usize) -> usize {
        (self.base_width >> i).max(2)
    }

    pub fn stage_out(&self, i: usize) -> usize {
        (self.base_width >> (i + 1)).max(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stages.is_empty() {
            return Err(AmcError::Contract("decoder needs channels and ≥1 stage".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDecoder<T: Scalar> {
    pub config: SegDecoderConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

fn decoder_shapes(config: &SegDecoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("proj.w".to_string(), vec![config.base_width, config.in_channels, 1, 1, 1]),
        ("proj.b".to_string(), vec![config.base_width]),
    ];
    for i in 0..config.stages.len() {
        let (ci, co) = (config.stage_in(i), config.stage_out(i));
        out.push((format!("stage{i}.conv.w"), vec![co, ci, 3, 3, 3]));
        out.push((format!("stage{i}.conv.b"), vec![co]));
        out.push((format!("stage{i}.norm.g"), vec![co]));
        out.push((format!("stage{i}.norm.b"), vec![co]));
    }
    let last = config.stage_out(config.stages.len() - 1);
    out.push(("final.w".to_string(), vec![config.k_seg, last, 1, 1, 1]));
    out.push(("final.b".to_string(), vec![config.k_seg]));
    out
}

pub fn init_decoder<T: Scalar>(config: &SegDecoderConfig, seed: u64) -> Result<SegDecoder<T>> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in decoder_shapes(config) {
        let t = if name.ends_with(".b") || name.ends_with("norm.b") {
            Tensor::zeros(shape)
        } else if name.ends_with("norm.g") {
            Tensor::full(shape, T::one())
        } else {
            // fan-in-scaled normal keeps activations in range through stages
            let fan_in: usize = shape[1..].iter().product();
            AmcRng::split(seed, &format!("decoder/{name}"))
                .normal_tensor(shape, (2.0 / fan_in as f64).sqrt())
        };
        tensors.insert(name, t);
    }
    Ok(SegDecoder {
        config: config.clone(),
        tensors,
    })
}

impl<T: Scalar> SegDecoder<T> {
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundDecoder {
        BoundDecoder {
            config: self.config.clone(),
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundDecoder {
    pub config: SegDecoderConfig,
    pub vars: BTreeMap<String, VarId>,
}

impl BoundDecoder {
    fn get(&self, name: &str) -> VarId {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing decoder var {name}"))
    }
}

/// Decode a d×gh×gw×S token volume to K_seg×H×W×S voxel logits.
pub fn decode_voxels<T: Scalar>(g: &mut Graph<T>, f: VarId, decoder: &BoundDecoder) -> Result<VarId> {
    let shape = g.value(f).shape().to_vec();
    if shape.len() != 4 || shape[0] != decoder.config.in_channels {
        return Err(AmcError::Contract(format!(
            "token volume shape {shape:?} does not match decoder input channels {}",
            decoder.config.in_channels
        )));
    }
    let mut x = g.conv3d(f, decoder.get("proj.w"), decoder.get("proj.b"))?;
    for (i, factors) in decoder.config.stages.iter().enumerate() {
        x = g.trilinear_upsample(x, *factors)?;
        x = g.conv3d(x, decoder.get(&format!("stage{i}.conv.w")), decoder.get(&format!("stage{i}.conv.b")))?;
        x = g.instance_norm3(
            x,
            decoder.get(&format!("stage{i}.norm.g")),
            decoder.get(&format!("stage{i}.norm.b")),
        )?;
        x = g.leaky_relu(x, LEAKY_SLOPE)?;
    }
    g.conv3d(x, decoder.get("final.w"), decoder.get("final.b"))
}

/// Scalar components of the segmentation objective.
#[derive(Debug, Clone, Copy)]
pub struct SegLossParts {
    /// dice + ce
    pub total: VarId,
    /// 1 − mean per-class soft Dice coefficient.
    pub dice: VarId,
    /// Voxel-mean cross-entropy.
    pub ce: VarId,
}

/// Soft Dice (smoothing ε, averaged over classes) plus voxel-mean CE against
/// integer labels.
pub fn seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: VarId,
    labels: &[i32],
    k_seg: usize,
) -> Result<SegLossParts> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 4 || shape[0] != k_seg {
        return Err(AmcError::Contract(format!(
            "voxel logits must be {k_seg}×H×W×S, got {shape:?}"
        )));
    }
    let nvox: usize = shape[1..].iter().product();
    if labels.len() != nvox {
        return Err(AmcError::Contract(format!(
            "mask has {} labels for {nvox} voxels",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l < 0 || l as usize >= k_seg) {
        return Err(AmcError::Contract(format!("mask labels must lie in [0, {k_seg})")));
    }
    let flat = g.reshape(logits, vec![k_seg, nvox])?;
    let p = g.softmax(flat, 0)?;
    let logp = g.log_softmax(flat, 0)?;

    // one-hot targets as a constant
    let mut onehot = vec![T::zero(); k_seg * nvox];
    for (v, &l) in labels.iter().enumerate() {
        onehot[l as usize * nvox + v] = T::one();
    }
    let y = g.constant(Tensor::new(vec![k_seg, nvox], onehot)?);

    // CE = −(1/Nvox)·Σ y⊙log p
    let picked = g.mul(y, logp)?;
    let ce_sum = g.sum_all(picked)?;
    let ce = g.scale(ce_sum, -1.0 / nvox as f64)?;

    // soft Dice per class, averaged
    let mut dice_acc: Option<VarId> = None;
    for c in 0..k_seg {
        let pc = g.slice(p, 0, c, 1)?;
        let yc = g.slice(y, 0, c, 1)?;
        let prod = g.mul(pc, yc)?;
        let inter = g.sum_all(prod)?;
        let psum = g.sum_all(pc)?;
        let ysum = g.sum_all(yc)?;
        let num = g.scale(inter, 2.0)?;
        let num = add_const(g, num, DICE_EPS)?;
        let den = g.add(psum, ysum)?;
        let den = add_const(g, den, DICE_EPS)?;
        let inv = g.pow(den, -1.0)?;
        let coeff = g.mul(num, inv)?;
        dice_acc = Some(match dice_acc {
            None => coeff,
            Some(acc) => g.add(acc, coeff)?,
        });
    }
    let mean_dice = g.scale(dice_acc.expect("k_seg ≥ 1"), 1.0 / k_seg as f64)?;
    let neg = g.scale(mean_dice, -1.0)?;
    let dice = add_const(g, neg, 1.0)?;
    let total = g.add(dice, ce)?;
    Ok(SegLossParts { total, dice, ce })
}

fn add_const<T: Scalar>(g: &mut Graph<T>, x: VarId, c: f64) -> Result<VarId> {
    let shape = g.value(x).shape().to_vec();
    let k = g.constant(Tensor::full(shape, T::from_f64(c)));
    g.add(x, k)
}

/// L_total = L_cls + λ_seg · mean of the supervised subset's seg losses.
/// With no masks or λ_seg = 0 this is exactly L_cls (same graph node).
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    cls_loss: VarId,
    seg_losses: &[VarId],
    lambda_seg: f64,
) -> Result<VarId> {
    if lambda_seg < 0.0 {
        return Err(AmcError::Contract(format!("lambda_seg must be ≥ 0, got {lambda_seg}")));
    }
    if seg_losses.is_empty() || lambda_seg == 0.0 {
        return Ok(cls_loss);
    }
    let mut acc = seg_losses[0];
    for &l in &seg_losses[1..] {
        acc = g.add(acc, l)?;
    }
    let scaled = g.scale(acc, lambda_seg / seg_losses.len() as f64)?;
    g.add(cls_loss, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fdcheck::finite_difference_check;

    fn tiny_decoder_config() -> SegDecoderConfig {
        SegDecoderConfig {
            in_channels: 4,
            base_width: 4,
            k_seg: 2,
            stages: vec![[2, 2, 1], [2, 2, 1]],
        }
    }

    #[test]
    fn assemble_shape_arithmetic() {
        // H=W=64, P=16, S=8, d=32 → F is 32×4×4×8
        let mut g = Graph::<f32>::new();
        let pt = g.constant(Tensor::zeros(vec![8, 16, 32]));
        let f = assemble_token_volume(&mut g, pt, (4, 4)).unwrap();
        assert_eq!(g.value(f).shape(), &[32, 4, 4, 8]);
    }

    #[test]
    fn assemble_round_trip_recovers_patch_tokens() {
        let mut rng = AmcRng::split(2, "asm");
        let pt = rng.normal_tensor::<f64>(vec![3, 6, 5], 1.0);
        let mut g = Graph::new();
        let ptv = g.constant(pt.clone());
        let f = assemble_token_volume(&mut g, ptv, (2, 3)).unwrap();
        let back = g.permute(f, vec![3, 1, 2, 0]).unwrap();
        let back = g.reshape(back, vec![3, 6, 5]).unwrap();
        assert_eq!(g.value(back), &pt);
    }

    #[test]
    fn assemble_is_slice_covariant() {
        let mut rng = AmcRng::split(3, "cov");
        let pt = rng.normal_tensor::<f64>(vec![2, 4, 3], 1.0);
        // swap the two slices
        let mut swapped_data = pt.data().to_vec();
        swapped_data.rotate_left(4 * 3);
        let swapped = Tensor::new(vec![2, 4, 3], swapped_data).unwrap();
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let f = assemble_token_volume(&mut g, v, (2, 2)).unwrap();
            g.value(f).clone()
        };
        let (fa, fb) = (run(&pt), run(&swapped));
        // fa[..,..,..,0] == fb[..,..,..,1] and vice versa
        for i in 0..fa.numel() / 2 {
            assert_eq!(fa.data()[2 * i], fb.data()[2 * i + 1]);
            assert_eq!(fa.data()[2 * i + 1], fb.data()[2 * i]);
        }
    }

    #[test]
    fn decoder_output_shape() {
        let cfg = tiny_decoder_config();
        let dec = init_decoder::<f32>(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let f = g.constant(AmcRng::split(1, "f").normal_tensor(vec![4, 2, 2, 3], 1.0));
        let bound = dec.bind(&mut g, false);
        let out = decode_voxels(&mut g, f, &bound).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 8, 8, 3]);
    }

    #[test]
    fn zero_input_zero_final_conv_yields_bias_logits() {
        let cfg = tiny_decoder_config();
        let mut dec = init_decoder::<f64>(&cfg, 5).unwrap();
        dec.tensors.insert("final.w".into(), Tensor::zeros(vec![2, 2, 1, 1, 1]));
        dec.tensors.insert(
            "final.b".into(),
            Tensor::from_f64_slice(vec![2], &[0.3, -0.2]).unwrap(),
        );
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(vec![4, 2, 2, 3]));
        let bound = dec.bind(&mut g, false);
        let out = decode_voxels(&mut g, f, &bound).unwrap();
        let v = g.value(out);
        let n = 8 * 8 * 3;
        assert!(v.data()[..n].iter().all(|&x| x == 0.3));
        assert!(v.data()[n..].iter().all(|&x| x == -0.2));
    }

    #[test]
    fn fd_decoder_gradient_wrt_patch_tokens() {
        let cfg = SegDecoderConfig {
            in_channels: 3,
            base_width: 4,
            k_seg: 2,
            stages: vec![[2, 2, 1]],
        };
        let dec = init_decoder::<f64>(&cfg, 9).unwrap();
        let f = |g: &mut Graph<f64>, pt: VarId| -> crate::Result<VarId> {
            let fvol = assemble_token_volume(g, pt, (2, 2))?;
            let bound = dec.bind(g, false);
            let out = decode_voxels(g, fvol, &bound)?;
            let sq = g.mul(out, out)?;
            g.mean_all(sq)
        };
        let point = AmcRng::split(10, "pt").normal_tensor::<f64>(vec![2, 4, 3], 0.5);
        let report = finite_difference_check(&f, &point, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "rel err {}", report.max_rel_error);
    }

    #[test]
    fn seg_loss_perfect_prediction_is_near_zero() {
        let labels = vec![0, 1, 1, 0];
        let mut logits = vec![0.0f64; 2 * 4];
        for (v, &l) in labels.iter().enumerate() {
            logits[l as usize * 4 + v] = 30.0;
            logits[(1 - l as usize) * 4 + v] = -30.0;
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2, 1, 2, 2], logits).unwrap());
        let parts = seg_loss(&mut g, z, &labels, 2).unwrap();
        assert!(g.value(parts.total).item().unwrap() < 1e-4);
    }

    #[test]
    fn dice_half_overlap_is_half() {
        // 8 voxels; true foreground 0..4, predicted foreground 2..6 (hard)
        let labels = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let mut logits = vec![0.0f64; 16];
        for v in 0..8 {
            let pred_fg = (2..6).contains(&v);
            logits[8 + v] = if pred_fg { 40.0 } else { -40.0 };
            logits[v] = if pred_fg { -40.0 } else { 40.0 };
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2, 1, 2, 4], logits).unwrap());
        let parts = seg_loss(&mut g, z, &labels, 2).unwrap();
        // both classes have |pred|=|true|=4 with overlap 2 → Dice 0.5 each
        assert!((g.value(parts.dice).item().unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn uniform_prediction_ce_is_ln2() {
        let labels = vec![0, 1, 0, 1];
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(vec![2, 1, 1, 4]));
        let parts = seg_loss(&mut g, z, &labels, 2).unwrap();
        assert!((g.value(parts.ce).item().unwrap() - (2.0f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn invalid_labels_rejected() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(vec![2, 1, 1, 2]));
        assert!(seg_loss(&mut g, z, &[0, 5], 2).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::<f64>::new();
        let cls = g.constant(Tensor::scalar(1.0));
        let s1 = g.constant(Tensor::scalar(0.2));
        let s2 = g.constant(Tensor::scalar(0.4));
        // λ=0 → exactly the classification node
        assert_eq!(total_loss(&mut g, cls, &[s1, s2], 0.0).unwrap(), cls);
        assert_eq!(total_loss(&mut g, cls, &[], 1.0).unwrap(), cls);
        let t = total_loss(&mut g, cls, &[s1, s2], 1.0).unwrap();
        assert!((g.value(t).item().unwrap() - 1.3).abs() < 1e-12);
    }
}
