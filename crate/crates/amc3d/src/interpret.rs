//! Voxel-aligned saliency: class-to-patch attention maps per slice, stacked
//! along the slicing axis weighted by slice importance, with attention-rollout
//! and gradient-weighted variants.

use crate::backbone::{self, BackboneWeights};
use crate::fusion::forward_views;
use crate::io::manifest::BoundingBox;
use crate::io::plugin::TaskPlugin;
use crate::io::volume::Volume;
use crate::tensor::graph::Graph;
use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapMode {
    LastLayer,
    Rollout,
    GradRollout,
    GradRolloutLast,
}

impl HeatmapMode {
    pub fn tag(self) -> &'static str {
        match self {
            HeatmapMode::LastLayer => "last-layer",
            HeatmapMode::Rollout => "rollout",
            HeatmapMode::GradRollout => "grad-rollout",
            HeatmapMode::GradRolloutLast => "grad-rollout-last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "last" | "last-layer" => HeatmapMode::LastLayer,
            "rollout" => HeatmapMode::Rollout,
            "grad-rollout" => HeatmapMode::GradRollout,
            "grad-rollout-last" => HeatmapMode::GradRolloutLast,
            other => {
                return Err(AmcError::Contract(format!("unknown heatmap mode '{other}'")));
            }
        })
    }

    fn needs_grad(self) -> bool {
        matches!(self, HeatmapMode::GradRollout | HeatmapMode::GradRolloutLast)
    }
}

/// Nonnegative saliency volume aligned with its source volume's voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap3D<T: Scalar> {
    /// H×W×S values, ≥ 0.
    pub values: Tensor<T>,
    /// true once rescaled so the maximum is 1 (all-zero maps are kept).
    pub normalized: bool,
    pub mode: HeatmapMode,
}

impl<T: Scalar> Heatmap3D<T> {
    pub fn max_normalized(mut self) -> Self {
        let max = self.values.data().iter().map(|v| v.to_f64()).fold(0.0, f64::max);
        if max > 0.0 {
            let inv = T::from_f64(1.0 / max);
            for v in self.values.data_mut() {
                *v = *v * inv;
            }
        }
        self.normalized = true;
        self
    }

    pub fn total_mass(&self) -> f64 {
        self.values.data().iter().map(|v| v.to_f64()).sum()
    }

    /// Mass inside an inclusive bounding box.
    pub fn mass_in(&self, bb: &BoundingBox) -> f64 {
        let s = self.values.shape();
        let (h, w, d) = (s[0], s[1], s[2]);
        let mut mass = 0.0;
        for ih in bb.min[0]..=bb.max[0].min(h - 1) {
            for iw in bb.min[1]..=bb.max[1].min(w - 1) {
                for is in bb.min[2]..=bb.max[2].min(d - 1) {
                    mass += self.values.data()[(ih * w + iw) * d + is].to_f64();
                }
            }
        }
        mass
    }

    /// Per-slice ASCII matrix dump (debug fallback; no image codecs).
    pub fn ascii_slices(&self) -> String {
        let s = self.values.shape();
        let (h, w, d) = (s[0], s[1], s[2]);
        let mut out = String::new();
        for is in 0..d {
            out.push_str(&format!("# slice {is}\n"));
            for ih in 0..h {
                let row: Vec<String> = (0..w)
                    .map(|iw| format!("{:.4}", self.values.data()[(ih * w + iw) * d + is].to_f64()))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Head-mean of an h×T×T attention stack, as a row-major T×T matrix.
pub fn head_mean(att: &[f64], heads: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for head in 0..heads {
        for i in 0..t * t {
            out[i] += att[head * t * t + i];
        }
    }
    let inv = 1.0 / heads as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Residual-augmented, row-renormalized form 0.5·(M + I) used per rollout step.
fn residual_renorm(m: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            out[i * t + j] = 0.5 * (m[i * t + j] + if i == j { 1.0 } else { 0.0 });
        }
        let row_sum: f64 = out[i * t..(i + 1) * t].iter().sum();
        if row_sum > 0.0 {
            for j in 0..t {
                out[i * t + j] /= row_sum;
            }
        }
    }
    out
}

fn matmul_sq(a: &[f64], b: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for k in 0..t {
            let aik = a[i * t + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..t {
                out[i * t + j] += aik * b[k * t + j];
            }
        }
    }
    out
}

/// Rollout across blocks (input matrices in block order, head-mean T×T):
/// Ā_L · … · Ā_1 with Ā = 0.5(A+I) row-renormalized.
pub fn rollout_matrix(blocks: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
    if blocks.is_empty() {
        return Err(AmcError::Contract("rollout needs ≥ 1 attention block".into()));
    }
    let mut acc = residual_renorm(&blocks[0], t);
    for b in &blocks[1..] {
        acc = matmul_sq(&residual_renorm(b, t), &acc, t);
    }
    Ok(acc)
}

/// Class-token row of a T×T matrix restricted to patch columns, in patch-grid
/// row-major order. `registers` tokens after the class token are skipped.
pub fn class_to_patches(m: &[f64], t: usize, registers: usize) -> Vec<f64> {
    m[1 + registers..t].to_vec()
}

/// Stack per-slice patch maps into a voxel heatmap: slice s contributes
/// weight_s · up(M_s) with bilinear in-plane upsampling by the patch size.
pub fn stack_slice_maps<T: Scalar>(
    per_slice_maps: &[Vec<f64>],
    weights: &[f64],
    grid: (usize, usize),
    patch: usize,
    mode: HeatmapMode,
) -> Result<Heatmap3D<T>> {
    if per_slice_maps.len() != weights.len() || per_slice_maps.is_empty() {
        return Err(AmcError::Contract(format!(
            "{} slice maps vs {} weights",
            per_slice_maps.len(),
            weights.len()
        )));
    }
    let (gh, gw) = grid;
    let s = per_slice_maps.len();
    let mut coarse = vec![T::zero(); gh * gw * s];
    for (is, (map, &a)) in per_slice_maps.iter().zip(weights).enumerate() {
        if map.len() != gh * gw {
            return Err(AmcError::Contract(format!(
                "slice map of {} patches does not fill a {gh}×{gw} grid",
                map.len()
            )));
        }
        for (p, &v) in map.iter().enumerate() {
            let (ih, iw) = (p / gw, p % gw);
            coarse[(ih * gw + iw) * s + is] = T::from_f64(a * v.max(0.0));
        }
    }
    let mut g: Graph<T> = Graph::new();
    let c = g.constant(Tensor::new(vec![1, gh, gw, s], coarse)?);
    let up = g.trilinear_upsample(c, [patch, patch, 1])?;
    let values = g.value(up).reshaped(vec![gh * patch, gw * patch, s])?;
    Ok(Heatmap3D {
        values,
        normalized: false,
        mode,
    })
}

/// Remap a heatmap computed in slice-stack orientation (plane×S along `axis`)
/// back to the volume's native H×W×S order.
fn to_native_axes<T: Scalar>(map: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let s = map.shape().to_vec();
    let (a, b, n) = (s[0], s[1], s[2]);
    match axis {
        2 => Ok(map.clone()),
        // axis 0: plane = (W, S), slices along H → native [n, a, b]
        0 => {
            let mut out = vec![T::zero(); a * b * n];
            for ia in 0..a {
                for ib in 0..b {
                    for i in 0..n {
                        out[(i * a + ia) * b + ib] = map.data()[(ia * b + ib) * n + i];
                    }
                }
            }
            Tensor::new(vec![n, a, b], out)
        }
        // axis 1: plane = (H, S), slices along W → native [a, n, b]
        1 => {
            let mut out = vec![T::zero(); a * b * n];
            for ia in 0..a {
                for ib in 0..b {
                    for i in 0..n {
                        out[(ia * n + i) * b + ib] = map.data()[(ia * b + ib) * n + i];
                    }
                }
            }
            Tensor::new(vec![a, n, b], out)
        }
        _ => Err(AmcError::Contract(format!("slice axis must be 0..3, got {axis}"))),
    }
}

/// End-to-end heatmap for one view of a (possibly multi-view) input, aligned
/// with that view's voxel grid. `class` picks the logit for gradient modes.
pub fn compute_heatmap<T: Scalar>(
    views: &[&Volume<T>],
    view: usize,
    class: usize,
    mode: HeatmapMode,
    plugin: &TaskPlugin<T>,
    backbone_weights: &BackboneWeights<T>,
) -> Result<Heatmap3D<T>> {
    if views.len() != plugin.view_count() || view >= views.len() {
        return Err(AmcError::Contract(format!(
            "view {view} of {} supplied, plugin declares {}",
            views.len(),
            plugin.view_count()
        )));
    }
    if class >= plugin.num_classes() {
        return Err(AmcError::Contract(format!(
            "class {class} out of range for {} classes",
            plugin.num_classes()
        )));
    }
    let config = &backbone_weights.config;
    let mut g = Graph::new();
    let bb = backbone_weights.bind(&mut g);
    let bound = plugin.bind(&mut g, mode.needs_grad());
    let mut stacks = Vec::with_capacity(views.len());
    let mut axes = Vec::with_capacity(views.len());
    for vol in views {
        let axis = backbone::slice_axis_for(vol, config)?;
        let prep =
            backbone::prepare_slices(vol, axis, backbone::IMAGENET_MEAN, backbone::IMAGENET_STD)?;
        stacks.push(g.leaf(prep, false));
        axes.push(axis);
    }
    let out = forward_views(&mut g, &bb, config, &stacks, &bound)?;
    if mode.needs_grad() {
        let target = g.slice(out.logits, 0, class, 1)?;
        let scalar = g.sum_all(target)?;
        g.backward(scalar)?;
    }
    let enc = &out.encodes[view];
    let s = enc.slices;
    let heads = config.heads;
    let t = config.seq_len();
    let r = config.register_tokens;
    let to_f64 = |x: &Tensor<T>| -> Vec<f64> { x.data().iter().map(|v| v.to_f64()).collect() };
    // per block, per slice head-mean matrices (grad modes: clamp(A⊙dA, 0))
    let mut per_block: Vec<Vec<Vec<f64>>> = Vec::with_capacity(enc.attentions.len());
    for &att_var in &enc.attentions {
        let att = to_f64(g.value(att_var));
        let grad = if mode.needs_grad() {
            Some(to_f64(&g.grad(att_var)))
        } else {
            None
        };
        let block: Vec<Vec<f64>> = (0..s)
            .map(|is| {
                let lo = is * heads * t * t;
                let hi = lo + heads * t * t;
                let raw: Vec<f64> = match &grad {
                    None => att[lo..hi].to_vec(),
                    Some(gr) => att[lo..hi]
                        .iter()
                        .zip(&gr[lo..hi])
                        .map(|(a, d)| (a * d).max(0.0))
                        .collect(),
                };
                head_mean(&raw, heads, t)
            })
            .collect();
        per_block.push(block);
    }
    let maps: Vec<Vec<f64>> = (0..s)
        .map(|is| -> Result<Vec<f64>> {
            let m = match mode {
                HeatmapMode::LastLayer | HeatmapMode::GradRolloutLast => {
                    per_block.last().unwrap()[is].clone()
                }
                HeatmapMode::Rollout | HeatmapMode::GradRollout => {
                    let blocks: Vec<Vec<f64>> =
                        per_block.iter().map(|b| b[is].clone()).collect();
                    rollout_matrix(&blocks, t)?
                }
            };
            Ok(class_to_patches(&m, t, r))
        })
        .collect::<Result<_>>()?;
    let weights = to_f64(g.value(out.view_pools[view].weights));
    let stacked = stack_slice_maps::<T>(&maps, &weights, config.grid(), config.patch_size, mode)?;
    Ok(Heatmap3D {
        values: to_native_axes(&stacked.values, axes[view])?,
        ..stacked
    })
}
