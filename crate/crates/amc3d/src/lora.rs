//! Low-rank adaptation of frozen linear maps.
//!
//! Each adapter carries `A` (r × d_out) and `B` (d_in × r); the effective
//! update is ΔW = (α/r)·B·A. `B` is zero at construction so a fresh adapter
//! is an exact identity on top of the frozen weight.

use std::collections::BTreeMap;

use crate::backbone::BackboneConfig;
use crate::rng::AmcRng;
use crate::tensor::graph::{Graph, VarId};
use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

/// Low-rank update attached to one frozen linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar> {
    pub target: String,
    /// r × d_out
    pub a: Tensor<T>,
    /// d_in × r
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(target: &str, a: Tensor<T>, b: Tensor<T>, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 || alpha <= 0.0 {
            return Err(AmcError::Contract(format!(
                "adapter {target}: rank must be ≥ 1 and alpha > 0, got r={rank}, alpha={alpha}"
            )));
        }
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != rank || b.shape()[1] != rank {
            return Err(AmcError::Contract(format!(
                "adapter {target}: A must be r×d_out and B d_in×r; got A {:?}, B {:?}, r={rank}",
                a.shape(),
                b.shape()
            )));
        }
        let (d_in, d_out) = (b.shape()[0], a.shape()[1]);
        if rank > d_in.min(d_out) {
            return Err(AmcError::Contract(format!(
                "adapter {target}: rank {rank} exceeds min({d_in}, {d_out})"
            )));
        }
        Ok(LoraAdapter {
            target: target.to_string(),
            a,
            b,
            rank,
            alpha,
        })
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }
}

/// One adapter per covered target: patch embedding plus every block's
/// q, k, v, out projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet<T: Scalar> {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: BTreeMap<String, LoraAdapter<T>>,
}

/// Target ids covered for a given backbone depth, in deterministic order.
pub fn covered_targets(depth: usize) -> Vec<String> {
    let mut out = vec!["patch_embed".to_string()];
    for i in 0..depth {
        for p in ["q", "k", "v", "out"] {
            out.push(format!("block{i}.attn.{p}"));
        }
    }
    out
}

/// Input/output width of the frozen linear map behind a target id.
pub fn target_dims(config: &BackboneConfig, target: &str) -> Result<(usize, usize)> {
    let d = config.embed_dim;
    if target == "patch_embed" {
        return Ok((config.patch_dim(), d));
    }
    if covered_targets(config.depth).iter().any(|t| t == target) {
        return Ok((d, d));
    }
    Err(AmcError::Contract(format!(
        "adapter targets nonexistent layer {target}"
    )))
}

/// Fresh adapter set: B zero, A truncated normal std 0.02.
pub fn init_adapter_set<T: Scalar>(
    config: &BackboneConfig,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapterSet<T>> {
    config.validate()?;
    if rank == 0 || alpha <= 0.0 {
        return Err(AmcError::Contract(format!(
            "rank must be ≥ 1 and alpha > 0, got r={rank}, alpha={alpha}"
        )));
    }
    let mut adapters = BTreeMap::new();
    for target in covered_targets(config.depth) {
        let (d_in, d_out) = target_dims(config, &target)?;
        if rank > d_in.min(d_out) {
            return Err(AmcError::Contract(format!(
                "rank {rank} exceeds min layer dimension {} at {target}",
                d_in.min(d_out)
            )));
        }
        let mut rng = AmcRng::split(seed, &format!("lora/{target}"));
        let a = rng.trunc_normal_tensor(vec![rank, d_out], 0.02);
        let b = Tensor::zeros(vec![d_in, rank]);
        adapters.insert(target.clone(), LoraAdapter::new(&target, a, b, rank, alpha)?);
    }
    Ok(LoraAdapterSet {
        rank,
        alpha,
        adapters,
    })
}

impl<T: Scalar> LoraAdapterSet<T> {
    pub fn param_count(&self) -> usize {
        self.adapters.values().map(|a| a.param_count()).sum()
    }

    /// Insert every A/B as a graph leaf (trainable or frozen) and return the
    /// per-target variable binding used by the forward pass.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundAdapterSet {
        let mut vars = BTreeMap::new();
        for (target, ad) in &self.adapters {
            let a = g.leaf(ad.a.clone(), trainable);
            let b = g.leaf(ad.b.clone(), trainable);
            vars.insert(
                target.clone(),
                BoundAdapter {
                    a,
                    b,
                    scaling: ad.scaling(),
                },
            );
        }
        BoundAdapterSet { vars }
    }
}

/// Graph-variable view of one adapter for a single forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    pub a: VarId,
    pub b: VarId,
    pub scaling: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BoundAdapterSet {
    pub vars: BTreeMap<String, BoundAdapter>,
}

impl BoundAdapterSet {
    pub fn get(&self, target: &str) -> Option<&BoundAdapter> {
        self.vars.get(target)
    }
}

/// x·W + (α/r)·(x·B)·A via two thin matmuls; ΔW is never materialized.
/// Gradients reach A and B only if they were bound as trainable leaves.
pub fn apply_adapted<T: Scalar>(
    g: &mut Graph<T>,
    x: VarId,
    w: VarId,
    adapter: Option<&BoundAdapter>,
) -> Result<VarId> {
    let base = g.matmul(x, w)?;
    match adapter {
        None => Ok(base),
        Some(ad) => {
            let thin = g.matmul(x, ad.b)?;
            let update = g.matmul(thin, ad.a)?;
            let scaled = g.scale(update, ad.scaling)?;
            g.add(base, scaled)
        }
    }
}

/// Dense merged weight W' = W + (α/r)·B·A.
pub fn merge_adapter<T: Scalar>(w: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let (d_in, d_out) = (adapter.d_in(), adapter.d_out());
    if w.shape() != [d_in, d_out] {
        return Err(AmcError::Contract(format!(
            "merge: weight shape {:?} does not match adapter {} ({d_in}×{d_out})",
            w.shape(),
            adapter.target
        )));
    }
    let mut g = Graph::<T>::new();
    let wv = g.constant(w.clone());
    let bv = g.constant(adapter.b.clone());
    let av = g.constant(adapter.a.clone());
    let ba = g.matmul(bv, av)?;
    let delta = g.scale(ba, adapter.scaling())?;
    let merged = g.add(wv, delta)?;
    Ok(g.value(merged).clone())
}

/// Exact trainable-parameter count of a plugin:
/// per adapted layer r·(d_in+d_out), plus query vectors, the linear head,
/// and any decoder parameters.
pub fn count_trainable<T: Scalar>(
    set: &LoraAdapterSet<T>,
    n_queries: usize,
    embed_dim: usize,
    num_classes: usize,
    decoder_params: usize,
) -> usize {
    set.param_count()
        + n_queries * embed_dim
        + embed_dim * num_classes
        + num_classes
        + decoder_params
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_adapter() -> LoraAdapter<f64> {
        // W=I₂, B=[[1],[0]], A=[[0,2]], α=2, r=1
        LoraAdapter::new(
            "toy",
            Tensor::from_f64_slice(vec![1, 2], &[0.0, 2.0]).unwrap(),
            Tensor::from_f64_slice(vec![2, 1], &[1.0, 0.0]).unwrap(),
            1,
            2.0,
        )
        .unwrap()
    }

    fn identity2() -> Tensor<f64> {
        Tensor::from_f64_slice(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn run_adapted(w: &Tensor<f64>, ad: Option<&LoraAdapter<f64>>, x: &Tensor<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bound = ad.map(|a| {
            let av = g.constant(a.a.clone());
            let bv = g.constant(a.b.clone());
            BoundAdapter {
                a: av,
                b: bv,
                scaling: a.scaling(),
            }
        });
        let y = apply_adapted(&mut g, xv, wv, bound.as_ref()).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn hand_oracle_rank_one() {
        // ΔW=[[0,4],[0,0]], x=[1,1] → [1,5]
        let x = Tensor::from_f64_slice(vec![1, 2], &[1.0, 1.0]).unwrap();
        assert_eq!(run_adapted(&identity2(), Some(&toy_adapter()), &x), &[1.0, 5.0]);
    }

    #[test]
    fn merged_weight_hand_oracle() {
        let merged = merge_adapter(&identity2(), &toy_adapter()).unwrap();
        assert_eq!(merged.data(), &[1.0, 4.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_b_is_exact_identity() {
        let ad = LoraAdapter::new(
            "z",
            Tensor::from_f64_slice(vec![1, 2], &[0.3, -0.7]).unwrap(),
            Tensor::zeros(vec![2, 1]),
            1,
            16.0,
        )
        .unwrap();
        let w = Tensor::from_f64_slice(vec![2, 2], &[0.5, 1.5, -2.0, 0.25]).unwrap();
        let x = Tensor::from_f64_slice(vec![1, 2], &[3.0, -1.0]).unwrap();
        assert_eq!(run_adapted(&w, Some(&ad), &x), run_adapted(&w, None, &x));
        // merge with B=0 keeps W bit-identical
        assert_eq!(merge_adapter(&w, &ad).unwrap(), w);
    }

    #[test]
    fn alpha_linearity() {
        let mut ad = toy_adapter();
        let w = identity2();
        let x = Tensor::from_f64_slice(vec![1, 2], &[0.5, -2.0]).unwrap();
        let base = run_adapted(&w, None, &x);
        let once = run_adapted(&w, Some(&ad), &x);
        ad.alpha *= 2.0;
        let twice = run_adapted(&w, Some(&ad), &x);
        for i in 0..2 {
            assert_eq!(2.0 * (once[i] - base[i]), twice[i] - base[i]);
        }
    }

    #[test]
    fn merge_equivalence_random_inputs() {
        let mut rng = AmcRng::split(7, "merge");
        let ad = LoraAdapter::new(
            "m",
            rng.trunc_normal_tensor::<f64>(vec![3, 6], 0.02),
            rng.normal_tensor(vec![5, 3], 0.1),
            3,
            16.0,
        )
        .unwrap();
        let w = rng.normal_tensor(vec![5, 6], 0.5);
        let merged = merge_adapter(&w, &ad).unwrap();
        for _ in 0..100 {
            let x = rng.normal_tensor::<f64>(vec![1, 5], 1.0);
            let via_adapter = run_adapted(&w, Some(&ad), &x);
            let via_merged = run_adapted(&merged, None, &x);
            for (a, b) in via_adapter.iter().zip(&via_merged) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn init_covers_all_targets_with_zero_b() {
        let config = BackboneConfig::toy();
        let set = init_adapter_set::<f32>(&config, DEFAULT_RANK, DEFAULT_ALPHA, 11).unwrap();
        assert_eq!(set.adapters.len(), 1 + 4 * config.depth);
        for (target, ad) in &set.adapters {
            assert!(ad.b.data().iter().all(|&v| v == 0.0), "{target} B not zero");
            assert!(ad.a.data().iter().any(|&v| v != 0.0), "{target} A all zero");
        }
        // same seed reproduces A bit-for-bit
        let again = init_adapter_set::<f32>(&config, DEFAULT_RANK, DEFAULT_ALPHA, 11).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn oversized_rank_rejected() {
        let config = BackboneConfig::toy();
        let err = init_adapter_set::<f32>(&config, 100_000, DEFAULT_ALPHA, 0).unwrap_err();
        assert!(format!("{err}").contains("rank"));
    }

    #[test]
    fn count_trainable_square_projection() {
        // one square d=16 projection at r=2 → 64 adapter params
        let ad = LoraAdapter::<f64>::new(
            "sq",
            Tensor::zeros(vec![2, 16]),
            Tensor::zeros(vec![16, 2]),
            2,
            16.0,
        )
        .unwrap();
        assert_eq!(ad.param_count(), 64);
    }

    #[test]
    fn count_trainable_toy_backbone_formula() {
        let config = BackboneConfig::toy();
        let set = init_adapter_set::<f32>(&config, 8, 16.0, 0).unwrap();
        let d = config.embed_dim;
        let block_params = config.depth * 4 * 8 * (d + d);
        let patch_params = 8 * (config.patch_dim() + d);
        assert_eq!(set.param_count(), block_params + patch_params);
        let total = count_trainable(&set, 1, d, 2, 0);
        assert_eq!(total, set.param_count() + d + d * 2 + 2);
        // adapters remain a small fraction of backbone parameters
        let backbone = crate::backbone::init_random_backbone::<f32>(&config, 0)
            .unwrap()
            .param_count();
        assert!((set.param_count() as f64) < 0.35 * backbone as f64);
    }
}
