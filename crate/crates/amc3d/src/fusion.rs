//! Slice-embedding aggregation: query attention pooling, multi-view fusion,
//! classification head, and the end-to-end volume forward pass.
//!
//! Cross-slice reductions inside the pooling op accumulate in f64, so slice
//! order cannot perturb the rounded result even at f32.

use crate::backbone::{self, BackboneWeights, BoundBackbone, VolumeEncodeResult};
use crate::io::plugin::{BoundPlugin, TaskPlugin};
use crate::io::volume::Volume;
use crate::tensor::graph::{Graph, VarId};
use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

/// Attention weights and pooled embedding for one stack of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolResult<T: Scalar> {
    /// S nonnegative weights summing to 1.
    pub weights: Tensor<T>,
    /// Pooled d-vector v = aᵀH.
    pub embedding: Tensor<T>,
}

/// Graph-variable counterpart of [`PoolResult`].
#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub weights: VarId,
    pub embedding: VarId,
}

/// a = softmax(Hq/√d), v = aᵀH on the graph.
pub fn attention_pool_graph<T: Scalar>(g: &mut Graph<T>, h: VarId, q: VarId) -> Result<PoolVars> {
    Ok(PoolVars {
        weights: g.attn_pool_weights(h, q)?,
        embedding: g.attn_pool(h, q)?,
    })
}

/// Concrete-tensor attention pool for evaluation and tests.
pub fn attention_pool<T: Scalar>(h: &Tensor<T>, q: &Tensor<T>) -> Result<PoolResult<T>> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let qv = g.constant(q.clone());
    let p = attention_pool_graph(&mut g, hv, qv)?;
    Ok(PoolResult {
        weights: g.value(p.weights).clone(),
        embedding: g.value(p.embedding).clone(),
    })
}

/// Single view returns its embedding unchanged (exact identity); multiple
/// views are stacked V×d and pooled with the task query.
pub fn fuse_views_graph<T: Scalar>(
    g: &mut Graph<T>,
    view_embeddings: &[VarId],
    task_query: VarId,
) -> Result<VarId> {
    match view_embeddings {
        [] => Err(AmcError::Contract("fuse_views needs at least one view".into())),
        [only] => Ok(*only),
        many => {
            let d = g.value(many[0]).numel();
            let rows: Vec<VarId> = many
                .iter()
                .map(|&v| g.reshape(v, vec![1, d]))
                .collect::<Result<_>>()?;
            let stacked = g.concat(&rows, 0)?;
            Ok(attention_pool_graph(g, stacked, task_query)?.embedding)
        }
    }
}

pub fn fuse_views<T: Scalar>(view_embeddings: &[Tensor<T>], task_query: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<VarId> = view_embeddings.iter().map(|e| g.constant(e.clone())).collect();
    let qv = g.constant(task_query.clone());
    let fused = fuse_views_graph(&mut g, &vars, qv)?;
    Ok(g.value(fused).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Per-class sigmoid (multi-label).
    Sigmoid,
    /// Softmax over classes (multi-class).
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T: Scalar> {
    /// d×K weight.
    pub weight: Tensor<T>,
    /// K biases.
    pub bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] || weight.shape()[1] == 0 {
            return Err(AmcError::Contract(format!(
                "head expects d×K weight with K biases, got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(ClassifierHead { weight, bias, activation })
    }

    pub fn init(d: usize, k: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::AmcRng::split(seed, "head");
        Self::new(rng.trunc_normal_tensor(vec![d, k], 0.02), Tensor::zeros(vec![k]), activation)
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Activated probabilities from raw logits.
    pub fn probabilities(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = g.constant(logits.clone());
        let p = match self.activation {
            Activation::Sigmoid => g.sigmoid(z)?,
            Activation::Softmax => {
                let k = logits.numel();
                let row = g.reshape(z, vec![1, k])?;
                let sm = g.softmax(row, 1)?;
                g.reshape(sm, vec![k])?
            }
        };
        Ok(g.value(p).clone())
    }
}

/// Head logits for a fused d-vector.
pub fn head_logits_graph<T: Scalar>(
    g: &mut Graph<T>,
    fused: VarId,
    head_w: VarId,
    head_b: VarId,
) -> Result<VarId> {
    let d = g.value(fused).numel();
    let k = g.value(head_w).shape()[1];
    let row = g.reshape(fused, vec![1, d])?;
    let z = g.matmul(row, head_w)?;
    let z = g.add(z, head_b)?;
    g.reshape(z, vec![k])
}

/// Full forward pass over prepared per-view slice stacks already on the graph.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// K-vector of raw logits.
    pub logits: VarId,
    /// Fused d-vector.
    pub fused: VarId,
    /// Per-view pooling (weights over slices, view embedding).
    pub view_pools: Vec<PoolVars>,
    /// Per-view encoder output (class/patch tokens, attentions).
    pub encodes: Vec<VolumeEncodeResult>,
}

pub fn forward_views<T: Scalar>(
    g: &mut Graph<T>,
    backbone_vars: &BoundBackbone,
    config: &crate::backbone::BackboneConfig,
    stacks: &[VarId],
    plugin: &BoundPlugin,
) -> Result<ForwardOutput> {
    if stacks.len() != plugin.views.len() {
        return Err(AmcError::Contract(format!(
            "plugin declares {} views, got {} slice stacks",
            plugin.views.len(),
            stacks.len()
        )));
    }
    let mut encodes = Vec::with_capacity(stacks.len());
    let mut view_pools = Vec::with_capacity(stacks.len());
    let mut embeddings = Vec::with_capacity(stacks.len());
    for (stack, view) in stacks.iter().zip(&plugin.views) {
        let enc = backbone::encode_volume(g, config, backbone_vars, *stack, Some(&view.adapters))?;
        let pool = attention_pool_graph(g, enc.class_tokens, view.query)?;
        embeddings.push(pool.embedding);
        view_pools.push(pool);
        encodes.push(enc);
    }
    let fused = fuse_views_graph(g, &embeddings, plugin.task_query)?;
    let logits = head_logits_graph(g, fused, plugin.head_w, plugin.head_b)?;
    Ok(ForwardOutput {
        logits,
        fused,
        view_pools,
        encodes,
    })
}

/// Concrete end-to-end classification of one multi-view volume.
#[derive(Debug, Clone)]
pub struct ClassifyResult<T: Scalar> {
    pub logits: Tensor<T>,
    pub pools: Vec<PoolResult<T>>,
}

pub fn classify_volume<T: Scalar>(
    views: &[&Volume<T>],
    plugin: &TaskPlugin<T>,
    backbone: &BackboneWeights<T>,
) -> Result<ClassifyResult<T>> {
    if views.len() != plugin.view_count() {
        return Err(AmcError::Contract(format!(
            "plugin {} declares {} views, got {}",
            plugin.task_id,
            plugin.view_count(),
            views.len()
        )));
    }
    let config = &backbone.config;
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g);
    let bound = plugin.bind(&mut g, false);
    let mut stacks = Vec::with_capacity(views.len());
    for vol in views {
        let axis = backbone::slice_axis_for(vol, config)?;
        let prepared = backbone::prepare_slices(
            vol,
            axis,
            backbone::IMAGENET_MEAN,
            backbone::IMAGENET_STD,
        )?;
        stacks.push(g.leaf(prepared, false));
    }
    let out = forward_views(&mut g, &bb, config, &stacks, &bound)?;
    Ok(ClassifyResult {
        logits: g.value(out.logits).clone(),
        pools: out
            .view_pools
            .iter()
            .map(|p| PoolResult {
                weights: g.value(p.weights).clone(),
                embedding: g.value(p.embedding).clone(),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselinePool {
    Average,
    Max,
    /// Lower median for even S.
    Median,
}

/// Per-dimension aggregate over the S×d embedding matrix.
pub fn baseline_pool<T: Scalar>(h: &Tensor<T>, kind: BaselinePool) -> Result<Tensor<T>> {
    if h.shape().len() != 2 || h.shape()[0] == 0 {
        return Err(AmcError::Contract(format!(
            "baseline pool expects a nonempty S×d matrix, got {:?}",
            h.shape()
        )));
    }
    let (s, d) = (h.shape()[0], h.shape()[1]);
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<T> = (0..s).map(|i| h.data()[i * d + j]).collect();
        let v = match kind {
            BaselinePool::Average => {
                let sum = col.iter().map(|v| v.to_f64()).sum::<f64>();
                T::from_f64(sum / s as f64)
            }
            BaselinePool::Max => {
                let mut best = col[0];
                for &c in &col[1..] {
                    if c > best {
                        best = c;
                    }
                }
                best
            }
            BaselinePool::Median => {
                let mut sorted = col.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                sorted[(s - 1) / 2]
            }
        };
        out.push(v);
    }
    Tensor::new(vec![d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_singleton_is_identity() {
        let h = Tensor::from_f64_slice(vec![1, 3], &[0.4, -1.0, 2.5]).unwrap();
        let q = Tensor::from_f64_slice(vec![3], &[1.0, 0.0, -1.0]).unwrap();
        let p = attention_pool::<f64>(&h, &q).unwrap();
        assert_eq!(p.weights.data(), &[1.0]);
        assert_eq!(p.embedding.data(), h.data());
    }

    #[test]
    fn pool_identical_rows_is_uniform() {
        let h = Tensor::from_f64_slice(vec![3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let q = Tensor::from_f64_slice(vec![2], &[0.3, -0.9]).unwrap();
        let p = attention_pool::<f64>(&h, &q).unwrap();
        for &w in p.weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((p.embedding.data()[0] - 1.0).abs() < 1e-12);
        assert!((p.embedding.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pool_hand_oracle_d1() {
        // d=1, H=[[1],[3]], q=[1]: scores [1,3] (√d=1) → a=[0.11920, 0.88080]
        let h = Tensor::from_f64_slice(vec![2, 1], &[1.0, 3.0]).unwrap();
        let q = Tensor::from_f64_slice(vec![1], &[1.0]).unwrap();
        let p = attention_pool::<f64>(&h, &q).unwrap();
        assert!((p.weights.data()[0] - 0.11920292202211755).abs() < 1e-10);
        assert!((p.weights.data()[1] - 0.8807970779778823).abs() < 1e-10);
        assert!((p.embedding.data()[0] - 2.7615941559557646).abs() < 1e-10);
    }

    #[test]
    fn pool_weights_sum_to_one() {
        let mut rng = crate::rng::AmcRng::split(4, "pool");
        for _ in 0..20 {
            let h = rng.normal_tensor::<f32>(vec![7, 5], 2.0);
            let q = rng.normal_tensor::<f32>(vec![5], 2.0);
            let p = attention_pool(&h, &q).unwrap();
            let sum: f64 = p.weights.data().iter().map(|v| *v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.weights.data().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn orthogonal_query_gives_uniform_weights_and_row_mean() {
        // rows lie in span{e1,e2}, query along e3
        let h = Tensor::from_f64_slice(
            vec![3, 3],
            &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 4.0, -2.0, 0.0],
        )
        .unwrap();
        let q = Tensor::from_f64_slice(vec![3], &[0.0, 0.0, 5.0]).unwrap();
        let p = attention_pool::<f64>(&h, &q).unwrap();
        for &w in p.weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-10);
        }
        let mean = [(1.0 - 1.0 + 4.0) / 3.0, (2.0 + 0.5 - 2.0) / 3.0, 0.0];
        for (v, m) in p.embedding.data().iter().zip(mean) {
            assert!((v - m).abs() < 1e-10);
        }
    }

    #[test]
    fn fuse_single_view_is_exact_identity() {
        let e = Tensor::<f64>::from_f64_slice(vec![4], &[0.1, -0.2, 0.3, 7.0]).unwrap();
        let q = Tensor::from_f64_slice(vec![4], &[9.0, 9.0, 9.0, 9.0]).unwrap();
        assert_eq!(fuse_views(std::slice::from_ref(&e), &q).unwrap(), e);
    }

    #[test]
    fn fuse_identical_views_returns_common_embedding() {
        let e = Tensor::<f64>::from_f64_slice(vec![2], &[1.5, -0.5]).unwrap();
        let q = Tensor::from_f64_slice(vec![2], &[0.2, 0.8]).unwrap();
        let fused = fuse_views(&[e.clone(), e.clone()], &q).unwrap();
        for (a, b) in fused.data().iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_three_views_matches_scalar_softmax() {
        // d=1 embeddings [1],[2],[3], q=[1] → weights softmax([1,2,3])
        let es: Vec<Tensor<f64>> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&v| Tensor::from_f64_slice(vec![1], &[v]).unwrap())
            .collect();
        let q = Tensor::from_f64_slice(vec![1], &[1.0]).unwrap();
        let fused = fuse_views(&es, &q).unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let expect = (exps[0] + 2.0 * exps[1] + 3.0 * exps[2]) / z;
        assert!((fused.data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn empty_views_rejected() {
        let q = Tensor::<f64>::zeros(vec![2]);
        assert!(fuse_views::<f64>(&[], &q).is_err());
    }

    #[test]
    fn baseline_pools_hand_oracles() {
        let h = Tensor::from_f64_slice(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(baseline_pool::<f64>(&h, BaselinePool::Average).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(baseline_pool::<f64>(&h, BaselinePool::Max).unwrap().data(), &[3.0, 4.0]);
        // lower median for even S
        assert_eq!(baseline_pool::<f64>(&h, BaselinePool::Median).unwrap().data(), &[1.0, 2.0]);
        // odd S median = middle order statistic
        let h3 = Tensor::from_f64_slice(vec![3, 1], &[5.0, -1.0, 2.0]).unwrap();
        assert_eq!(baseline_pool::<f64>(&h3, BaselinePool::Median).unwrap().data(), &[2.0]);
    }

    #[test]
    fn head_probabilities_match_activation() {
        let head = ClassifierHead::new(
            Tensor::<f64>::zeros(vec![2, 2]),
            Tensor::zeros(vec![2]),
            Activation::Softmax,
        )
        .unwrap();
        let z = Tensor::from_f64_slice(vec![2], &[1.0, 3.0]).unwrap();
        let p = head.probabilities(&z).unwrap();
        assert!((p.data()[0] - 0.11920292202211755).abs() < 1e-12);
        let head_sig = ClassifierHead::new(
            Tensor::<f64>::zeros(vec![2, 2]),
            Tensor::zeros(vec![2]),
            Activation::Sigmoid,
        )
        .unwrap();
        let ps = head_sig.probabilities(&z).unwrap();
        assert!((ps.data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    }
}
