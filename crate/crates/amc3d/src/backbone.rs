//! Frozen 2D vision-transformer encoder producing per-slice class tokens,
//! patch tokens, and per-block attention maps.
//!
//! Pre-norm blocks with GELU MLP; sequence = class token, R register tokens,
//! N patch tokens. All slices of a volume are encoded in one batched pass.

use std::collections::BTreeMap;
use std::path::Path;

use crate::io::volume::Volume;
use crate::lora::{self, BoundAdapterSet};
use crate::tensor::checkpoint;
use crate::tensor::graph::{Graph, VarId};
use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub register_tokens: usize,
    pub mlp_ratio: f64,
}

impl BackboneConfig {
    /// Desk-scale default: d=64, depth 4, heads 4, P=8, 64×64 input, R=0.
    pub fn toy() -> BackboneConfig {
        BackboneConfig {
            image_h: 64,
            image_w: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            register_tokens: 0,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0
        {
            return Err(AmcError::Contract(format!(
                "image {}×{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(AmcError::Contract(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.mlp_ratio <= 0.0 {
            return Err(AmcError::Contract("depth, embed dim and mlp ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Sequence length 1 + R + N.
    pub fn seq_len(&self) -> usize {
        1 + self.register_tokens + self.num_patches()
    }

    /// Flattened patch width: 3 channels × P × P.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn config_hash(&self) -> String {
        checkpoint::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Deterministic tensor name list for a config.
fn tensor_names(config: &BackboneConfig) -> Vec<String> {
    let mut names = vec![
        "patch_embed.w".to_string(),
        "patch_embed.b".to_string(),
        "cls_token".to_string(),
        "pos_embed".to_string(),
        "final_ln.g".to_string(),
        "final_ln.b".to_string(),
    ];
    if config.register_tokens > 0 {
        names.push("reg_tokens".to_string());
    }
    for i in 0..config.depth {
        for part in [
            "ln1.g", "ln1.b", "attn.q.w", "attn.q.b", "attn.k.w", "attn.k.b", "attn.v.w",
            "attn.v.b", "attn.out.w", "attn.out.b", "ln2.g", "ln2.b", "mlp.fc1.w", "mlp.fc1.b",
            "mlp.fc2.w", "mlp.fc2.b",
        ] {
            names.push(format!("block{i}.{part}"));
        }
    }
    names.sort();
    names
}

fn tensor_shape(config: &BackboneConfig, name: &str) -> Vec<usize> {
    let d = config.embed_dim;
    let hdim = config.mlp_hidden();
    match name {
        "patch_embed.w" => vec![config.patch_dim(), d],
        "cls_token" => vec![d],
        "reg_tokens" => vec![config.register_tokens, d],
        "pos_embed" => vec![config.seq_len(), d],
        _ => {
            let part = name.splitn(2, '.').nth(1).unwrap_or(name);
            match part {
                "attn.q.w" | "attn.k.w" | "attn.v.w" | "attn.out.w" => vec![d, d],
                "mlp.fc1.w" => vec![d, hdim],
                "mlp.fc2.w" => vec![hdim, d],
                "mlp.fc1.b" => vec![hdim],
                _ => vec![d], // biases and norm parameters
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights<T: Scalar> {
    pub config: BackboneConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> BackboneWeights<T> {
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing backbone tensor {name}"))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    fn tensor_refs(&self) -> Vec<(String, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    /// SHA-256 over the serialized weight container.
    pub fn checksum(&self) -> String {
        checkpoint::sha256_hex(&checkpoint::to_bytes(&self.tensor_refs()))
    }

    /// Identity of (config, weights); plugins record this at save time.
    pub fn fingerprint(&self) -> String {
        checkpoint::sha256_hex(format!("{}:{}", self.config.config_hash(), self.checksum()).as_bytes())
    }

    /// Insert every weight as a frozen graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundBackbone {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), false)))
            .collect();
        BoundBackbone { vars }
    }
}

/// Frozen-leaf variable view of the backbone for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub vars: BTreeMap<String, VarId>,
}

impl BoundBackbone {
    pub fn get(&self, name: &str) -> VarId {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing backbone var {name}"))
    }
}

/// Truncated-normal (std 0.02) weights; norm scales 1, biases 0.
pub fn init_random_backbone<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<BackboneWeights<T>> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for name in tensor_names(config) {
        let shape = tensor_shape(config, &name);
        let t = if name.ends_with("ln.g") || name.ends_with("ln1.g") || name.ends_with("ln2.g") {
            Tensor::full(shape, T::one())
        } else if name.ends_with(".b") {
            Tensor::zeros(shape)
        } else {
            AmcRng::split(seed, &format!("backbone/{name}")).trunc_normal_tensor(shape, 0.02)
        };
        tensors.insert(name, t);
    }
    Ok(BackboneWeights {
        config: config.clone(),
        tensors,
    })
}

use crate::rng::AmcRng;

pub fn save_backbone<T: Scalar>(path: &Path, weights: &BackboneWeights<T>) -> Result<()> {
    checkpoint::save_to_path(path, &weights.tensor_refs())?;
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, serde_json::to_string_pretty(&weights.config)?)?;
    Ok(())
}

pub fn load_backbone<T: Scalar>(path: &Path) -> Result<BackboneWeights<T>> {
    let sidecar = sidecar_path(path);
    let config: BackboneConfig = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
    config.validate()?;
    let tensors: BTreeMap<String, Tensor<T>> =
        checkpoint::load_from_path(path)?.into_iter().collect();
    for name in tensor_names(&config) {
        let t = tensors.get(&name).ok_or_else(|| AmcError::Integrity {
            path: path.display().to_string(),
            detail: format!("missing tensor {name}"),
        })?;
        let expect = tensor_shape(&config, &name);
        if t.shape() != expect {
            return Err(AmcError::Integrity {
                path: path.display().to_string(),
                detail: format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), expect),
            });
        }
    }
    Ok(BackboneWeights { config, tensors })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Normalized 3-channel slice stack S×3×H_img×W_img taken perpendicular to
/// `axis` (0=H, 1=W, 2=S of the volume), channel-replicated and standardized
/// per channel.
pub fn prepare_slices<T: Scalar>(
    volume: &Volume<T>,
    axis: usize,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<Tensor<T>> {
    if volume.channels() != 1 {
        return Err(AmcError::Contract(format!(
            "slice preparation requires a single-channel volume, got C={}",
            volume.channels()
        )));
    }
    if axis > 2 {
        return Err(AmcError::Contract(format!("slice axis must be 0, 1 or 2, got {axis}")));
    }
    if std.iter().any(|&s| s <= 0.0) {
        return Err(AmcError::Contract(format!("std components must be positive, got {std:?}")));
    }
    let [h, w, s] = volume.spatial();
    let d = volume.data.data();
    let at = |ih: usize, iw: usize, is: usize| d[(ih * w + iw) * s + is];
    // image extents per slicing axis: remaining axes in (H, W, S) order
    let (n_slices, ih_ext, iw_ext): (usize, usize, usize) = match axis {
        0 => (h, w, s),
        1 => (w, h, s),
        _ => (s, h, w),
    };
    let mut out = Vec::with_capacity(n_slices * 3 * ih_ext * iw_ext);
    for idx in 0..n_slices {
        for c in 0..3 {
            let (m, sd) = (T::from_f64(mean[c]), T::from_f64(std[c]));
            for a in 0..ih_ext {
                for b in 0..iw_ext {
                    let v = match axis {
                        0 => at(idx, a, b),
                        1 => at(a, idx, b),
                        _ => at(a, b, idx),
                    };
                    out.push((v - m) / sd);
                }
            }
        }
    }
    Tensor::new(vec![n_slices, 3, ih_ext, iw_ext], out)
}

/// Pick the slicing axis whose perpendicular plane matches the backbone
/// input geometry. When several axes qualify, the volume's default (largest
/// extent, later axis on ties) wins if it qualifies, else the latest
/// qualifying axis.
pub fn slice_axis_for<T: Scalar>(volume: &Volume<T>, config: &BackboneConfig) -> Result<usize> {
    let sp = volume.spatial();
    let plane = |a: usize| match a {
        0 => (sp[1], sp[2]),
        1 => (sp[0], sp[2]),
        _ => (sp[0], sp[1]),
    };
    let qualifying: Vec<usize> = (0..3)
        .filter(|&a| plane(a) == (config.image_h, config.image_w))
        .collect();
    let default = volume.default_slice_axis();
    match qualifying.last() {
        None => Err(AmcError::Contract(format!(
            "no slicing axis of volume {sp:?} yields {}×{} planes",
            config.image_h, config.image_w
        ))),
        Some(_) if qualifying.contains(&default) => Ok(default),
        Some(&a) => Ok(a),
    }
}

/// Per-volume encoder output: graph variables for the batched forward.
#[derive(Debug, Clone)]
pub struct VolumeEncodeResult {
    /// S×d class tokens (rows in slice order).
    pub class_tokens: VarId,
    /// S×N×d patch tokens from the last block.
    pub patch_tokens: VarId,
    /// Per block: (S·h)×T×T post-softmax attention, block order.
    pub attentions: Vec<VarId>,
    pub slices: usize,
}

/// Encode all S slices of a prepared S×3×H×W stack in one batched pass.
/// Adapters, when bound, sit on the patch embedding and every q/k/v/out
/// projection; with all-zero B the result is bit-identical to no adapters.
pub fn encode_volume<T: Scalar>(
    g: &mut Graph<T>,
    config: &BackboneConfig,
    bb: &BoundBackbone,
    slices: VarId,
    adapters: Option<&BoundAdapterSet>,
) -> Result<VolumeEncodeResult> {
    let shape = g.value(slices).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != config.image_h || shape[3] != config.image_w {
        return Err(AmcError::Contract(format!(
            "slice stack shape {shape:?} does not match 3×{}×{} input",
            config.image_h, config.image_w
        )));
    }
    let s = shape[0];
    let (gh, gw) = config.grid();
    let (p, d, n, t, heads, hd) = (
        config.patch_size,
        config.embed_dim,
        config.num_patches(),
        config.seq_len(),
        config.heads,
        config.head_dim(),
    );
    let r = config.register_tokens;

    // patchify: [S,3,H,W] → [S,3,gh,P,gw,P] → [S,gh,gw,3,P,P] → [S·N, 3·P·P]
    let x = g.reshape(slices, vec![s, 3, gh, p, gw, p])?;
    let x = g.permute(x, vec![0, 2, 4, 1, 3, 5])?;
    let patches = g.reshape(x, vec![s * n, 3 * p * p])?;

    let adapter_at = |target: &str| adapters.and_then(|a| a.get(target).copied());

    let emb = lora::apply_adapted(g, patches, bb.get("patch_embed.w"), adapter_at("patch_embed").as_ref())?;
    let emb = g.add(emb, bb.get("patch_embed.b"))?;
    let patch_tokens0 = g.reshape(emb, vec![s, n, d])?;

    // prefix tokens: class token then registers, tiled across slices
    let cls = g.reshape(bb.get("cls_token"), vec![1, 1, d])?;
    let mut prefix = g.concat(&vec![cls; s], 0)?; // [S,1,d]
    if r > 0 {
        let reg = g.reshape(bb.get("reg_tokens"), vec![1, r, d])?;
        let regs = g.concat(&vec![reg; s], 0)?;
        prefix = g.concat(&[prefix, regs], 1)?;
    }
    let mut tokens = g.concat(&[prefix, patch_tokens0], 1)?; // [S,T,d]
    tokens = g.add(tokens, bb.get("pos_embed"))?;

    let mut attentions = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let name = |part: &str| format!("block{i}.{part}");
        // attention sublayer (pre-norm)
        let normed = g.layer_norm(tokens, bb.get(&name("ln1.g")), bb.get(&name("ln1.b")))?;
        let flat = g.reshape(normed, vec![s * t, d])?;
        let heads_view = |g: &mut Graph<T>, v: VarId| -> Result<VarId> {
            let v = g.reshape(v, vec![s, t, heads, hd])?;
            let v = g.permute(v, vec![0, 2, 1, 3])?;
            g.reshape(v, vec![s * heads, t, hd])
        };
        let proj = |g: &mut Graph<T>, part: &str| -> Result<VarId> {
            let target = format!("block{i}.attn.{part}");
            let y = lora::apply_adapted(g, flat, bb.get(&name(&format!("attn.{part}.w"))), adapter_at(&target).as_ref())?;
            g.add(y, bb.get(&name(&format!("attn.{part}.b"))))
        };
        let q = proj(g, "q")?;
        let k = proj(g, "k")?;
        let v = proj(g, "v")?;
        let qh = heads_view(g, q)?;
        let kh = heads_view(g, k)?;
        let vh = heads_view(g, v)?;
        let kt = g.permute(kh, vec![0, 2, 1])?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?; // [S·h, T, T]
        attentions.push(attn);
        let ctx = g.matmul(attn, vh)?;
        let ctx = g.reshape(ctx, vec![s, heads, t, hd])?;
        let ctx = g.permute(ctx, vec![0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![s * t, d])?;
        let out = lora::apply_adapted(
            g,
            ctx,
            bb.get(&name("attn.out.w")),
            adapter_at(&format!("block{i}.attn.out")).as_ref(),
        )?;
        let out = g.add(out, bb.get(&name("attn.out.b")))?;
        let out = g.reshape(out, vec![s, t, d])?;
        tokens = g.add(tokens, out)?;

        // MLP sublayer (pre-norm, GELU)
        let normed = g.layer_norm(tokens, bb.get(&name("ln2.g")), bb.get(&name("ln2.b")))?;
        let flat = g.reshape(normed, vec![s * t, d])?;
        let h1 = g.matmul(flat, bb.get(&name("mlp.fc1.w")))?;
        let h1 = g.add(h1, bb.get(&name("mlp.fc1.b")))?;
        let h1 = g.gelu(h1)?;
        let h2 = g.matmul(h1, bb.get(&name("mlp.fc2.w")))?;
        let h2 = g.add(h2, bb.get(&name("mlp.fc2.b")))?;
        let h2 = g.reshape(h2, vec![s, t, d])?;
        tokens = g.add(tokens, h2)?;
    }

    let tokens = g.layer_norm(tokens, bb.get("final_ln.g"), bb.get("final_ln.b"))?;
    let cls_out = g.slice(tokens, 1, 0, 1)?;
    let class_tokens = g.reshape(cls_out, vec![s, d])?;
    let patch_tokens = g.slice(tokens, 1, 1 + r, n)?;

    Ok(VolumeEncodeResult {
        class_tokens,
        patch_tokens,
        attentions,
        slices: s,
    })
}

/// Convenience wrapper: encode one 3×H×W slice on a private graph and return
/// concrete tensors (class token d, patch tokens N×d, last-block attention
/// h×T×T).
pub struct SliceEncodeResult<T: Scalar> {
    pub class_token: Tensor<T>,
    pub patch_tokens: Tensor<T>,
    pub last_block_attention: Tensor<T>,
}

pub fn encode_slice<T: Scalar>(
    weights: &BackboneWeights<T>,
    slice: &Tensor<T>,
    adapters: Option<&crate::lora::LoraAdapterSet<T>>,
) -> Result<SliceEncodeResult<T>> {
    let config = &weights.config;
    if slice.shape() != [3, config.image_h, config.image_w] {
        return Err(AmcError::Contract(format!(
            "slice shape {:?} does not match 3×{}×{}",
            slice.shape(),
            config.image_h,
            config.image_w
        )));
    }
    let mut g = Graph::new();
    let bb = weights.bind(&mut g);
    let bound = adapters.map(|a| a.bind(&mut g, false));
    let stack = g.leaf(slice.reshaped(vec![1, 3, config.image_h, config.image_w])?, false);
    let enc = encode_volume(&mut g, config, &bb, stack, bound.as_ref())?;
    let (t, heads) = (config.seq_len(), config.heads);
    let last = *enc.attentions.last().expect("depth ≥ 1");
    Ok(SliceEncodeResult {
        class_token: g.value(enc.class_tokens).reshaped(vec![config.embed_dim])?,
        patch_tokens: g
            .value(enc.patch_tokens)
            .reshaped(vec![config.num_patches(), config.embed_dim])?,
        last_block_attention: g.value(last).reshaped(vec![heads, t, t])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::init_adapter_set;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            image_h: 16,
            image_w: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            register_tokens: 0,
            mlp_ratio: 2.0,
        }
    }

    fn rand_slice(config: &BackboneConfig, seed: u64) -> Tensor<f32> {
        AmcRng::split(seed, "slice").normal_tensor(vec![3, config.image_h, config.image_w], 1.0)
    }

    #[test]
    fn same_seed_bit_identical_weights_different_seed_differs() {
        let c = small_config();
        let a = init_random_backbone::<f32>(&c, 3).unwrap();
        let b = init_random_backbone::<f32>(&c, 3).unwrap();
        let other = init_random_backbone::<f32>(&c, 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn save_load_round_trip_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.amc3");
        let w = init_random_backbone::<f32>(&small_config(), 5).unwrap();
        save_backbone(&p, &w).unwrap();
        let loaded = load_backbone::<f32>(&p).unwrap();
        assert_eq!(loaded.checksum(), w.checksum());
        assert_eq!(loaded.config, w.config);
    }

    #[test]
    fn truncated_checkpoint_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.amc3");
        let w = init_random_backbone::<f32>(&small_config(), 5).unwrap();
        save_backbone(&p, &w).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_backbone::<f32>(&p), Err(AmcError::Integrity { .. })));
    }

    #[test]
    fn cross_precision_load_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.amc3");
        let w = init_random_backbone::<f64>(&small_config(), 5).unwrap();
        save_backbone(&p, &w).unwrap();
        assert!(load_backbone::<f32>(&p).is_err());
    }

    #[test]
    fn prepare_slices_shapes_and_zeroing() {
        // constant volume at mean[0] with unit std → all-zero slices
        let m = 0.37f64;
        let vol = Volume::new(Tensor::full(vec![1, 32, 32, 5], m as f32), [1.0; 3], "CECT").unwrap();
        let s = prepare_slices(&vol, 2, [m, m, m], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.shape(), &[5, 3, 32, 32]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prepare_slices_preserves_order_and_axis_choice() {
        // volume whose value equals its S index: slicing along S gives
        // constant slices in order
        let (h, w, sle) = (2, 2, 4);
        let mut data = vec![0.0f32; h * w * sle];
        for ih in 0..h {
            for iw in 0..w {
                for is in 0..sle {
                    data[(ih * w + iw) * sle + is] = is as f32;
                }
            }
        }
        let vol = Volume::new(Tensor::new(vec![1, h, w, sle], data).unwrap(), [1.0; 3], "CECT").unwrap();
        let s = prepare_slices(&vol, 2, [0.0; 3], [1.0; 3]).unwrap();
        for is in 0..sle {
            let sl = &s.data()[is * 3 * h * w..(is + 1) * 3 * h * w];
            assert!(sl.iter().all(|&v| v == is as f32));
        }
        // slicing along H gives W×S images
        let sh = prepare_slices(&vol, 0, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(sh.shape(), &[h, 3, w, sle]);
    }

    #[test]
    fn encode_slice_shapes_and_determinism() {
        let c = small_config();
        let w = init_random_backbone::<f32>(&c, 1).unwrap();
        let x = rand_slice(&c, 2);
        let r1 = encode_slice(&w, &x, None).unwrap();
        let r2 = encode_slice(&w, &x, None).unwrap();
        assert_eq!(r1.class_token.shape(), &[c.embed_dim]);
        assert_eq!(r1.patch_tokens.shape(), &[c.num_patches(), c.embed_dim]);
        assert_eq!(
            r1.last_block_attention.shape(),
            &[c.heads, c.seq_len(), c.seq_len()]
        );
        assert_eq!(r1.class_token, r2.class_token);
        assert_eq!(r1.patch_tokens, r2.patch_tokens);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = small_config();
        let w = init_random_backbone::<f32>(&c, 1).unwrap();
        let r = encode_slice(&w, &rand_slice(&c, 9), None).unwrap();
        let t = c.seq_len();
        for head in 0..c.heads {
            for row in 0..t {
                let base = (head * t + row) * t;
                let sum: f32 = r.last_block_attention.data()[base..base + t].iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
            }
        }
    }

    #[test]
    fn fresh_adapters_are_bit_identical_to_frozen() {
        let c = small_config();
        let w = init_random_backbone::<f32>(&c, 1).unwrap();
        let ad = init_adapter_set::<f32>(&c, 4, 16.0, 77).unwrap();
        let x = rand_slice(&c, 3);
        let plain = encode_slice(&w, &x, None).unwrap();
        let adapted = encode_slice(&w, &x, Some(&ad)).unwrap();
        assert_eq!(plain.class_token, adapted.class_token);
        assert_eq!(plain.patch_tokens, adapted.patch_tokens);
        assert_eq!(plain.last_block_attention, adapted.last_block_attention);
    }

    #[test]
    fn register_tokens_extend_sequence() {
        let mut c = small_config();
        c.register_tokens = 2;
        let w = init_random_backbone::<f32>(&c, 1).unwrap();
        let r = encode_slice(&w, &rand_slice(&c, 4), None).unwrap();
        assert_eq!(c.seq_len(), 1 + 2 + c.num_patches());
        assert_eq!(r.last_block_attention.shape()[1], c.seq_len());
        assert_eq!(r.patch_tokens.shape(), &[c.num_patches(), c.embed_dim]);
    }

    #[test]
    fn zero_positional_embeddings_give_patch_permutation_equivariance() {
        let c = small_config();
        let mut w = init_random_backbone::<f32>(&c, 1).unwrap();
        w.tensors.insert("pos_embed".into(), Tensor::zeros(vec![c.seq_len(), c.embed_dim]));
        // build a slice, then a patch-permuted slice (swap the two top patches)
        let x = rand_slice(&c, 5);
        let (p, hh, ww) = (c.patch_size, c.image_h, c.image_w);
        let mut swapped = x.clone();
        for ch in 0..3 {
            for r in 0..p {
                for cc in 0..p {
                    let i1 = (ch * hh + r) * ww + cc;
                    let i2 = (ch * hh + r) * ww + (cc + p);
                    swapped.data_mut().swap(i1, i2);
                }
            }
        }
        let a = encode_slice(&w, &x, None).unwrap();
        let b = encode_slice(&w, &swapped, None).unwrap();
        let n = c.num_patches();
        let d = c.embed_dim;
        // patch token rows 0 and 1 swap, others unchanged (up to f32 roundoff)
        let row = |t: &Tensor<f32>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        for i in 0..n {
            let j = match i {
                0 => 1,
                1 => 0,
                other => other,
            };
            let (ra, rb) = (row(&a.patch_tokens, i), row(&b.patch_tokens, j));
            for (u, v) in ra.iter().zip(&rb) {
                assert!((u - v).abs() < 1e-4, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let c = small_config();
        let w = init_random_backbone::<f32>(&c, 1).unwrap();
        let bad = Tensor::<f32>::zeros(vec![3, 8, 8]);
        assert!(encode_slice(&w, &bad, None).is_err());
    }
}
