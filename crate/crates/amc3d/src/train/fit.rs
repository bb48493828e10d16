//! Plugin training loop: frozen backbone, trainable low-rank adapters,
//! queries, head, and optional voxel decoder. Batch-accumulated AdamW with
//! per-epoch validation AUROC and best-checkpoint selection.

use std::collections::BTreeMap;

use crate::auxseg::{assemble_token_volume, decode_voxels, seg_loss, total_loss};
use crate::backbone::{self, BackboneWeights};
use crate::fusion::{forward_views, Activation};
use crate::io::manifest::{LabelMode, LoadedRecord};
use crate::io::plugin::TaskPlugin;
use crate::rng::AmcRng;
use crate::tensor::graph::Graph;
use crate::tensor::{Scalar, Tensor};
use crate::train::augment::AugmentPolicy;
use crate::train::metrics::compute_auroc;
use crate::train::optim::{AdamW, GroupConfig, HEAD_GROUP, LORA_GROUP};
use crate::train::{focal_loss_multiclass, focal_loss_multilabel, FocalLossConfig};
use crate::{AmcError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the auxiliary voxel loss; 0 disables the decoder path.
    pub lambda_seg: f64,
    pub focal: FocalLossConfig,
    pub augment: AugmentPolicy,
    pub lora_group: GroupConfig,
    pub head_group: GroupConfig,
    pub batch_size: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            seed: 7,
            lambda_seg: 1.0,
            focal: FocalLossConfig::default(),
            augment: AugmentPolicy::default(),
            lora_group: LORA_GROUP,
            head_group: HEAD_GROUP,
            batch_size: 8,
            patience: None,
            log: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AmcError::Contract("epochs and batch size must be ≥ 1".into()));
        }
        if self.lambda_seg < 0.0 {
            return Err(AmcError::Contract(format!(
                "lambda_seg must be ≥ 0, got {}",
                self.lambda_seg
            )));
        }
        self.focal.validate()?;
        self.augment.validate()?;
        self.lora_group.validate()?;
        self.head_group.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    /// Plugin holding the best-validation (or final) parameters.
    pub plugin: TaskPlugin<T>,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
}

/// Gradients of one record's loss with respect to the plugin parameters,
/// accumulated into `acc` by name.
fn accumulate_record<T: Scalar>(
    backbone_weights: &BackboneWeights<T>,
    plugin: &TaskPlugin<T>,
    record: &LoadedRecord<T>,
    label_mode: LabelMode,
    cfg: &TrainConfig,
    rng: &mut AmcRng,
    acc: &mut BTreeMap<String, Tensor<T>>,
) -> Result<f64> {
    let config = &backbone_weights.config;
    let mut g = Graph::new();
    let bb = backbone_weights.bind(&mut g);
    let bound = plugin.bind(&mut g, true);
    let mut stacks = Vec::with_capacity(record.views.len());
    let mut mask = None;
    for (i, vol) in record.views.iter().enumerate() {
        let (vol, m) = crate::train::augment::augment_volume(
            vol,
            if i == 0 { record.mask.as_ref() } else { None },
            &cfg.augment,
            rng,
        )?;
        if i == 0 {
            mask = m;
        }
        let axis = backbone::slice_axis_for(&vol, config)?;
        let prepared =
            backbone::prepare_slices(&vol, axis, backbone::IMAGENET_MEAN, backbone::IMAGENET_STD)?;
        stacks.push(g.leaf(prepared, false));
    }
    let out = forward_views(&mut g, &bb, config, &stacks, &bound)?;
    let cls = match label_mode {
        LabelMode::MultiLabel => {
            let targets =
                Tensor::from_f64_slice(vec![record.labels.len()], &record.labels.iter().map(|&l| l as f64).collect::<Vec<_>>())?;
            focal_loss_multilabel(&mut g, out.logits, &targets, &cfg.focal)?
        }
        LabelMode::MultiClass => {
            let class = record
                .labels
                .iter()
                .position(|&l| l == 1)
                .ok_or_else(|| AmcError::Contract(format!("record {} has no class", record.id)))?;
            focal_loss_multiclass(&mut g, out.logits, &[class], &cfg.focal)?
        }
    };
    let mut seg_losses = Vec::new();
    if cfg.lambda_seg > 0.0 {
        if let (Some(decoder), Some(mask)) = (&bound.decoder, &mask) {
            let f = assemble_token_volume(&mut g, out.encodes[0].patch_tokens, config.grid())?;
            let voxel_logits = decode_voxels(&mut g, f, decoder)?;
            let parts = seg_loss(&mut g, voxel_logits, &mask.labels, decoder.config.k_seg)?;
            seg_losses.push(parts.total);
        }
    }
    let loss = total_loss(&mut g, cls, &seg_losses, cfg.lambda_seg)?;
    g.backward(loss)?;
    for (name, var) in &bound.param_vars {
        let grad = g.grad(*var);
        match acc.get_mut(name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(grad.data()) {
                    *x = *x + *y;
                }
            }
            None => {
                acc.insert(name.clone(), grad);
            }
        }
    }
    g.value(loss).item().map(|v| v.to_f64())
}

/// Per-class probabilities for every record, in order.
pub fn predict_scores<T: Scalar>(
    backbone_weights: &BackboneWeights<T>,
    plugin: &TaskPlugin<T>,
    records: &[LoadedRecord<T>],
) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|rec| {
            let views: Vec<&_> = rec.views.iter().collect();
            let res = crate::fusion::classify_volume(&views, plugin, backbone_weights)?;
            let probs = plugin.head.probabilities(&res.logits)?;
            Ok(probs.data().iter().map(|&p| p.to_f64()).collect())
        })
        .collect()
}

/// Mean per-class AUROC of `scores` against the 0/1 labels; classes whose
/// validation labels are single-valued are skipped.
pub fn mean_auroc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Option<f64> {
    let k = scores.first()?.len();
    let mut aucs = Vec::new();
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c] == 1).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            if let Ok(a) = compute_auroc(&s, &l) {
                aucs.push(a);
            }
        }
    }
    if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    }
}

/// Fit the plugin on `train`, selecting the epoch with the best validation
/// AUROC (falling back to the final epoch when `val` is empty). The backbone
/// is never mutated: only names reported by the plugin are registered with
/// the optimizer, and only those receive updates.
pub fn train_plugin<T: Scalar>(
    backbone_weights: &BackboneWeights<T>,
    mut plugin: TaskPlugin<T>,
    train: &[LoadedRecord<T>],
    val: &[LoadedRecord<T>],
    label_mode: LabelMode,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(AmcError::Contract("training split is empty".into()));
    }
    if backbone_weights.fingerprint() != plugin.backbone_fingerprint {
        return Err(AmcError::Contract(
            "plugin was initialized against a different backbone".into(),
        ));
    }
    if matches!(label_mode, LabelMode::MultiClass) && plugin.head.activation != Activation::Softmax {
        return Err(AmcError::Contract(
            "multi-class labels require a softmax head".into(),
        ));
    }
    let mut params = plugin.named_params();
    let mut opt: AdamW<T> = AdamW::new();
    for (name, t) in &params {
        let group = if name.contains(".lora.") {
            cfg.lora_group
        } else {
            cfg.head_group
        };
        opt.register(name, t.shape().to_vec(), group)?;
    }
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor<T>>)> = None;
    let mut since_best = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut rng = AmcRng::split(cfg.seed, &format!("fit/epoch{epoch}"));
        let order = rng.permutation(train.len());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            for &i in chunk {
                epoch_loss += accumulate_record(
                    backbone_weights,
                    &plugin,
                    &train[i],
                    label_mode,
                    cfg,
                    &mut rng,
                    &mut acc,
                )?;
            }
            let inv = T::from_f64(1.0 / chunk.len() as f64);
            for t in acc.values_mut() {
                for x in t.data_mut() {
                    *x = *x * inv;
                }
            }
            opt.step(&mut params, &acc)?;
            plugin.set_named_params(&params)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_auroc = if val.is_empty() {
            None
        } else {
            let scores = predict_scores(backbone_weights, &plugin, val)?;
            let labels: Vec<Vec<u8>> = val.iter().map(|r| r.labels.clone()).collect();
            mean_auroc(&scores, &labels)
        };
        if cfg.log {
            match val_auroc {
                Some(a) => println!("epoch {epoch}: train_loss {train_loss:.4} val_auroc {a:.4}"),
                None => println!("epoch {epoch}: train_loss {train_loss:.4}"),
            }
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_auroc,
        });
        if let Some(a) = val_auroc {
            if best.as_ref().map_or(true, |(_, b, _)| a > *b) {
                best = Some((epoch, a, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    let (best_epoch, best_val_auroc) = match best {
        Some((e, a, p)) => {
            plugin.set_named_params(&p)?;
            (e, Some(a))
        }
        None => (logs.len(), None),
    };
    Ok(TrainOutcome {
        plugin,
        logs,
        best_epoch,
        best_val_auroc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::io::plugin::init_plugin;

    fn tiny_setup() -> (BackboneWeights<f32>, TaskPlugin<f32>) {
        let config = BackboneConfig {
            image_h: 16,
            image_w: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            register_tokens: 0,
            mlp_ratio: 2.0,
        };
        let bb = crate::backbone::init_random_backbone::<f32>(&config, 3).unwrap();
        let decoder =
            crate::auxseg::SegDecoderConfig::for_backbone(&config, 2, 4).unwrap();
        let plugin = init_plugin(
            "tiny",
            &bb,
            1,
            &["lesion".to_string()],
            Activation::Sigmoid,
            2,
            4.0,
            Some(decoder),
            5,
        )
        .unwrap();
        (bb, plugin)
    }

    fn tiny_records(n: usize, with_masks: bool) -> Vec<LoadedRecord<f32>> {
        let spec = crate::io::synth::SynthSpec {
            n,
            geometry: [16, 16, 4],
            radii: (2.0, 3.0),
            masks: with_masks,
            pos_rate: 0.5,
            ..Default::default()
        };
        let mut rng = AmcRng::split(17, "synth");
        (0..n)
            .map(|i| {
                let r = crate::io::synth::generate_record(&spec, &mut rng);
                LoadedRecord {
                    id: format!("r{i}"),
                    views: r.views,
                    labels: vec![r.positive as u8],
                    mask: r.mask,
                    lesion_boxes: r.boxes,
                }
            })
            .collect()
    }

    #[test]
    fn one_epoch_changes_only_plugin_params_and_reduces_loss() {
        let (bb, plugin) = tiny_setup();
        let before = bb.checksum();
        let records = tiny_records(8, false);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lambda_seg: 0.0,
            augment: AugmentPolicy::off(),
            log: false,
            ..Default::default()
        };
        let init_params = plugin.named_params();
        let out = train_plugin(&bb, plugin, &records, &[], LabelMode::MultiLabel, &cfg).unwrap();
        assert_eq!(bb.checksum(), before);
        let after = out.plugin.named_params();
        assert!(init_params.iter().any(|(n, t)| after[n] != *t));
        assert!(
            out.logs.last().unwrap().train_loss < out.logs[0].train_loss,
            "loss {:?}",
            out.logs
        );
    }

    #[test]
    fn maskless_records_leave_decoder_untouched() {
        let (bb, plugin) = tiny_setup();
        let records = tiny_records(4, false);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lambda_seg: 1.0,
            augment: AugmentPolicy::off(),
            ..Default::default()
        };
        let init_decoder = plugin.decoder.clone().unwrap();
        let out = train_plugin(&bb, plugin, &records, &[], LabelMode::MultiLabel, &cfg).unwrap();
        // no masks → AdamW sees exactly-zero decoder gradients, and with zero
        // first moments only weight decay may act; check weights only shrank
        let after = out.plugin.decoder.unwrap();
        for (name, t0) in &init_decoder.tensors {
            let t1 = &after.tensors[name];
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert!(
                    a.signum() == b.signum() && b.abs() <= a.abs() * (1.0 + 1e-6) || a.abs() < 1e-9,
                    "{name}: {a} -> {b}"
                );
            }
        }
    }

    #[test]
    fn masked_records_train_decoder() {
        let (bb, plugin) = tiny_setup();
        let records = tiny_records(4, true);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lambda_seg: 1.0,
            augment: AugmentPolicy::off(),
            ..Default::default()
        };
        let init_decoder = plugin.decoder.clone().unwrap();
        let out = train_plugin(&bb, plugin, &records, &[], LabelMode::MultiLabel, &cfg).unwrap();
        let after = out.plugin.decoder.unwrap();
        assert!(init_decoder
            .tensors
            .iter()
            .any(|(n, t)| after.tensors[n] != *t));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (bb, plugin) = tiny_setup();
        let records = tiny_records(6, false);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lambda_seg: 0.0,
            ..Default::default()
        };
        let a = train_plugin(&bb, plugin.clone(), &records, &[], LabelMode::MultiLabel, &cfg).unwrap();
        let b = train_plugin(&bb, plugin, &records, &[], LabelMode::MultiLabel, &cfg).unwrap();
        assert_eq!(a.plugin.named_params(), b.plugin.named_params());
        assert_eq!(a.logs, b.logs);
    }

    #[test]
    fn validation_selects_best_epoch() {
        let (bb, plugin) = tiny_setup();
        let records = tiny_records(8, false);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lambda_seg: 0.0,
            augment: AugmentPolicy::off(),
            ..Default::default()
        };
        let out = train_plugin(
            &bb,
            plugin,
            &records[..6],
            &records[6..],
            LabelMode::MultiLabel,
            &cfg,
        )
        .unwrap();
        if let Some(best) = out.best_val_auroc {
            for log in &out.logs {
                if let Some(a) = log.val_auroc {
                    assert!(best >= a);
                }
            }
            assert!(out.logs[out.best_epoch - 1].val_auroc == Some(best));
        }
    }

    #[test]
    fn wrong_backbone_is_rejected() {
        let (bb, plugin) = tiny_setup();
        let other = crate::backbone::init_random_backbone::<f32>(&bb.config, 99).unwrap();
        let records = tiny_records(2, false);
        let cfg = TrainConfig::default();
        assert!(train_plugin(&other, plugin, &records, &[], LabelMode::MultiLabel, &cfg).is_err());
    }
}
