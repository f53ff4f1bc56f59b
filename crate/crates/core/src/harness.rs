//! Experiment orchestration: the training loop, k-fold cross-validation, the
//! remove-and-retrain sweep, pseudo-signal tracking and the lambda sweep.
//!
//! Individual training runs are single-threaded and deterministic under
//! their seed; the fold/retrain/sweep drivers fan independent runs out in
//! parallel and join before aggregating, so parallel and sequential
//! execution produce identical artifacts.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Fnv1a, GroundTruthMask, MtsDataset};
use crate::encode::{encode_dataset, EncodedStack, EncoderConfig};
use crate::error::{CafoError, Result};
use crate::metrics::{
    classification_accuracy, global_importance, gt_agreement, rank_correlations, rank_descending,
    GtAgreement, RoarCurve,
};
use crate::model::{
    insert_params, model_forward, save_checkpoint, CheckpointHeader, ModelConfig, ModelParams,
};
use crate::parallel::par_map_indexed;
use crate::qr::{class_prototypes, class_prototypes_graph, qr_ortho_loss, total_loss_graph};
use crate::rng::{seed_stream, splitmix64};
use crate::synth::{inject_pseudo, PseudoKind};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor};

/// Abort training after this many consecutive non-finite batch losses.
const DIVERGENCE_PATIENCE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 0.002,
            weight_decay: 0.0,
            lambda: 1.0,
            seed: 42,
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(CafoError::InvalidConfig("epochs and batch size must be >= 1".into()));
        }
        if self.lambda < 0.0 || self.lr <= 0.0 {
            return Err(CafoError::InvalidConfig("need lr > 0 and lambda >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Mean |R_ij| (i < j) of the validation prototype matrix.
    pub val_qr_offdiag: f64,
}

/// Everything a single fold run produces.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub fold_id: usize,
    pub feature_names: Vec<String>,
    pub epochs: Vec<EpochStats>,
    /// Per-epoch GI snapshot over the validation split.
    pub gi_trajectory: Vec<Vec<f64>>,
    /// Final attention vectors on the shared test split, shape [n_test, D].
    pub test_attentions: Tensor,
    pub test_labels: Vec<usize>,
    pub test_accuracy: f64,
    pub params: ModelParams,
    pub config: TrainConfig,
}

impl RunRecord {
    /// GI of the final test attentions.
    pub fn test_gi(&self) -> Vec<f64> {
        global_importance(&self.test_attentions).expect("non-empty attentions").gi
    }

    pub fn test_gi_rank(&self) -> Vec<usize> {
        global_importance(&self.test_attentions).expect("non-empty attentions").rank_desc
    }

    pub fn final_val_offdiag(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_qr_offdiag)
    }
}

/// Mean per-fold GI first, then rank.
pub fn averaged_gi_rank(records: &[RunRecord]) -> (Vec<f64>, Vec<usize>) {
    let d = records[0].test_attentions.shape()[1];
    let mut mean = vec![0.0; d];
    for r in records {
        for (m, v) in mean.iter_mut().zip(r.test_gi()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= records.len() as f64;
    }
    let rank = rank_descending(&mean);
    (mean, rank)
}

// ----------------------------------------------------------------------
// encoding cache
// ----------------------------------------------------------------------

const ENC_MAGIC: &[u8; 8] = b"CAFOENC1";

#[derive(Serialize, Deserialize)]
struct EncHeader {
    n: usize,
    d: usize,
    l: usize,
}

fn cache_path(ds: &MtsDataset, enc: &EncoderConfig) -> Option<PathBuf> {
    let dir = std::env::var_os("CAFO_CACHE_DIR")?;
    let mut h = Fnv1a::new();
    h.write_u64(ds.content_hash());
    h.write_bytes(enc.cache_key().as_bytes());
    Some(PathBuf::from(dir).join(format!("enc_{:016x}.bin", h.finish())))
}

fn write_cache(path: &Path, stacks: &[EncodedStack]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let header = EncHeader {
        n: stacks.len(),
        d: stacks[0].num_channels(),
        l: stacks[0].side(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(ENC_MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for s in stacks {
            for &v in s.data.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_cache(path: &Path, enc: &EncoderConfig) -> Result<Vec<EncodedStack>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != ENC_MAGIC {
        return Err(CafoError::DataFormat("bad encoding cache file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: EncHeader = serde_json::from_slice(&bytes[16..16 + hlen])?;
    let payload = &bytes[16 + hlen..];
    let per = header.d * header.l * header.l;
    if payload.len() != header.n * per * 8 {
        return Err(CafoError::DataFormat("encoding cache length mismatch".into()));
    }
    let mut stacks = Vec::with_capacity(header.n);
    for i in 0..header.n {
        let mut data = Vec::with_capacity(per);
        for j in 0..per {
            let off = (i * per + j) * 8;
            data.push(f64::from_le_bytes(payload[off..off + 8].try_into().unwrap()));
        }
        stacks.push(EncodedStack {
            data: Tensor::from_parts(vec![header.d, header.l, header.l], data),
            encoder: enc.kind,
            instance_id: i,
        });
    }
    Ok(stacks)
}

/// Encode a dataset, reusing the on-disk cache when `CAFO_CACHE_DIR` is set.
pub fn encode_with_cache(ds: &MtsDataset, enc: &EncoderConfig) -> Result<Vec<EncodedStack>> {
    if let Some(path) = cache_path(ds, enc) {
        if path.exists() {
            if let Ok(stacks) = read_cache(&path, enc) {
                if stacks.len() == ds.len() {
                    return Ok(stacks);
                }
            }
        }
        let stacks = encode_dataset(ds, enc)?;
        if !stacks.is_empty() {
            write_cache(&path, &stacks)?;
        }
        Ok(stacks)
    } else {
        encode_dataset(ds, enc)
    }
}

// ----------------------------------------------------------------------
// single training run
// ----------------------------------------------------------------------

/// Copy a set of stacks into one [B, D, L, L] batch tensor.
fn assemble_batch(stacks: &[EncodedStack], idx: &[usize]) -> Tensor {
    let d = stacks[idx[0]].num_channels();
    let l = stacks[idx[0]].side();
    let per = d * l * l;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(stacks[i].data.data());
    }
    Tensor::from_parts(vec![idx.len(), d, l, l], data)
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Inference over a set of instances in batches.
/// Returns (attention matrix [N, D], predictions, mean cross-entropy).
fn evaluate(
    params: &ModelParams,
    stacks: &[EncodedStack],
    idx: &[usize],
    labels: &[usize],
    batch_size: usize,
) -> Result<(Tensor, Vec<usize>, f64)> {
    let d = stacks[idx[0]].num_channels();
    let mut attn_data = Vec::with_capacity(idx.len() * d);
    let mut preds = Vec::with_capacity(idx.len());
    let mut loss_sum = 0.0;
    for chunk in idx.chunks(batch_size) {
        let mut g = Graph::inference();
        let stack = g.constant(assemble_batch(stacks, chunk));
        let vars = insert_params(&mut g, params);
        let (logits, attn) = model_forward(&mut g, stack, params, &vars)?;
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let ce = g.softmax_cross_entropy(logits, &batch_labels)?;
        loss_sum += g.value(ce).data()[0] * chunk.len() as f64;
        preds.extend(argmax_rows(g.value(logits)));
        attn_data.extend_from_slice(g.value(attn).data());
    }
    Ok((
        Tensor::from_parts(vec![idx.len(), d], attn_data),
        preds,
        loss_sum / idx.len() as f64,
    ))
}

struct TrainedModel {
    params: ModelParams,
    epochs: Vec<EpochStats>,
    gi_trajectory: Vec<Vec<f64>>,
}

/// Mini-batch training over the given train indices, with optional per-epoch
/// validation tracking. The QR term is dropped when fewer than two feature
/// columns remain (nothing to orthogonalize against).
fn train_loop(
    stacks: &[EncodedStack],
    labels: &[usize],
    train_idx: &[usize],
    val_idx: Option<&[usize]>,
    num_classes: usize,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let d = stacks[train_idx[0]].num_channels();
    let mut model_cfg = cfg.model.clone();
    model_cfg.backbone.num_classes = num_classes;
    let mut params = ModelParams::init(&model_cfg, d, run_seed)?;
    let lambda = if d >= 2 { cfg.lambda } else { 0.0 };
    let adamw_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(adamw_cfg, &params.tensors);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut gi_trajectory = Vec::new();
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut diverged_streak = 0usize;

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = seed_stream(run_seed, 0x5348 + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hit_sum = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let stack = g.constant(assemble_batch(stacks, chunk));
            let vars = insert_params(&mut g, &params);
            let (logits, attn) = model_forward(&mut g, stack, &params, &vars)?;
            let (proto, _) = class_prototypes_graph(&mut g, attn, &batch_labels)?;
            let loss = total_loss_graph(&mut g, logits, &batch_labels, proto, lambda)?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                diverged_streak += 1;
                if diverged_streak >= DIVERGENCE_PATIENCE {
                    return Err(CafoError::Diverged { epoch, batches: diverged_streak });
                }
                continue; // skip the update, keep the streak
            }
            diverged_streak = 0;
            let preds = argmax_rows(g.value(logits));
            hit_sum += preds
                .iter()
                .zip(&batch_labels)
                .filter(|(p, y)| p == y)
                .count();
            loss_sum += loss_value * chunk.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Option<Tensor>> =
                vars.vars.iter().map(|&v| g.take_grad(v)).collect();
            drop(g);
            opt.step(&mut params.tensors, &grads)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let train_acc = hit_sum as f64 / train_idx.len() as f64;
        let (val_loss, val_acc, val_qr_offdiag) = match val_idx {
            Some(val_idx) if !val_idx.is_empty() => {
                let val_labels_all = labels;
                let (attn, preds, ce) =
                    evaluate(&params, stacks, val_idx, val_labels_all, cfg.batch_size)?;
                let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
                let acc = classification_accuracy(&preds, &val_labels);
                let offdiag = if d >= 2 {
                    let proto = class_prototypes(&attn, &val_labels)?;
                    qr_ortho_loss(&proto.matrix)?
                } else {
                    0.0
                };
                gi_trajectory.push(global_importance(&attn)?.gi);
                (ce, acc, offdiag)
            }
            _ => (f64::NAN, f64::NAN, 0.0),
        };
        epochs.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            val_qr_offdiag,
        });
    }
    Ok(TrainedModel { params, epochs, gi_trajectory })
}

/// Train on all folds except `fold_id`, validating on `fold_id`, scoring the
/// shared test split at the end.
pub fn train_fold(
    train: &MtsDataset,
    test: &MtsDataset,
    train_stacks: &[EncodedStack],
    test_stacks: &[EncodedStack],
    fold_id: usize,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let train_idx: Vec<usize> =
        (0..train.len()).filter(|&i| train.folds[i] != fold_id).collect();
    let val_idx: Vec<usize> =
        (0..train.len()).filter(|&i| train.folds[i] == fold_id).collect();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(CafoError::InvalidConfig(format!(
            "fold {} leaves an empty train or validation split",
            fold_id
        )));
    }
    let run_seed = splitmix64(cfg.seed ^ splitmix64(fold_id as u64 + 1));
    let trained = train_loop(
        train_stacks,
        &train.labels,
        &train_idx,
        Some(&val_idx),
        train.num_classes,
        cfg,
        run_seed,
    )?;
    let test_idx: Vec<usize> = (0..test.len()).collect();
    let (test_attn, test_preds, _) =
        evaluate(&trained.params, test_stacks, &test_idx, &test.labels, cfg.batch_size)?;
    let test_accuracy = classification_accuracy(&test_preds, &test.labels);
    Ok(RunRecord {
        fold_id,
        feature_names: train.feature_names.clone(),
        epochs: trained.epochs,
        gi_trajectory: trained.gi_trajectory,
        test_attentions: test_attn,
        test_labels: test.labels.clone(),
        test_accuracy,
        params: trained.params,
        config: cfg.clone(),
    })
}

/// One run per fold id present in the training split; every run scores the
/// same held-out test split. Runs execute in parallel.
pub fn cross_validate(
    train: &MtsDataset,
    test: &MtsDataset,
    cfg: &TrainConfig,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let fold_ids = train.fold_ids();
    if fold_ids.len() < 2 {
        return Err(CafoError::InvalidConfig("cross-validation needs >= 2 folds".into()));
    }
    let train_stacks = encode_with_cache(train, &cfg.encoder)?;
    let test_stacks = encode_with_cache(test, &cfg.encoder)?;
    let results = par_map_indexed(fold_ids.len(), |k| {
        train_fold(train, test, &train_stacks, &test_stacks, fold_ids[k], cfg)
    });
    results.into_iter().collect()
}

// ----------------------------------------------------------------------
// remove-and-retrain
// ----------------------------------------------------------------------

/// For every removal count d = 0..D-1 and both orderings (truth = descending
/// importance, inverse = ascending), drop the top-d features from train and
/// test, retrain from scratch on the full training split, and record test
/// accuracy. Feature removal selects encoder channels, which is equivalent to
/// dropping columns before encoding because both encoders are per-feature.
pub fn roar(
    train: &MtsDataset,
    test: &MtsDataset,
    cfg: &TrainConfig,
    gi_rank: &[usize],
) -> Result<RoarCurve> {
    cfg.validate()?;
    let d = train.num_features();
    if gi_rank.len() != d {
        return Err(CafoError::InvalidConfig(format!(
            "ranking of length {} for {} features",
            gi_rank.len(),
            d
        )));
    }
    let mut seen = vec![false; d];
    for &f in gi_rank {
        if f >= d || seen[f] {
            return Err(CafoError::InvalidConfig("ranking must be a permutation".into()));
        }
        seen[f] = true;
    }
    let train_stacks = encode_with_cache(train, &cfg.encoder)?;
    let test_stacks = encode_with_cache(test, &cfg.encoder)?;
    let run_seed = splitmix64(cfg.seed ^ 0x524f_4152);
    let inverse_rank: Vec<usize> = gi_rank.iter().rev().copied().collect();

    // 2*D retrains: run index r encodes (ordering, removal count)
    let accs = par_map_indexed(2 * d, |r| -> Result<f64> {
        let (ordering, removed_count) = (r / d, r % d);
        let rank = if ordering == 0 { gi_rank } else { &inverse_rank };
        let removed: Vec<usize> = rank[..removed_count].to_vec();
        let keep: Vec<usize> = (0..d).filter(|j| !removed.contains(j)).collect();
        let sub_train: Vec<EncodedStack> =
            train_stacks.iter().map(|s| s.select_channels(&keep)).collect();
        let sub_test: Vec<EncodedStack> =
            test_stacks.iter().map(|s| s.select_channels(&keep)).collect();
        let train_idx: Vec<usize> = (0..train.len()).collect();
        let trained = train_loop(
            &sub_train,
            &train.labels,
            &train_idx,
            None,
            train.num_classes,
            cfg,
            run_seed,
        )?;
        let test_idx: Vec<usize> = (0..test.len()).collect();
        let (_, preds, _) =
            evaluate(&trained.params, &sub_test, &test_idx, &test.labels, cfg.batch_size)?;
        Ok(classification_accuracy(&preds, &test.labels))
    });
    let mut truth_acc = Vec::with_capacity(d);
    let mut inverse_acc = Vec::with_capacity(d);
    for (r, acc) in accs.into_iter().enumerate() {
        if r < d {
            truth_acc.push(acc?);
        } else {
            inverse_acc.push(acc?);
        }
    }
    let curve = RoarCurve { removed: (0..d).collect(), truth_acc, inverse_acc };
    curve.validate()?;
    Ok(curve)
}

// ----------------------------------------------------------------------
// pseudo-signal experiment
// ----------------------------------------------------------------------

pub struct PseudoOutcome {
    pub records: Vec<RunRecord>,
    /// Column indices of the injected features in the widened dataset.
    pub pseudo_indices: Vec<usize>,
}

/// Inject label-independent pseudo features into both splits, then run the
/// usual cross-validation; GI trajectories include the injected columns.
pub fn pseudo_experiment(
    train: &MtsDataset,
    test: &MtsDataset,
    cfg: &TrainConfig,
    kinds: &[PseudoKind],
) -> Result<PseudoOutcome> {
    let d = train.num_features();
    let train_injected = inject_pseudo(train, kinds, splitmix64(cfg.seed ^ 1))?;
    let test_injected = inject_pseudo(test, kinds, splitmix64(cfg.seed ^ 2))?;
    let records = cross_validate(&train_injected, &test_injected, cfg)?;
    Ok(PseudoOutcome {
        records,
        pseudo_indices: (d..d + kinds.len()).collect(),
    })
}

// ----------------------------------------------------------------------
// lambda sweep
// ----------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_test_acc: f64,
    pub agreement: Option<GtAgreement>,
    pub spearman: f64,
    pub kendall: f64,
}

/// Aggregate ground-truth agreement of one run set: CWRI from each fold's
/// test prototypes, scored per fold, averaged.
pub fn aggregate_agreement(
    records: &[RunRecord],
    gt: &GroundTruthMask,
) -> Result<GtAgreement> {
    let mut f1 = 0.0;
    let mut jaccard = 0.0;
    let mut iacc = 0.0;
    let mut last_variant = crate::metrics::GtVariant::A;
    for r in records {
        let a = fold_agreement(r, gt)?;
        f1 += a.f1;
        jaccard += a.jaccard;
        iacc += a.iacc;
        last_variant = a.variant;
    }
    let n = records.len() as f64;
    Ok(GtAgreement {
        f1: f1 / n,
        jaccard: jaccard / n,
        iacc: iacc / n,
        variant: last_variant,
    })
}

/// CWRI agreement of a single fold's test attentions.
pub fn fold_agreement(record: &RunRecord, gt: &GroundTruthMask) -> Result<GtAgreement> {
    let proto = class_prototypes(&record.test_attentions, &record.test_labels)?;
    let cwri = crate::metrics::cwri(&proto.matrix)?;
    gt_agreement(&cwri.binarized, gt)
}

/// Pairwise GI rank consistency across a run set's folds.
pub fn gi_consistency(records: &[RunRecord]) -> Result<(f64, f64)> {
    let ranks: Vec<Vec<usize>> = records.iter().map(|r| r.test_gi_rank()).collect();
    rank_correlations(&ranks)
}

/// One cross-validated run set per lambda; reports mean test accuracy,
/// ground-truth agreement (when ground truth is available) and GI rank
/// consistency.
pub fn lambda_sweep(
    train: &MtsDataset,
    test: &MtsDataset,
    gt: Option<&GroundTruthMask>,
    cfg: &TrainConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(CafoError::InvalidConfig("lambda list must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut run_cfg = cfg.clone();
        run_cfg.lambda = lambda;
        let records = cross_validate(train, test, &run_cfg)?;
        let mean_test_acc =
            records.iter().map(|r| r.test_accuracy).sum::<f64>() / records.len() as f64;
        let agreement = match gt {
            Some(gt) => Some(aggregate_agreement(&records, gt)?),
            None => None,
        };
        let (spearman, kendall) = gi_consistency(&records)?;
        rows.push(SweepRow { lambda, mean_test_acc, agreement, spearman, kendall });
    }
    Ok(rows)
}

// ----------------------------------------------------------------------
// run directory artifacts
// ----------------------------------------------------------------------

/// Write `config.json`, `metrics.csv`, `gi_trajectory.csv`,
/// `attentions_test.bin` (+ json manifest) and `checkpoint.bin` into `dir`.
pub fn write_run_dir(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config = serde_json::json!({
        "fold_id": record.fold_id,
        "train": record.config,
    });
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&config)?)?;

    let mut metrics = String::from("epoch,train_loss,train_acc,val_loss,val_acc,val_qr_offdiag\n");
    for e in &record.epochs {
        metrics.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.val_qr_offdiag
        ));
    }
    fs::write(dir.join("metrics.csv"), metrics)?;

    let mut traj = String::from("epoch");
    for name in &record.feature_names {
        traj.push_str(&format!(",gi_{}", name));
    }
    traj.push('\n');
    for (epoch, gi) in record.gi_trajectory.iter().enumerate() {
        traj.push_str(&format!("{}", epoch));
        for v in gi {
            traj.push_str(&format!(",{}", v));
        }
        traj.push('\n');
    }
    fs::write(dir.join("gi_trajectory.csv"), traj)?;

    let shape = record.test_attentions.shape();
    let manifest = serde_json::json!({
        "n": shape[0],
        "d": shape[1],
        "labels": record.test_labels,
        "feature_names": record.feature_names,
        "test_accuracy": record.test_accuracy,
    });
    fs::write(dir.join("attentions_test.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut bin = Vec::with_capacity(record.test_attentions.len() * 4);
    for &v in record.test_attentions.data() {
        bin.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(dir.join("attentions_test.bin"), bin)?;

    let header = CheckpointHeader {
        version: 1,
        epoch: record.epochs.len(),
        seed: record.config.seed,
        in_features: record.params.in_features,
        model: record.params.cfg.clone(),
    };
    save_checkpoint(&dir.join("checkpoint.bin"), &header, &record.params)?;
    Ok(())
}

/// Read back the test attention matrix and labels written by [`write_run_dir`].
pub fn read_run_attentions(dir: &Path) -> Result<(Tensor, Vec<usize>, Vec<String>, f64)> {
    let manifest_path = dir.join("attentions_test.json");
    if !manifest_path.exists() {
        return Err(CafoError::MissingInput(manifest_path.display().to_string()));
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let n = manifest["n"].as_u64().unwrap_or(0) as usize;
    let d = manifest["d"].as_u64().unwrap_or(0) as usize;
    let labels: Vec<usize> = serde_json::from_value(manifest["labels"].clone())?;
    let feature_names: Vec<String> = serde_json::from_value(manifest["feature_names"].clone())?;
    let test_accuracy = manifest["test_accuracy"].as_f64().unwrap_or(f64::NAN);
    let bin_path = dir.join("attentions_test.bin");
    if !bin_path.exists() {
        return Err(CafoError::MissingInput(bin_path.display().to_string()));
    }
    let bytes = fs::read(bin_path)?;
    if bytes.len() != n * d * 4 {
        return Err(CafoError::DataFormat("attention payload length mismatch".into()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((Tensor::from_parts(vec![n, d], data), labels, feature_names, test_accuracy))
}

pub fn write_roar_csv(path: &Path, curve: &RoarCurve) -> Result<()> {
    let mut out = String::from("removed,truth_acc,inverse_acc\n");
    for i in 0..curve.removed.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            curve.removed[i], curve.truth_acc[i], curve.inverse_acc[i]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_roar_csv(path: &Path) -> Result<RoarCurve> {
    let text = fs::read_to_string(path)
        .map_err(|_| CafoError::MissingInput(path.display().to_string()))?;
    let mut removed = Vec::new();
    let mut truth_acc = Vec::new();
    let mut inverse_acc = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CafoError::DataFormat(format!("roar csv line {}", i + 1)));
        }
        removed.push(
            fields[0]
                .parse()
                .map_err(|_| CafoError::DataFormat("bad removed count".into()))?,
        );
        truth_acc.push(
            fields[1]
                .parse()
                .map_err(|_| CafoError::DataFormat("bad truth accuracy".into()))?,
        );
        inverse_acc.push(
            fields[2]
                .parse()
                .map_err(|_| CafoError::DataFormat("bad inverse accuracy".into()))?,
        );
    }
    let curve = RoarCurve { removed, truth_acc, inverse_acc };
    curve.validate()?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_squidgame, SquidGameConfig};

    fn tiny_bench() -> crate::data::Benchmark {
        gen_squidgame(&SquidGameConfig {
            n_per_class: 20,
            num_folds: 2,
            ..SquidGameConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            model: ModelConfig {
                backbone: crate::model::BackboneConfig {
                    conv_blocks: vec![crate::model::ConvBlock {
                        out_channels: 4,
                        kernel_size: 3,
                        stride: 2,
                    }],
                    hidden_width: None,
                    num_classes: 3,
                },
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cross_validate_is_deterministic_and_fold_disjoint() {
        let bench = tiny_bench();
        let cfg = tiny_cfg();
        let a = cross_validate(&bench.train, &bench.test, &cfg).unwrap();
        let b = cross_validate(&bench.train, &bench.test, &cfg).unwrap();
        assert_eq!(a.len(), 2);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.epochs, rb.epochs);
            assert_eq!(ra.test_attentions, rb.test_attentions);
            assert_eq!(ra.test_accuracy, rb.test_accuracy);
            assert_eq!(ra.params, rb.params);
        }
        // every instance appears in exactly one fold's validation split
        let folds = &bench.train.folds;
        for &f in folds {
            assert!(f < 2);
        }
    }

    #[test]
    fn lambda_zero_and_one_share_first_forward() {
        // identical seeds: the first batch forward is identical; parameters
        // diverge only through the loss term
        let bench = tiny_bench();
        let mut cfg = tiny_cfg();
        cfg.lambda = 0.0;
        let a = cross_validate(&bench.train, &bench.test, &cfg).unwrap();
        cfg.lambda = 1.0;
        let b = cross_validate(&bench.train, &bench.test, &cfg).unwrap();
        // same init, same data order; different training signal
        assert_ne!(a[0].params, b[0].params);
        assert_eq!(a[0].fold_id, b[0].fold_id);
    }

    #[test]
    fn gi_trajectory_has_one_snapshot_per_epoch() {
        let bench = tiny_bench();
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        let records = cross_validate(&bench.train, &bench.test, &cfg).unwrap();
        for r in &records {
            assert_eq!(r.gi_trajectory.len(), 2);
            assert_eq!(r.gi_trajectory[0].len(), 30);
            assert_eq!(r.epochs.len(), 2);
        }
    }

    #[test]
    fn roar_curve_shares_baseline_point() {
        let bench = tiny_bench();
        // shrink to a few features to keep the retrain count small
        let keep: Vec<usize> = (4..30).collect();
        let train = bench.train.without_features(&keep).unwrap();
        let test = bench.test.without_features(&keep).unwrap();
        let cfg = tiny_cfg();
        let curve = roar(&train, &test, &cfg, &[0, 1, 2, 3]).unwrap();
        assert_eq!(curve.removed, vec![0, 1, 2, 3]);
        assert_eq!(curve.truth_acc[0], curve.inverse_acc[0]);

        assert!(roar(&train, &test, &cfg, &[0, 1, 2]).is_err());
        assert!(roar(&train, &test, &cfg, &[0, 1, 2, 2]).is_err());
    }

    #[test]
    fn pseudo_experiment_widens_gi() {
        let bench = tiny_bench();
        let cfg = tiny_cfg();
        let out = pseudo_experiment(
            &bench.train,
            &bench.test,
            &cfg,
            &[PseudoKind::WhiteNoise, PseudoKind::Sinusoid],
        )
        .unwrap();
        assert_eq!(out.pseudo_indices, vec![30, 31]);
        assert_eq!(out.records[0].gi_trajectory[0].len(), 32);
        // zero kinds: plain run
        let plain = pseudo_experiment(&bench.train, &bench.test, &cfg, &[]).unwrap();
        let direct = cross_validate(&bench.train, &bench.test, &cfg).unwrap();
        assert_eq!(plain.records[0].epochs, direct[0].epochs);
    }

    #[test]
    fn run_dir_round_trip() {
        let bench = tiny_bench();
        let cfg = tiny_cfg();
        let records = cross_validate(&bench.train, &bench.test, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("fold_0");
        write_run_dir(&run_dir, &records[0]).unwrap();
        for file in [
            "config.json",
            "metrics.csv",
            "gi_trajectory.csv",
            "attentions_test.bin",
            "attentions_test.json",
            "checkpoint.bin",
        ] {
            assert!(run_dir.join(file).exists(), "{file} missing");
        }
        let (attn, labels, names, acc) = read_run_attentions(&run_dir).unwrap();
        assert_eq!(attn.shape(), records[0].test_attentions.shape());
        assert_eq!(labels, records[0].test_labels);
        assert_eq!(names.len(), 30);
        assert!((acc - records[0].test_accuracy).abs() < 1e-12);
    }

    #[test]
    fn encoding_cache_round_trip() {
        let bench = tiny_bench();
        let dir = tempfile::tempdir().unwrap();
        // the cache env var is process-global; run both paths explicitly
        let enc = EncoderConfig::default();
        let fresh = encode_dataset(&bench.test, &enc).unwrap();
        let path = dir.path().join("enc_test.bin");
        write_cache(&path, &fresh).unwrap();
        let cached = read_cache(&path, &enc).unwrap();
        assert_eq!(fresh.len(), cached.len());
        for (a, b) in fresh.iter().zip(&cached) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn roar_csv_round_trip() {
        let curve = RoarCurve {
            removed: vec![0, 1, 2],
            truth_acc: vec![0.9, 0.5, 0.3],
            inverse_acc: vec![0.9, 0.85, 0.8],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roar_curve.csv");
        write_roar_csv(&path, &curve).unwrap();
        assert_eq!(read_roar_csv(&path).unwrap(), curve);
    }
}
