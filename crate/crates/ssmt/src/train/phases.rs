//! The two training phases.
//!
//! Phase 1 trains the encoder and reconstruction head on images alone
//! (masks ignored, every other parameter bit-frozen). Phase 2 jointly
//! optimizes all enabled branches on nodule-labeled data. Both loops are
//! fully deterministic under a fixed seed: batch order, augmentation, and
//! initialization each draw from their own derived RNG stream, and every
//! reduction runs in a fixed order.

use crate::autodiff::{adam_step, cosine_lr, AdamHyper, AdamState, Tape, Tensor, Var};
use crate::data::augment::{augment, AugmentationConfig};
use crate::data::UltrasoundSample;
use crate::error::{Result, SsmtError};
use crate::eval::{dsc, iou, threshold_probs};
use crate::model::params::Binding;
use crate::model::{pretrain_trainable, SsmtModel, TaskSet};
use crate::rng::rng_for;
use crate::train::checkpoint::{self, RunMeta};
use crate::train::losses::{
    charbonnier, dice_loss, size_loss, total_loss, AblationFlags, LossTerms, LossWeights,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const METRICS_CSV_HEADER: &str =
    "epoch,step,lr,loss_total,loss_nodule,loss_gland,loss_size,loss_rec,val_iou,val_dsc";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Supervised,
}

/// Budget and optimizer settings for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub lr_min: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Validate every this many epochs (the final epoch always validates).
    pub val_every: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            phase: Phase::Supervised,
            epochs: 10,
            batch_size: 8,
            lr0: 1e-3,
            lr_min: 1e-6,
            weight_decay: 0.01,
            seed: 42,
            val_every: 1,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SsmtError::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return fail("epochs, batch_size, val_every must be at least 1".to_string());
        }
        if !(self.lr0.is_finite() && self.lr_min.is_finite() && self.weight_decay.is_finite()) {
            return fail("learning rates and weight decay must be finite".to_string());
        }
        if self.lr0 < 0.0 || self.lr_min < 0.0 || self.weight_decay < 0.0 {
            return fail("learning rates and weight decay must be non-negative".to_string());
        }
        if self.lr_min > self.lr0 {
            return fail(format!("lr_min {} exceeds lr0 {}", self.lr_min, self.lr0));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

/// Mutable training context returned to the caller and serializable into a
/// checkpoint. RNG needs no state here: every stream re-derives from
/// (seed, label, coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub meta: RunMeta,
    pub adam: BTreeMap<String, AdamState>,
}

impl TrainState {
    pub fn fresh() -> Self {
        TrainState {
            meta: RunMeta::default(),
            adam: BTreeMap::new(),
        }
    }
}

/// Unweighted per-term epoch means; a term is absent when no batch produced
/// it (branch disabled or no labels for it).
#[derive(Debug, Clone, Copy, Default)]
struct EpochMeans {
    nodule: Option<f64>,
    gland: Option<f64>,
    size: Option<f64>,
    rec: Option<f64>,
}

#[derive(Debug, Default)]
struct TermAccum {
    sum: f64,
    count: usize,
}

impl TermAccum {
    fn push(&mut self, v: f32) {
        self.sum += v as f64;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

fn check_samples(samples: &[UltrasoundSample], side: usize, need_nodule: bool) -> Result<()> {
    if samples.is_empty() {
        return Err(SsmtError::Dataset("no training samples".to_string()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.h != side || s.w != side {
            return Err(SsmtError::Dataset(format!(
                "sample {i} is {}x{}, the model expects {side}x{side}",
                s.h, s.w
            )));
        }
        if need_nodule && s.nodule_mask.is_none() {
            return Err(SsmtError::Dataset(format!(
                "sample {i} is missing its nodule mask; supervised training needs one"
            )));
        }
    }
    Ok(())
}

/// Mean of on-tape scalars in slice order.
fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    assert!(!vars.is_empty(), "mean_of needs at least one term");
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / vars.len() as f32))
}

fn scalar(tape: &Tape, v: Var) -> f32 {
    tape.value(v).data()[0]
}

fn mask_tensor(mask: &[f32], side: usize) -> Result<Tensor> {
    Tensor::from_vec(mask.to_vec(), &[1, side, side])
}

/// Mean IoU/DSC of thresholded nodule predictions over `samples`.
fn validate_on(model: &SsmtModel, samples: &[UltrasoundSample]) -> Result<(f64, f64)> {
    assert!(!samples.is_empty(), "validation set must not be empty");
    let tasks = TaskSet {
        nodule: true,
        gland: false,
        size: false,
        recon: false,
    };
    let mut sum_iou = 0.0f64;
    let mut sum_dsc = 0.0f64;
    for s in samples {
        let gt = s
            .nodule_mask
            .as_ref()
            .ok_or_else(|| SsmtError::Dataset("validation sample lacks a nodule mask".to_string()))?;
        let mut tape = Tape::new();
        let mut b = Binding::new(&model.store, |_| false);
        let out = model.forward(&mut tape, &mut b, &s.image, tasks)?;
        let prob = tape.value(out.nodule.expect("nodule requested").prob_out);
        let pred = threshold_probs(prob.data());
        sum_iou += iou(&pred, gt)? as f64;
        sum_dsc += dsc(&pred, gt)? as f64;
    }
    let n = samples.len() as f64;
    Ok((sum_iou / n, sum_dsc / n))
}

struct CsvLog {
    file: std::fs::File,
}

impl CsvLog {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| SsmtError::io(dir, e))?;
        let path = dir.join(METRICS_CSV);
        let mut file = std::fs::File::create(&path).map_err(|e| SsmtError::io(&path, e))?;
        writeln!(file, "{METRICS_CSV_HEADER}").map_err(|e| SsmtError::io(&path, e))?;
        Ok(CsvLog { file })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        epoch: usize,
        step: usize,
        lr: f32,
        weights: &LossWeights,
        means: &EpochMeans,
        val_iou: f64,
        val_dsc: f64,
    ) -> Result<()> {
        let nod = means.nodule.unwrap_or(0.0);
        let gld = means.gland.unwrap_or(0.0);
        let siz = means.size.unwrap_or(0.0);
        let rec = means.rec.unwrap_or(0.0);
        let total = weights.alpha as f64 * nod
            + weights.beta as f64 * gld
            + weights.gamma as f64 * siz
            + weights.eta as f64 * rec;
        writeln!(
            self.file,
            "{epoch},{step},{lr:.6},{total:.6},{nod:.6},{gld:.6},{siz:.6},{rec:.6},{val_iou:.6},{val_dsc:.6}"
        )
        .map_err(|e| SsmtError::io("metrics.csv", e))
    }
}

/// Gradients of the bound trainable parameters, in name order. Parameters
/// left off the tape (structurally disconnected this batch) are skipped.
fn collect_grads(tape: &Tape, binding: &Binding) -> Vec<(String, Vec<f32>)> {
    let mut grads = Vec::new();
    for (name, var) in binding.bound() {
        if !binding.is_trainable(name) {
            continue;
        }
        if let Some(g) = tape.grad(var) {
            grads.push((name.clone(), g.to_vec()));
        }
    }
    grads
}

/// One Adam update per collected gradient.
fn apply_updates(
    model: &mut SsmtModel,
    state: &mut TrainState,
    grads: Vec<(String, Vec<f32>)>,
    lr: f32,
    hyper: &AdamHyper,
) -> Result<()> {
    for (name, grad) in grads {
        let param = model.store.get_mut(&name)?;
        let st = state
            .adam
            .entry(name.clone())
            .or_insert_with(|| AdamState::new(grad.len()));
        adam_step(&name, param.data_mut(), &grad, st, lr, hyper)?;
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "shuffle", &[epoch as u64]));
    order
}

/// Deterministically augment one sample for one epoch position.
fn augmented(
    samples: &[UltrasoundSample],
    idx: usize,
    cfg: &AugmentationConfig,
    seed: u64,
    epoch: usize,
) -> Result<UltrasoundSample> {
    let any_enabled = cfg.flip || cfg.rotate || cfg.zoom || cfg.stitch;
    if !any_enabled {
        return Ok(samples[idx].clone());
    }
    let mut rng = rng_for(seed, "augment", &[epoch as u64, idx as u64]);
    let mut partners: Vec<&UltrasoundSample> = Vec::new();
    if cfg.stitch && samples.len() > 1 {
        for _ in 0..3 {
            partners.push(&samples[rng.random_range(0..samples.len())]);
        }
    }
    augment(&samples[idx], &partners, cfg, &mut rng)
}

/// Phase 1: reconstruction-only training on every provided image. Masks are
/// ignored; parameters outside the encoder and reconstruction head stay
/// bit-identical to initialization.
pub fn run_pretrain(
    model: &mut SsmtModel,
    samples: &[UltrasoundSample],
    cfg: &PhaseConfig,
    augment_cfg: &AugmentationConfig,
    out_dir: &Path,
) -> Result<TrainState> {
    cfg.validate()?;
    augment_cfg.validate()?;
    let side = model.cfg.image_size;
    check_samples(samples, side, false)?;
    let mut state = TrainState::fresh();
    let mut log = CsvLog::create(out_dir)?;
    let batches_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let hyper = cfg.hyper();
    // phase-1 log rows carry the reconstruction loss alone
    let rec_only = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        eta: 1.0,
    };
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(samples.len(), cfg.seed, epoch);
        let mut rec_acc = TermAccum::default();
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(state.meta.step, total_steps, cfg.lr0, cfg.lr_min);
            last_lr = lr;
            let mut tape = Tape::new();
            let mut binding = Binding::new(&model.store, pretrain_trainable);
            let mut terms = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let s = augmented(samples, idx, augment_cfg, cfg.seed, epoch)?;
                let out = model.forward(&mut tape, &mut binding, &s.image, TaskSet::pretrain())?;
                let rec = out.recon.expect("pretrain task set has recon");
                let input = mask_tensor(&s.image, side)?;
                terms.push(charbonnier(&mut tape, rec, &input)?);
            }
            let batch_loss = mean_of(&mut tape, &terms)?;
            rec_acc.push(scalar(&tape, batch_loss));
            tape.backward(batch_loss)?;
            let grads = collect_grads(&tape, &binding);
            drop(binding);
            apply_updates(model, &mut state, grads, lr, &hyper)?;
            state.meta.step += 1;
        }
        state.meta.epoch = epoch + 1;
        let means = EpochMeans {
            rec: rec_acc.mean(),
            ..EpochMeans::default()
        };
        log.row(epoch + 1, state.meta.step, last_lr, &rec_only, &means, 0.0, 0.0)?;
        let snap = checkpoint::snapshot(model, &state.adam, &state.meta)?;
        checkpoint::write_file(&out_dir.join(LAST_CKPT), &snap)?;
    }
    Ok(state)
}

/// Mean reconstruction loss of the current model over `samples` (no
/// parameter updates); the before/after measure for phase-1 budgets.
pub fn mean_recon_loss(model: &SsmtModel, samples: &[UltrasoundSample]) -> Result<f64> {
    let side = model.cfg.image_size;
    check_samples(samples, side, false)?;
    let mut sum = 0.0f64;
    for s in samples {
        let mut tape = Tape::new();
        let mut b = Binding::new(&model.store, |_| false);
        let out = model.forward(&mut tape, &mut b, &s.image, TaskSet::pretrain())?;
        let rec = out.recon.expect("pretrain task set has recon");
        let input = mask_tensor(&s.image, side)?;
        let loss = charbonnier(&mut tape, rec, &input)?;
        sum += scalar(&tape, loss) as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Phase 2: joint supervised training of every enabled branch. Disabled
/// branches are never forwarded, their weights renormalize away, and their
/// parameters keep their current values. Returns the final train state;
/// writes per-epoch CSV rows plus `last.ckpt`/`best.ckpt` under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn run_supervised(
    model: &mut SsmtModel,
    train: &[UltrasoundSample],
    val: &[UltrasoundSample],
    cfg: &PhaseConfig,
    weights: &LossWeights,
    flags: AblationFlags,
    augment_cfg: &AugmentationConfig,
    out_dir: &Path,
) -> Result<TrainState> {
    cfg.validate()?;
    augment_cfg.validate()?;
    let effective = weights.ablated(flags)?;
    let side = model.cfg.image_size;
    check_samples(train, side, true)?;
    // an empty validation set falls back to scoring the training set, so
    // overfit runs can read their training DSC from the same column
    let val: &[UltrasoundSample] = if val.is_empty() { train } else { val };
    check_samples(val, side, true)?;
    let tasks = flags.task_set();
    let mut state = TrainState::fresh();
    let mut log = CsvLog::create(out_dir)?;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let hyper = cfg.hyper();
    let mut last_val = (0.0f64, 0.0f64);
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.len(), cfg.seed, epoch);
        let mut acc = (
            TermAccum::default(),
            TermAccum::default(),
            TermAccum::default(),
            TermAccum::default(),
        );
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(state.meta.step, total_steps, cfg.lr0, cfg.lr_min);
            last_lr = lr;
            let mut tape = Tape::new();
            let mut binding = Binding::new(&model.store, |_| true);
            let mut nod_terms = Vec::new();
            let mut gld_terms = Vec::new();
            let mut siz_terms = Vec::new();
            let mut rec_terms = Vec::new();
            for &idx in chunk {
                let s = augmented(train, idx, augment_cfg, cfg.seed, epoch)?;
                let out = model.forward(&mut tape, &mut binding, &s.image, tasks)?;
                let nod = out.nodule.expect("nodule branch always on");
                let gt = mask_tensor(s.nodule_mask.as_ref().expect("checked"), side)?;
                nod_terms.push(dice_loss(&mut tape, nod.prob_loss, &gt)?);
                if let (Some(dec), Some(mask)) = (&out.gland, &s.gland_mask) {
                    let gt = mask_tensor(mask, side)?;
                    gld_terms.push(dice_loss(&mut tape, dec.prob_loss, &gt)?);
                }
                if let (Some(v), Some(label)) = (out.size_pred, s.size_label) {
                    siz_terms.push(size_loss(&mut tape, v, label)?);
                }
                if let Some(rec) = out.recon {
                    let input = mask_tensor(&s.image, side)?;
                    rec_terms.push(charbonnier(&mut tape, rec, &input)?);
                }
            }
            let nodule = mean_of(&mut tape, &nod_terms)?;
            acc.0.push(scalar(&tape, nodule));
            let gland = match gld_terms.is_empty() {
                true => None,
                false => Some(mean_of(&mut tape, &gld_terms)?),
            };
            if let Some(g) = gland {
                acc.1.push(scalar(&tape, g));
            }
            let size = match siz_terms.is_empty() {
                true => None,
                false => Some(mean_of(&mut tape, &siz_terms)?),
            };
            if let Some(v) = size {
                acc.2.push(scalar(&tape, v));
            }
            let rec = match rec_terms.is_empty() {
                true => None,
                false => Some(mean_of(&mut tape, &rec_terms)?),
            };
            if let Some(r) = rec {
                acc.3.push(scalar(&tape, r));
            }
            let terms = LossTerms {
                nodule,
                gland,
                size,
                rec,
            };
            let batch_loss = total_loss(&mut tape, &terms, &effective)?;
            tape.backward(batch_loss)?;
            let grads = collect_grads(&tape, &binding);
            drop(binding);
            apply_updates(model, &mut state, grads, lr, &hyper)?;
            state.meta.step += 1;
        }
        state.meta.epoch = epoch + 1;
        let last_epoch = epoch + 1 == cfg.epochs;
        if epoch % cfg.val_every == 0 || last_epoch {
            last_val = validate_on(model, val)?;
        }
        let means = EpochMeans {
            nodule: acc.0.mean(),
            gland: acc.1.mean(),
            size: acc.2.mean(),
            rec: acc.3.mean(),
        };
        log.row(
            epoch + 1,
            state.meta.step,
            last_lr,
            &effective,
            &means,
            last_val.0,
            last_val.1,
        )?;
        let improved = last_val.1 as f32 > state.meta.best_dsc;
        if improved {
            state.meta.best_dsc = last_val.1 as f32;
        }
        let snap = checkpoint::snapshot(model, &state.adam, &state.meta)?;
        checkpoint::write_file(&out_dir.join(LAST_CKPT), &snap)?;
        if improved {
            checkpoint::write_file(&out_dir.join(BEST_CKPT), &snap)?;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_phantom, PhantomConfig};
    use crate::model::ModelConfig;

    fn phantoms(n: usize, side: usize, seed: u64) -> Vec<UltrasoundSample> {
        let cfg = PhantomConfig {
            size: side,
            ..PhantomConfig::default()
        };
        (0..n)
            .map(|i| generate_phantom(&cfg, &mut rng_for(seed, "ph", &[i as u64])).unwrap())
            .collect()
    }

    fn tmp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ssmt_phase_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_cfg(epochs: usize, batch: usize) -> PhaseConfig {
        PhaseConfig {
            epochs,
            batch_size: batch,
            ..PhaseConfig::default()
        }
    }

    #[test]
    fn zero_lr_pretrain_changes_nothing() {
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 42).unwrap();
        let before = model.store.fingerprints();
        let samples = phantoms(4, 32, 1);
        let dir = tmp_dir("zerolr");
        let cfg = PhaseConfig {
            lr0: 0.0,
            lr_min: 0.0,
            weight_decay: 0.0,
            ..tiny_cfg(1, 4)
        };
        run_pretrain(&mut model, &samples, &cfg, &AugmentationConfig::none(), &dir).unwrap();
        assert_eq!(model.store.fingerprints(), before);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pretrain_freezes_everything_outside_encoder_and_recon() {
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 11).unwrap();
        let before = model.store.fingerprints();
        let samples = phantoms(6, 32, 2);
        let dir = tmp_dir("freeze");
        run_pretrain(
            &mut model,
            &samples,
            &tiny_cfg(2, 3),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        let after = model.store.fingerprints();
        let mut trained = 0;
        for (name, h) in &before {
            if pretrain_trainable(name) {
                if after[name] != *h {
                    trained += 1;
                }
            } else {
                assert_eq!(after[name], *h, "{name} must stay frozen in phase 1");
            }
        }
        assert!(trained > 0, "some encoder/recon parameters must move");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pretrain_lowers_the_reconstruction_loss() {
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 3).unwrap();
        let samples = phantoms(8, 32, 5);
        let before = mean_recon_loss(&model, &samples).unwrap();
        let dir = tmp_dir("drop");
        run_pretrain(
            &mut model,
            &samples,
            &tiny_cfg(4, 4),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        let after = mean_recon_loss(&model, &samples).unwrap();
        assert!(after < before, "{after} !< {before}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn supervised_run_logs_csv_and_checkpoints() {
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 7).unwrap();
        let samples = phantoms(4, 32, 9);
        let dir = tmp_dir("sup");
        let state = run_supervised(
            &mut model,
            &samples,
            &[],
            &tiny_cfg(2, 2),
            &LossWeights::default(),
            AblationFlags::default(),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        assert_eq!(state.meta.epoch, 2);
        assert_eq!(state.meta.step, 4);
        let csv = std::fs::read_to_string(dir.join(METRICS_CSV)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.split(',').count(), 10, "row '{row}'");
        }
        assert!(dir.join(LAST_CKPT).exists());
        assert!(dir.join(BEST_CKPT).exists());
        let (loaded, _, meta) = checkpoint::restore(&checkpoint::read_file(&dir.join(LAST_CKPT)).unwrap()).unwrap();
        assert_eq!(meta.epoch, 2);
        assert_eq!(loaded.store.fingerprints(), model.store.fingerprints());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_total_decomposes_into_the_weighted_terms() {
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 13).unwrap();
        let samples = phantoms(4, 32, 21);
        let dir = tmp_dir("decomp");
        run_supervised(
            &mut model,
            &samples,
            &[],
            &tiny_cfg(1, 2),
            &LossWeights::default(),
            AblationFlags::default(),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        let csv = std::fs::read_to_string(dir.join(METRICS_CSV)).unwrap();
        let row = csv.lines().nth(1).unwrap();
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        let (total, nod, gld, siz, rec) = (f[3], f[4], f[5], f[6], f[7]);
        let recomposed = 0.8 * nod + 0.1 * gld + 0.05 * siz + 0.05 * rec;
        assert!(
            (total - recomposed).abs() < 2e-6,
            "{total} vs {recomposed}"
        );
        for term in [nod, gld, siz, rec] {
            assert!(term > 0.0, "all four terms must be live in the log");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ablated_branches_never_move_a_parameter() {
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 19).unwrap();
        let before = model.store.fingerprints();
        let samples = phantoms(4, 32, 23);
        let dir = tmp_dir("ablate");
        run_supervised(
            &mut model,
            &samples,
            &[],
            &tiny_cfg(1, 2),
            &LossWeights::default(),
            AblationFlags::variant(1).unwrap(),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        let after = model.store.fingerprints();
        for (name, h) in &before {
            let frozen = name.starts_with("dec.gld.") || name.starts_with("size.") || name.starts_with("rec.");
            if frozen {
                assert_eq!(after[name], *h, "{name} belongs to a disabled branch");
            }
        }
        assert_ne!(before, after, "the nodule path must still train");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn same_seed_runs_are_byte_identical() {
        let run = |dir: &Path| {
            let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 42).unwrap();
            let samples = phantoms(4, 32, 42);
            run_supervised(
                &mut model,
                &samples,
                &[],
                &tiny_cfg(2, 2),
                &LossWeights::default(),
                AblationFlags::default(),
                &AugmentationConfig::default(),
                dir,
            )
            .unwrap();
        };
        let d1 = tmp_dir("det1");
        let d2 = tmp_dir("det2");
        run(&d1);
        run(&d2);
        let csv1 = std::fs::read(d1.join(METRICS_CSV)).unwrap();
        let csv2 = std::fs::read(d2.join(METRICS_CSV)).unwrap();
        assert_eq!(csv1, csv2);
        let c1 = std::fs::read(d1.join(LAST_CKPT)).unwrap();
        let c2 = std::fs::read(d2.join(LAST_CKPT)).unwrap();
        assert_eq!(c1, c2);
        std::fs::remove_dir_all(&d1).ok();
        std::fs::remove_dir_all(&d2).ok();
    }

    #[test]
    fn missing_nodule_masks_fail_supervised_training() {
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 1).unwrap();
        let mut samples = phantoms(2, 32, 1);
        samples[1].nodule_mask = None;
        samples[1].size_label = None;
        let dir = tmp_dir("nomask");
        let err = run_supervised(
            &mut model,
            &samples,
            &[],
            &tiny_cfg(1, 2),
            &LossWeights::default(),
            AblationFlags::default(),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap_err();
        assert!(matches!(err, SsmtError::Dataset(_)), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
