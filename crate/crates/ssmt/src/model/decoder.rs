//! Query-based segmentation decoder with coarse-to-fine masked cross
//! attention, run twice (nodule primary, gland auxiliary), fused with a
//! CNN upsampling path over the encoder skips.
//!
//! Thresholded masks Z are non-differentiable, so they steer attention only;
//! every loss consumes soft sigmoid maps. The query soft maps are merged two
//! ways: a mean map for training (the sum+clamp form has zero gradient once
//! the summed foreground passes the clamp) and the sum+clamp map for reported
//! outputs. Both agree at the optimum: if every query map matches the target,
//! the clamped sum binarizes to the same mask. Both soft paths start with
//! nearly empty maps (see PRIOR_LOGIT_INIT).

use crate::autodiff::{ResampleMode, Tape, Tensor, Var};
use crate::error::{Result, SsmtError};
use crate::model::encoder::{attention, EncoderOut};
use crate::model::params::{Binding, ParamStore};
use crate::model::ModelConfig;

/// Threshold for g: strict S > 0.5, so sigmoid(0) stays background.
pub const MASK_TAU: f32 = 0.5;
/// Projected feature channels start at this constant, giving fresh queries a
/// stable direction to hold their score maps down against.
pub const PROJ_BIAS_INIT: f32 = 0.5;
/// Fresh foreground logits in both soft paths sit near this value, so every
/// soft map opens around sigmoid(-2.2) ~ 0.1. A map that opened at 0.5 would
/// flood the background, and the cheapest early descent is then to silence
/// the offending path into saturation it never leaves; starting nearly empty
/// keeps both paths trainable. The queries carry the prior in their init
/// (they can drift anywhere later); the CNN map gets it as a fixed shift on
/// top of mean-centered logits, so that path has no free level to sink.
pub const PRIOR_LOGIT_INIT: f32 = -2.2;
/// Class index conventions: queries classified 0 are foreground. The
/// classifier weights start at zero and argmax ties resolve to the lowest
/// index, so an untrained classifier keeps every query contributing.
pub const FOREGROUND_CLASS: usize = 0;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchId {
    Nodule,
    Gland,
}

impl BranchId {
    pub fn prefix(self) -> &'static str {
        match self {
            BranchId::Nodule => "dec.nod",
            BranchId::Gland => "dec.gld",
        }
    }
}

/// Hard mask from soft scores: strictly above tau is foreground.
pub fn threshold_mask(s: &[f32]) -> Vec<f32> {
    s.iter().map(|&v| if v > MASK_TAU { 1.0 } else { 0.0 }).collect()
}

/// Additive attention mask from hard per-query masks: 0 on foreground,
/// -inf elsewhere; an all-background row falls back to unmasked (all-zero).
pub fn attention_mask(z: &[f32], nq: usize, m: usize) -> Result<Tensor> {
    if z.len() != nq * m {
        return Err(SsmtError::Dim(format!(
            "mask has {} entries for {nq}x{m}",
            z.len()
        )));
    }
    let mut data = vec![0.0f32; nq * m];
    for q in 0..nq {
        let row = &z[q * m..(q + 1) * m];
        if row.iter().any(|&v| v == 1.0) {
            for (d, &v) in data[q * m..(q + 1) * m].iter_mut().zip(row) {
                *d = if v == 1.0 { 0.0 } else { f32::NEG_INFINITY };
            }
        }
    }
    Tensor::from_vec(data, &[nq, m])
}

/// Lowest-index argmax (ties pick the earlier class).
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fuse the upsampled token map with the finest CNN skip and project to the
/// decoder width. Returns (position-major [M, d_dec], its transpose).
pub fn project_features(
    tape: &mut Tape,
    b: &mut Binding,
    branch: BranchId,
    f_t: Var,
    finest: Var,
) -> Result<(Var, Var)> {
    let fs = tape.shape(finest).to_vec();
    let (h2, w2) = (fs[1], fs[2]);
    let up = tape.resample2d(f_t, h2, w2, ResampleMode::Bilinear)?;
    let cat = tape.concat0(up, finest)?;
    let w = b.var(tape, &format!("{}.proj.w", branch.prefix()))?;
    let bias = b.var(tape, &format!("{}.proj.b", branch.prefix()))?;
    let proj = tape.conv2d(cat, w, Some(bias), 1, 0)?;
    let d_dec = tape.shape(proj)[0];
    let flat = tape.reshape(proj, &[d_dec, h2 * w2])?;
    let pos = tape.transpose2(flat)?;
    Ok((pos, flat))
}

/// Soft query scores against every feature position: sigmoid(P . F^T).
pub fn query_scores(tape: &mut Tape, p: Var, f_t_pos: Var) -> Result<Var> {
    let logits = tape.matmul(p, f_t_pos)?;
    Ok(tape.sigmoid(logits))
}

/// One masked cross-attention refinement: P + softmax(PWq (FWk)^T + h) FWv.
/// Returns the refined queries and the attention weight map.
pub fn refine_queries(
    tape: &mut Tape,
    b: &mut Binding,
    branch: BranchId,
    p: Var,
    f_pos: Var,
    mask: Var,
) -> Result<(Var, Var)> {
    let wq = b.var(tape, &format!("{}.att.wq", branch.prefix()))?;
    let wk = b.var(tape, &format!("{}.att.wk", branch.prefix()))?;
    let wv = b.var(tape, &format!("{}.att.wv", branch.prefix()))?;
    let q = tape.matmul(p, wq)?;
    let k = tape.matmul(f_pos, wk)?;
    let v = tape.matmul(f_pos, wv)?;
    let (out, weights) = attention(tape, q, k, v, 1, Some(mask))?;
    let p_next = tape.add(p, out)?;
    Ok((p_next, weights[0]))
}

/// How foreground query maps merge into one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    /// Mean over foreground queries; stays strictly inside (0,1), used by
    /// the losses.
    Mean,
    /// Sum then clamp to [0,1]; the reported output form.
    ClampSum,
}

/// Merge foreground query soft maps, upsample to the output size, and
/// average with the CNN path's sigmoid map.
pub fn assemble(
    tape: &mut Tape,
    s: Var,
    foreground: &[bool],
    cnn_prob: Var,
    grid: (usize, usize),
    out_hw: (usize, usize),
    aggregate: Aggregate,
) -> Result<Var> {
    let ss = tape.shape(s).to_vec();
    let (nq, m) = (ss[0], ss[1]);
    if foreground.len() != nq || grid.0 * grid.1 != m {
        return Err(SsmtError::Dim(format!(
            "assemble: {nq} queries over {m} positions vs {} flags, grid {:?}",
            foreground.len(),
            grid
        )));
    }
    let fg = foreground.iter().filter(|&&f| f).count();
    let weight = match aggregate {
        Aggregate::Mean => {
            if fg == 0 {
                0.0
            } else {
                1.0 / fg as f32
            }
        }
        Aggregate::ClampSum => 1.0,
    };
    let sel: Vec<f32> = foreground.iter().map(|&f| if f { weight } else { 0.0 }).collect();
    let sel = tape.constant(Tensor::from_vec(sel, &[1, nq])?);
    let mut merged = tape.matmul(sel, s)?;
    if aggregate == Aggregate::ClampSum {
        merged = tape.clamp_unit(merged);
    }
    let map = tape.reshape(merged, &[1, grid.0, grid.1])?;
    let up = tape.resample2d(map, out_hw.0, out_hw.1, ResampleMode::Bilinear)?;
    let sum = tape.add(up, cnn_prob)?;
    Ok(tape.mul_scalar(sum, 0.5))
}

/// CNN upsampling path: walk skips coarse to fine with concat + conv, then
/// a final bias-free conv to one logit channel at full resolution, centered
/// to zero mean.
pub fn unet_decode(
    tape: &mut Tape,
    b: &mut Binding,
    branch: BranchId,
    skips: &[Var],
    out_hw: (usize, usize),
) -> Result<Var> {
    if skips.is_empty() {
        return Err(SsmtError::Dim("unet_decode needs at least one skip".to_string()));
    }
    let mut x = skips[skips.len() - 1];
    for j in (0..skips.len() - 1).rev() {
        let target = tape.shape(skips[j]).to_vec();
        let up = tape.resample2d(x, target[1], target[2], ResampleMode::Bilinear)?;
        let cat = tape.concat0(up, skips[j])?;
        let w = b.var(tape, &format!("{}.unet.u{j}.w", branch.prefix()))?;
        let bias = b.var(tape, &format!("{}.unet.u{j}.b", branch.prefix()))?;
        let y = tape.conv2d(cat, w, Some(bias), 1, 1)?;
        // gelu keeps every unit trainable: segmentation losses push most of
        // the map toward background early, and a relu stage driven to zero
        // there would never recover
        x = tape.gelu(y);
    }
    let up = tape.resample2d(x, out_hw.0, out_hw.1, ResampleMode::Bilinear)?;
    let w = b.var(tape, &format!("{}.unet.out.w", branch.prefix()))?;
    let logits = tape.conv2d(up, w, None, 1, 1)?;
    // Center the logit map: its mean level carries no shape information, and
    // with mostly-background targets dice pushes a free level down far faster
    // than the kernels can differentiate, silencing this path for good. With
    // the mean removed (and no output bias to recreate it), background
    // pressure can only be satisfied by spatial separation. The fixed prior
    // shift then opens the map nearly empty instead of flooding at 0.5,
    // which would drown the query path's gradients for hundreds of steps.
    let m = tape.mean(logits);
    let m2 = tape.reshape(m, &[1, 1])?;
    let ones = tape.constant(Tensor::full(&[out_hw.0 * out_hw.1, 1], 1.0));
    let level = tape.matmul(ones, m2)?;
    let level = tape.reshape(level, &[1, out_hw.0, out_hw.1])?;
    let centered = tape.sub(logits, level)?;
    Ok(tape.add_scalar(centered, PRIOR_LOGIT_INIT))
}

/// Everything one decoder branch produces for losses, metrics, and tests.
pub struct DecoderOut {
    /// Soft query maps S_0..S_T, each [N_q, M].
    pub s_history: Vec<Var>,
    /// Attention weight maps, one per refinement iteration.
    pub attn_history: Vec<Var>,
    /// Query class scores [N_q, K].
    pub class_scores: Var,
    /// Per-query foreground flags from argmax.
    pub foreground: Vec<bool>,
    /// Mean-aggregated fused probability map [1, H, W] (loss path).
    pub prob_loss: Var,
    /// Clamped-sum fused probability map [1, H, W] (reported output).
    pub prob_out: Var,
    /// Upsampling path's own sigmoid map [1, H, W], before fusion.
    pub cnn_prob: Var,
}

pub fn decode(
    tape: &mut Tape,
    b: &mut Binding,
    cfg: &ModelConfig,
    enc: &EncoderOut,
    branch: BranchId,
) -> Result<DecoderOut> {
    let finest = enc.skips[0];
    let fs = tape.shape(finest).to_vec();
    let grid = (fs[1], fs[2]);
    let m = grid.0 * grid.1;
    let (f_pos, f_post) = project_features(tape, b, branch, enc.f_t, finest)?;
    let mut p = b.var(tape, &format!("{}.q0", branch.prefix()))?;
    let mut s = query_scores(tape, p, f_post)?;
    let mut s_history = vec![s];
    let mut attn_history = Vec::with_capacity(cfg.refine_iters);
    for _ in 0..cfg.refine_iters {
        let z = threshold_mask(tape.value(s).data());
        let mask = tape.constant(attention_mask(&z, cfg.queries, m)?);
        let (p_next, attn) = refine_queries(tape, b, branch, p, f_pos, mask)?;
        p = p_next;
        s = query_scores(tape, p, f_post)?;
        s_history.push(s);
        attn_history.push(attn);
    }
    let wfc = b.var(tape, &format!("{}.wfc", branch.prefix()))?;
    let class_scores = tape.matmul(p, wfc)?;
    let foreground: Vec<bool> = tape
        .value(class_scores)
        .data()
        .chunks(NUM_CLASSES)
        .map(|row| argmax_row(row) == FOREGROUND_CLASS)
        .collect();
    let out_hw = (cfg.image_size, cfg.image_size);
    let cnn_logits = unet_decode(tape, b, branch, &enc.skips, out_hw)?;
    let cnn_prob = tape.sigmoid(cnn_logits);
    let s_final = *s_history.last().expect("at least S_0");
    let prob_loss = assemble(tape, s_final, &foreground, cnn_prob, grid, out_hw, Aggregate::Mean)?;
    let prob_out = assemble(
        tape,
        s_final,
        &foreground,
        cnn_prob,
        grid,
        out_hw,
        Aggregate::ClampSum,
    )?;
    Ok(DecoderOut {
        s_history,
        attn_history,
        class_scores,
        foreground,
        prob_loss,
        prob_out,
        cnn_prob,
    })
}

/// Run the nodule decoder and, unless ablated away, the gland decoder.
pub fn dual_decode(
    tape: &mut Tape,
    b: &mut Binding,
    cfg: &ModelConfig,
    enc: &EncoderOut,
    gland: bool,
) -> Result<(DecoderOut, Option<DecoderOut>)> {
    let nodule = decode(tape, b, cfg, enc, BranchId::Nodule)?;
    let gland = if gland {
        Some(decode(tape, b, cfg, enc, BranchId::Gland)?)
    } else {
        None
    };
    Ok((nodule, gland))
}

/// Register one branch's parameters.
pub fn register_branch(cfg: &ModelConfig, seed: u64, branch: BranchId, store: &mut ParamStore) -> Result<()> {
    let pre = branch.prefix();
    let c_finest = cfg.cnn_channels[0];
    let proj_in = cfg.d_enc + c_finest;
    store.insert_randn(
        &format!("{pre}.proj.w"),
        &[cfg.d_dec, proj_in, 1, 1],
        0.25 / (proj_in as f32).sqrt(),
        seed,
    )?;
    store.insert_full(&format!("{pre}.proj.b"), &[cfg.d_dec], PROJ_BIAS_INIT)?;
    store.insert_randn(&format!("{pre}.q0"), &[cfg.queries, cfg.d_dec], 0.02, seed)?;
    // shift the whole query matrix so q . f ~ PRIOR_LOGIT_INIT when every
    // feature channel sits at PROJ_BIAS_INIT
    let shift = PRIOR_LOGIT_INIT / (PROJ_BIAS_INIT * cfg.d_dec as f32);
    for v in store.get_mut(&format!("{pre}.q0"))?.data_mut() {
        *v += shift;
    }
    let dstd = 1.0 / (cfg.d_dec as f32).sqrt();
    for name in ["att.wq", "att.wk", "att.wv"] {
        store.insert_randn(&format!("{pre}.{name}"), &[cfg.d_dec, cfg.d_dec], dstd, seed)?;
    }
    store.insert_full(&format!("{pre}.wfc"), &[cfg.d_dec, NUM_CLASSES], 0.0)?;
    let ch = &cfg.cnn_channels;
    let k = ch.len();
    let mut prev = ch[k - 1];
    for j in (0..k.saturating_sub(1)).rev() {
        let cin = prev + ch[j];
        store.insert_randn(
            &format!("{pre}.unet.u{j}.w"),
            &[ch[j], cin, 3, 3],
            1.0 / ((cin * 9) as f32).sqrt(),
            seed,
        )?;
        store.insert_full(&format!("{pre}.unet.u{j}.b"), &[ch[j]], 0.0)?;
        prev = ch[j];
    }
    store.insert_randn(
        &format!("{pre}.unet.out.w"),
        &[1, prev, 3, 3],
        1.0 / ((prev * 9) as f32).sqrt(),
        seed,
    )?;
    Ok(())
}

pub fn register(cfg: &ModelConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    register_branch(cfg, seed, BranchId::Nodule, store)?;
    register_branch(cfg, seed, BranchId::Gland, store)
}
