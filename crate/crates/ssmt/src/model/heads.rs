//! Auxiliary output heads: scalar nodule-size regression from the pooled
//! token vector, and full-image reconstruction from the fused coarse
//! features.

use crate::autodiff::{ResampleMode, Tape, Var};
use crate::error::Result;
use crate::model::params::{Binding, ParamStore};
use crate::model::ModelConfig;

/// sigmoid(MLP(f)) with one hidden layer of width d_enc; output in (0,1).
pub fn predict_size(tape: &mut Tape, b: &mut Binding, pooled: Var) -> Result<Var> {
    let w1 = b.var(tape, "size.w1")?;
    let b1 = b.var(tape, "size.b1")?;
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.gelu(h);
    let w2 = b.var(tape, "size.w2")?;
    let b2 = b.var(tape, "size.b2")?;
    let logit = tape.matmul(h, w2)?;
    let logit = tape.add_bias(logit, b2)?;
    Ok(tape.sigmoid(logit))
}

/// Channel plan of the reconstruction stack: d_enc halving per stage with a
/// floor of 4.
fn recon_channels(cfg: &ModelConfig) -> Vec<usize> {
    let stages = cfg.patch.trailing_zeros() as usize;
    let mut ch = vec![cfg.d_enc];
    for _ in 0..stages {
        ch.push((ch.last().unwrap() / 2).max(4));
    }
    ch
}

/// Project the coarsest CNN map onto the token grid's channel count, add the
/// token map, and upsample back to one full-resolution channel. No output
/// activation; the reconstruction loss handles range.
pub fn reconstruct(
    tape: &mut Tape,
    b: &mut Binding,
    cfg: &ModelConfig,
    f_t: Var,
    coarsest: Var,
) -> Result<Var> {
    let w = b.var(tape, "rec.proj.w")?;
    let bias = b.var(tape, "rec.proj.b")?;
    let proj = tape.conv2d(coarsest, w, Some(bias), 1, 0)?;
    let mut x = tape.add(proj, f_t)?;
    let g = cfg.grid();
    let stages = cfg.patch.trailing_zeros() as usize;
    for j in 0..stages {
        let target = g * (2 << j);
        let up = tape.resample2d(x, target, target, ResampleMode::Bilinear)?;
        let w = b.var(tape, &format!("rec.u{j}.w"))?;
        let bias = b.var(tape, &format!("rec.u{j}.b"))?;
        let y = tape.conv2d(up, w, Some(bias), 1, 1)?;
        x = tape.relu(y);
    }
    let w = b.var(tape, "rec.out.w")?;
    let bias = b.var(tape, "rec.out.b")?;
    tape.conv2d(x, w, Some(bias), 1, 1)
}

pub fn register(cfg: &ModelConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    let d = cfg.d_enc;
    let dstd = 1.0 / (d as f32).sqrt();
    store.insert_randn("size.w1", &[d, d], dstd, seed)?;
    store.insert_full("size.b1", &[d], 0.0)?;
    store.insert_randn("size.w2", &[d, 1], dstd, seed)?;
    store.insert_full("size.b2", &[1], 0.0)?;
    let c_coarse = *cfg.cnn_channels.last().expect("validated config");
    store.insert_randn(
        "rec.proj.w",
        &[d, c_coarse, 1, 1],
        1.0 / (c_coarse as f32).sqrt(),
        seed,
    )?;
    store.insert_full("rec.proj.b", &[d], 0.0)?;
    let ch = recon_channels(cfg);
    for j in 0..ch.len() - 1 {
        let std = 1.0 / ((ch[j] * 9) as f32).sqrt();
        store.insert_randn(&format!("rec.u{j}.w"), &[ch[j + 1], ch[j], 3, 3], std, seed)?;
        store.insert_full(&format!("rec.u{j}.b"), &[ch[j + 1]], 0.0)?;
    }
    let last = *ch.last().unwrap();
    store.insert_randn("rec.out.w", &[1, last, 3, 3], 1.0 / ((last * 9) as f32).sqrt(), seed)?;
    store.insert_full("rec.out.b", &[1], 0.0)?;
    Ok(())
}
