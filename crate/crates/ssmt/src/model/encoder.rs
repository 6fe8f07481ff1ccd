//! Hybrid encoder: raw-patch transformer branch plus a stride-2 CNN branch.
//! Produces final tokens, the token grid as a spatial map, per-stage CNN
//! skip features (finest first), and a pooled vector for the size head.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, SsmtError};
use crate::model::params::{Binding, ParamStore};
use crate::model::ModelConfig;

/// Row-major extraction of non-overlapping P x P patches into [N, P^2].
pub fn patchify(image: &[f32], h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(SsmtError::Dim(format!("{h}x{w} not divisible by patch {p}")));
    }
    if image.len() != h * w {
        return Err(SsmtError::Dim(format!(
            "image has {} values for {h}x{w}",
            image.len()
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let mut out = vec![0.0f32; n * p * p];
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            for dy in 0..p {
                let src = (py * p + dy) * w + px * p;
                let dst = row * p * p + dy * p;
                out[dst..dst + p].copy_from_slice(&image[src..src + p]);
            }
        }
    }
    Tensor::from_vec(out, &[n, p * p])
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, p: usize) -> Result<Vec<f32>> {
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p] {
        return Err(SsmtError::Dim(format!(
            "patch matrix {:?} does not assemble to {h}x{w} with patch {p}",
            patches.shape()
        )));
    }
    let data = patches.data();
    let mut out = vec![0.0f32; h * w];
    for py in 0..gh {
        for px in 0..gw {
            let row = py * gw + px;
            for dy in 0..p {
                let dst = (py * p + dy) * w + px * p;
                let src = row * p * p + dy * p;
                out[dst..dst + p].copy_from_slice(&data[src..src + p]);
            }
        }
    }
    Ok(out)
}

/// Scaled dot-product attention with optional additive logit mask, split
/// over `heads`. Returns the output [M, d] and the per-head weight maps.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = *tape
        .shape(q)
        .last()
        .ok_or_else(|| SsmtError::Dim("attention on rank-0 input".to_string()))?;
    if heads == 0 || d % heads != 0 {
        return Err(SsmtError::Dim(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out: Option<Var> = None;
    let mut weights = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = tape.slice_cols(q, i * dh, dh)?;
        let kh = tape.slice_cols(k, i * dh, dh)?;
        let vh = tape.slice_cols(v, i * dh, dh)?;
        let kt = tape.transpose2(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let mut logits = tape.mul_scalar(logits, scale);
        if let Some(m) = mask {
            logits = tape.add(logits, m)?;
        }
        let attn = tape.softmax(logits)?;
        weights.push(attn);
        let oh = tape.matmul(attn, vh)?;
        out = Some(match out {
            Some(acc) => tape.concat_cols(acc, oh)?,
            None => oh,
        });
    }
    Ok((out.expect("heads >= 1"), weights))
}

fn linear(tape: &mut Tape, b: &mut Binding, x: Var, w: &str, bias: &str) -> Result<Var> {
    let wv = b.var(tape, w)?;
    let bv = b.var(tape, bias)?;
    let y = tape.matmul(x, wv)?;
    tape.add_bias(y, bv)
}

/// Pre-norm residual block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'.
pub fn transformer_layer(
    tape: &mut Tape,
    b: &mut Binding,
    cfg: &ModelConfig,
    layer: usize,
    z: Var,
) -> Result<Var> {
    let p = |suffix: &str| format!("enc.l{layer}.{suffix}");
    let g1 = b.var(tape, &p("ln1.g"))?;
    let b1 = b.var(tape, &p("ln1.b"))?;
    let ln1 = tape.layer_norm(z, g1, b1)?;
    let q = linear(tape, b, ln1, &p("msa.wq"), &p("msa.bq"))?;
    let k = linear(tape, b, ln1, &p("msa.wk"), &p("msa.bk"))?;
    let v = linear(tape, b, ln1, &p("msa.wv"), &p("msa.bv"))?;
    let (att, _) = attention(tape, q, k, v, cfg.heads, None)?;
    let msa = linear(tape, b, att, &p("msa.wo"), &p("msa.bo"))?;
    let z1 = tape.add(msa, z)?;
    let g2 = b.var(tape, &p("ln2.g"))?;
    let b2 = b.var(tape, &p("ln2.b"))?;
    let ln2 = tape.layer_norm(z1, g2, b2)?;
    let h = linear(tape, b, ln2, &p("mlp.w1"), &p("mlp.b1"))?;
    let h = tape.gelu(h);
    let mlp = linear(tape, b, h, &p("mlp.w2"), &p("mlp.b2"))?;
    tape.add(mlp, z1)
}

/// Stride-2 conv stages over [1, H, W]; returns per-stage maps finest first.
pub fn cnn_encode(tape: &mut Tape, b: &mut Binding, cfg: &ModelConfig, image: Var) -> Result<Vec<Var>> {
    let mut x = image;
    let mut skips = Vec::with_capacity(cfg.cnn_channels.len());
    for (i, _) in cfg.cnn_channels.iter().enumerate() {
        let w = b.var(tape, &format!("enc.cnn.s{i}.w"))?;
        let bias = b.var(tape, &format!("enc.cnn.s{i}.b"))?;
        let y = tape.conv2d(x, w, Some(bias), 2, 1)?;
        x = tape.relu(y);
        skips.push(x);
    }
    Ok(skips)
}

/// Everything downstream consumes this bundle.
pub struct EncoderOut {
    /// Final tokens [N, d_enc].
    pub tokens: Var,
    /// Tokens as a spatial map [d_enc, H/P, W/P].
    pub f_t: Var,
    /// CNN stage outputs, finest first.
    pub skips: Vec<Var>,
    /// Token mean [1, d_enc] feeding the size head.
    pub pooled: Var,
}

pub fn encode(
    tape: &mut Tape,
    b: &mut Binding,
    cfg: &ModelConfig,
    image: &[f32],
) -> Result<EncoderOut> {
    let (h, w) = (cfg.image_size, cfg.image_size);
    let patches = tape.constant(patchify(image, h, w, cfg.patch)?);
    let e = b.var(tape, "enc.embed.e")?;
    let pos = b.var(tape, "enc.embed.pos")?;
    let proj = tape.matmul(patches, e)?;
    let mut z = tape.add(proj, pos)?;
    for layer in 0..cfg.layers {
        z = transformer_layer(tape, b, cfg, layer, z)?;
    }
    let g = cfg.grid();
    let zt = tape.transpose2(z)?;
    let f_t = tape.reshape(zt, &[cfg.d_enc, g, g])?;
    let img = tape.constant(Tensor::from_vec(image.to_vec(), &[1, h, w])?);
    let skips = cnn_encode(tape, b, cfg, img)?;
    let n = g * g;
    let avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f32));
    let pooled = tape.matmul(avg, z)?;
    Ok(EncoderOut {
        tokens: z,
        f_t,
        skips,
        pooled,
    })
}

/// Register every encoder parameter with seed-stable initialization.
pub fn register(cfg: &ModelConfig, seed: u64, store: &mut ParamStore) -> Result<()> {
    let d = cfg.d_enc;
    let p2 = cfg.patch * cfg.patch;
    let n = cfg.grid() * cfg.grid();
    store.insert_randn("enc.embed.e", &[p2, d], 1.0 / (p2 as f32).sqrt(), seed)?;
    store.insert_randn("enc.embed.pos", &[n, d], 0.02, seed)?;
    let dstd = 1.0 / (d as f32).sqrt();
    for l in 0..cfg.layers {
        let p = |s: &str| format!("enc.l{l}.{s}");
        store.insert_full(&p("ln1.g"), &[d], 1.0)?;
        store.insert_full(&p("ln1.b"), &[d], 0.0)?;
        for name in ["msa.wq", "msa.wk", "msa.wv", "msa.wo"] {
            store.insert_randn(&p(name), &[d, d], dstd, seed)?;
        }
        for name in ["msa.bq", "msa.bk", "msa.bv", "msa.bo"] {
            store.insert_full(&p(name), &[d], 0.0)?;
        }
        store.insert_full(&p("ln2.g"), &[d], 1.0)?;
        store.insert_full(&p("ln2.b"), &[d], 0.0)?;
        let hidden = cfg.mlp_ratio * d;
        store.insert_randn(&p("mlp.w1"), &[d, hidden], dstd, seed)?;
        store.insert_full(&p("mlp.b1"), &[hidden], 0.0)?;
        store.insert_randn(&p("mlp.w2"), &[hidden, d], 1.0 / (hidden as f32).sqrt(), seed)?;
        store.insert_full(&p("mlp.b2"), &[d], 0.0)?;
    }
    let mut cin = 1usize;
    for (i, &cout) in cfg.cnn_channels.iter().enumerate() {
        let std = 1.0 / ((cin * 9) as f32).sqrt();
        store.insert_randn(&format!("enc.cnn.s{i}.w"), &[cout, cin, 3, 3], std, seed)?;
        store.insert_full(&format!("enc.cnn.s{i}.b"), &[cout], 0.0)?;
        cin = cout;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::desk(32, 4)
    }

    fn store_for(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        register(cfg, seed, &mut s).unwrap();
        s
    }

    fn rand_image(cfg: &ModelConfig, seed: u64) -> Vec<f32> {
        let mut rng = rng_for(seed, "enc-test", &[]);
        (0..cfg.image_size * cfg.image_size)
            .map(|_| rand::Rng::random::<f32>(&mut rng))
            .collect()
    }

    #[test]
    fn patch_counts_follow_grid_arithmetic() {
        let img = vec![0.0; 224 * 224];
        assert_eq!(patchify(&img, 224, 224, 16).unwrap().shape(), [196, 256]);
        let img = vec![0.0; 64 * 64];
        assert_eq!(patchify(&img, 64, 64, 8).unwrap().shape(), [64, 64]);
        assert!(patchify(&img, 64, 64, 7).is_err());
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let mut rng = rng_for(1, "patch", &[]);
        let img: Vec<f32> = (0..48 * 48).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        for p in [4, 8, 16] {
            let t = patchify(&img, 48, 48, p).unwrap();
            assert_eq!(unpatchify(&t, 48, 48, p).unwrap(), img);
        }
    }

    #[test]
    fn embed_reduces_to_each_term_when_the_other_is_zero() {
        let cfg = tiny_cfg();
        let mut store = store_for(&cfg, 3);
        // zero position table: embedding is the pure projection
        let n = cfg.grid() * cfg.grid();
        *store.get_mut("enc.embed.pos").unwrap() =
            Tensor::zeros(&[n, cfg.d_enc]);
        let img = rand_image(&cfg, 3);
        let mut tape = Tape::new();
        let mut b = Binding::all_trainable(&store);
        let patches = tape.constant(patchify(&img, 32, 32, 4).unwrap());
        let e = b.var(&mut tape, "enc.embed.e").unwrap();
        let proj = tape.matmul(patches, e).unwrap();
        let pos = b.var(&mut tape, "enc.embed.pos").unwrap();
        let z0 = tape.add(proj, pos).unwrap();
        assert_eq!(tape.value(z0).data(), tape.value(proj).data());
        // zero patches: embedding equals the position table
        let mut tape = Tape::new();
        let mut b = Binding::all_trainable(&store);
        let zero = tape.constant(Tensor::zeros(&[n, 16]));
        let e = b.var(&mut tape, "enc.embed.e").unwrap();
        let proj = tape.matmul(zero, e).unwrap();
        let pos = b.var(&mut tape, "enc.embed.pos").unwrap();
        let z0 = tape.add(proj, pos).unwrap();
        assert_eq!(tape.value(z0).data(), tape.value(pos).data());
    }

    #[test]
    fn zeroed_output_projections_make_the_layer_identity() {
        let cfg = tiny_cfg();
        let mut store = store_for(&cfg, 5);
        for l in 0..cfg.layers {
            let d = cfg.d_enc;
            *store.get_mut(&format!("enc.l{l}.msa.wo")).unwrap() =
                Tensor::zeros(&[d, d]);
            *store.get_mut(&format!("enc.l{l}.mlp.w2")).unwrap() =
                Tensor::zeros(&[cfg.mlp_ratio * d, d]);
        }
        let mut tape = Tape::new();
        let mut b = Binding::all_trainable(&store);
        let mut rng = rng_for(5, "tokens", &[]);
        let n = cfg.grid() * cfg.grid();
        let z_in = Tensor::randn(&mut rng, &[n, cfg.d_enc], 1.0);
        let z = tape.constant(z_in.clone());
        let mut out = z;
        for l in 0..cfg.layers {
            out = transformer_layer(&mut tape, &mut b, &cfg, l, out).unwrap();
        }
        assert_eq!(tape.value(out).data(), z_in.data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::new();
        let mut rng = rng_for(6, "attn", &[]);
        let q = tape.constant(Tensor::randn(&mut rng, &[5, 8], 1.0));
        let k = tape.constant(Tensor::randn(&mut rng, &[7, 8], 1.0));
        let v = tape.constant(Tensor::randn(&mut rng, &[7, 8], 1.0));
        let (_, weights) = attention(&mut tape, q, k, v, 2, None).unwrap();
        assert_eq!(weights.len(), 2);
        for wv in weights {
            let t = tape.value(wv);
            assert_eq!(t.shape(), [5, 7]);
            for row in t.data().chunks(7) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn msa_is_permutation_equivariant_without_positions() {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, 7);
        let n = cfg.grid() * cfg.grid();
        let mut rng = rng_for(7, "tokens", &[]);
        let z = Tensor::randn(&mut rng, &[n, cfg.d_enc], 1.0);
        // permutation: reverse the token order
        let mut z_perm = vec![0.0f32; z.numel()];
        for i in 0..n {
            z_perm[(n - 1 - i) * cfg.d_enc..(n - i) * cfg.d_enc]
                .copy_from_slice(&z.data()[i * cfg.d_enc..(i + 1) * cfg.d_enc]);
        }
        let run = |tokens: Tensor| {
            let mut tape = Tape::new();
            let mut b = Binding::all_trainable(&store);
            let zv = tape.constant(tokens);
            let out = transformer_layer(&mut tape, &mut b, &cfg, 0, zv).unwrap();
            tape.value(out).data().to_vec()
        };
        let out = run(z.clone());
        let out_perm = run(Tensor::from_vec(z_perm, &[n, cfg.d_enc]).unwrap());
        for i in 0..n {
            for j in 0..cfg.d_enc {
                let a = out[i * cfg.d_enc + j];
                let p = out_perm[(n - 1 - i) * cfg.d_enc + j];
                assert!((a - p).abs() < 1e-5, "token {i} dim {j}: {a} vs {p}");
            }
        }
        // sanity pair: a nonzero position table breaks the equivariance
        let img = rand_image(&cfg, 7);
        let patches = patchify(&img, cfg.image_size, cfg.image_size, cfg.patch).unwrap();
        let mut rev = vec![0.0f32; patches.numel()];
        let cols = patches.shape()[1];
        for i in 0..n {
            rev[(n - 1 - i) * cols..(n - i) * cols]
                .copy_from_slice(&patches.data()[i * cols..(i + 1) * cols]);
        }
        let embed = |p: Tensor| {
            let mut tape = Tape::new();
            let mut b = Binding::all_trainable(&store);
            let pv = tape.constant(p);
            let e = b.var(&mut tape, "enc.embed.e").unwrap();
            let proj = tape.matmul(pv, e).unwrap();
            let pos = b.var(&mut tape, "enc.embed.pos").unwrap();
            let z0 = tape.add(proj, pos).unwrap();
            tape.value(z0).data().to_vec()
        };
        let z0 = embed(patches);
        let z0_rev = embed(Tensor::from_vec(rev, &[n, cols]).unwrap());
        let mut any_differs = false;
        for i in 0..n {
            let a = &z0[i * cfg.d_enc..(i + 1) * cfg.d_enc];
            let p = &z0_rev[(n - 1 - i) * cfg.d_enc..(n - i) * cfg.d_enc];
            if a.iter().zip(p).any(|(x, y)| (x - y).abs() > 1e-6) {
                any_differs = true;
            }
        }
        assert!(any_differs, "position table failed to break equivariance");
    }

    #[test]
    fn cnn_stage_dims_halve_and_zero_input_stays_zero() {
        let cfg = ModelConfig::desk(64, 8);
        let store = store_for(&cfg, 9);
        let mut tape = Tape::new();
        let mut b = Binding::all_trainable(&store);
        let img = tape.constant(Tensor::zeros(&[1, 64, 64]));
        let skips = cnn_encode(&mut tape, &mut b, &cfg, img).unwrap();
        assert_eq!(skips.len(), 3);
        assert_eq!(tape.shape(skips[0]), [8, 32, 32]);
        assert_eq!(tape.shape(skips[1]), [16, 16, 16]);
        assert_eq!(tape.shape(skips[2]), [32, 8, 8]);
        for s in skips {
            assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encode_shapes_match_for_the_default_style_config() {
        let cfg = ModelConfig::desk(64, 8);
        let store = store_for(&cfg, 11);
        let img = rand_image(&cfg, 11);
        let mut tape = Tape::new();
        let mut b = Binding::all_trainable(&store);
        let out = encode(&mut tape, &mut b, &cfg, &img).unwrap();
        assert_eq!(tape.shape(out.tokens), [64, 32]);
        assert_eq!(tape.shape(out.f_t), [32, 8, 8]);
        assert_eq!(tape.shape(out.pooled), [1, 32]);
        // pooled equals the column mean of the tokens
        let z = tape.value(out.tokens).data().to_vec();
        let pooled = tape.value(out.pooled).data().to_vec();
        for j in 0..32 {
            let mean: f32 = (0..64).map(|i| z[i * 32 + j]).sum::<f32>() / 64.0;
            assert!((pooled[j] - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_contract_sweep_over_patch_and_size() {
        for &p in &[4usize, 8, 16] {
            for &size in &[32usize, 64, 224] {
                if size % p != 0 {
                    continue;
                }
                let mut cfg = ModelConfig::desk(size, p);
                cfg.d_enc = 8;
                cfg.heads = 1;
                cfg.layers = 1;
                cfg.mlp_ratio = 2;
                cfg.cnn_channels = (0..p.trailing_zeros()).map(|i| 4 << i.min(3)).collect();
                cfg.validate().unwrap();
                let store = store_for(&cfg, 13);
                let img = rand_image(&cfg, 13);
                let mut tape = Tape::new();
                let mut b = Binding::all_trainable(&store);
                let out = encode(&mut tape, &mut b, &cfg, &img).unwrap();
                let g = size / p;
                assert_eq!(tape.shape(out.tokens), [g * g, 8], "P={p} size={size}");
                assert_eq!(tape.shape(out.f_t), [8, g, g]);
                assert_eq!(tape.shape(out.pooled), [1, 8]);
                assert_eq!(out.skips.len(), p.trailing_zeros() as usize);
                let mut expect = size;
                for (i, s) in out.skips.iter().enumerate() {
                    expect /= 2;
                    let sh = tape.shape(*s);
                    assert_eq!((sh[1], sh[2]), (expect, expect), "stage {i}");
                }
                assert_eq!(expect, g, "coarsest CNN stage sits on the token grid");
            }
        }
    }

    #[test]
    fn encode_is_deterministic_for_a_fixed_seed() {
        let cfg = tiny_cfg();
        let img = rand_image(&cfg, 15);
        let run = || {
            let store = store_for(&cfg, 15);
            let mut tape = Tape::new();
            let mut b = Binding::all_trainable(&store);
            let out = encode(&mut tape, &mut b, &cfg, &img).unwrap();
            tape.value(out.tokens).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
