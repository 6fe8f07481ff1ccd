//! The nine acceptance gates. Each test prints one pass/fail line (visible
//! with `--nocapture`) and asserts its stated tolerance.

use ssmt::autodiff::{Tape, Tensor};
use ssmt::data::phantom::{generate_phantom, PhantomConfig};
use ssmt::data::UltrasoundSample;
use ssmt::data::augment::AugmentationConfig;
use ssmt::eval::{dsc, iou, threshold_probs};
use ssmt::gradsuite;
use ssmt::model::decoder::{attention_mask, refine_queries, BranchId};
use ssmt::model::params::Binding;
use ssmt::model::{ModelConfig, SsmtModel, TaskSet};
use ssmt::rng::rng_for;
use ssmt::train::checkpoint;
use ssmt::train::losses::{AblationFlags, LossWeights};
use ssmt::train::phases::{
    mean_recon_loss, run_pretrain, run_supervised, PhaseConfig, METRICS_CSV, METRICS_CSV_HEADER,
};
use std::path::{Path, PathBuf};
use std::time::Instant;

fn phantoms(n: usize, side: usize, seed: u64) -> Vec<UltrasoundSample> {
    let cfg = PhantomConfig {
        size: side,
        ..PhantomConfig::default()
    };
    (0..n)
        .map(|i| generate_phantom(&cfg, &mut rng_for(seed, "acc.ph", &[i as u64])).unwrap())
        .collect()
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ssmt_acc_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict} - {detail}");
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let outcomes = gradsuite::run_suite(42).unwrap();
    let elapsed = t0.elapsed();
    let worst = outcomes
        .iter()
        .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
        .unwrap();
    let pass = gradsuite::all_pass(&outcomes) && elapsed.as_secs() < 60;
    report(
        1,
        pass,
        &format!(
            "{} checks (primitives tol 1e-3, end-to-end tol 1e-2), worst {} rel {:.2e}, {:.1}s",
            outcomes.len(),
            worst.name,
            worst.max_rel,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_metric_oracle() {
    let mut rng = rng_for(42, "acc.metrics", &[]);
    let mut identity_worst = 0.0f64;
    for case in 0..1000 {
        let n = 16 * 16;
        let pred: Vec<f32> = (0..n)
            .map(|_| if rand::Rng::random_bool(&mut rng, 0.3) { 1.0 } else { 0.0 })
            .collect();
        let gt: Vec<f32> = (0..n)
            .map(|_| if rand::Rng::random_bool(&mut rng, 0.3) { 1.0 } else { 0.0 })
            .collect();
        // brute-force pixel-count oracle
        let mut inter = 0u64;
        let mut np = 0u64;
        let mut ng = 0u64;
        for i in 0..n {
            if pred[i] == 1.0 {
                np += 1;
            }
            if gt[i] == 1.0 {
                ng += 1;
            }
            if pred[i] == 1.0 && gt[i] == 1.0 {
                inter += 1;
            }
        }
        let union = np + ng - inter;
        let oracle_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 } as f32;
        let oracle_dsc = if np + ng == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (np + ng) as f64
        } as f32;
        let got_iou = iou(&pred, &gt).unwrap();
        let got_dsc = dsc(&pred, &gt).unwrap();
        assert_eq!(got_iou, oracle_iou, "case {case}: iou vs counting oracle");
        assert_eq!(got_dsc, oracle_dsc, "case {case}: dsc vs counting oracle");
        let identity = 2.0 * got_iou as f64 / (1.0 + got_iou as f64);
        identity_worst = identity_worst.max((identity - got_dsc as f64).abs());
    }
    let pass = identity_worst < 1e-6;
    report(
        2,
        pass,
        &format!(
            "1000 random 16x16 pairs match the counting oracle exactly; dsc=2iou/(1+iou) worst gap {identity_worst:.1e}"
        ),
    );
}

#[test]
fn criterion_3_masked_attention() {
    let model = SsmtModel::new(ModelConfig::desk(32, 4), 42).unwrap();
    let nq = model.cfg.queries;
    let d = model.cfg.d_dec;
    let m = 36;
    let mut rng = rng_for(3, "acc.att", &[]);
    let p = Tensor::randn(&mut rng, &[nq, d], 0.5);
    let f_pos = Tensor::randn(&mut rng, &[m, d], 0.5);

    // all-foreground hard masks reduce to unmasked attention
    let mut tape = Tape::new();
    let mut b = Binding::new(&model.store, |_| false);
    let pv = tape.constant(p.clone());
    let fv = tape.constant(f_pos.clone());
    let all_fg = attention_mask(&vec![1.0; nq * m], nq, m).unwrap();
    let mv = tape.constant(all_fg);
    let (p_masked, w_masked) =
        refine_queries(&mut tape, &mut b, BranchId::Nodule, pv, fv, mv).unwrap();
    let zero_mask = tape.constant(Tensor::zeros(&[nq, m]));
    let (p_plain, w_plain) =
        refine_queries(&mut tape, &mut b, BranchId::Nodule, pv, fv, zero_mask).unwrap();
    let max_gap_p = tape
        .value(p_masked)
        .data()
        .iter()
        .zip(tape.value(p_plain).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    let max_gap_w = tape
        .value(w_masked)
        .data()
        .iter()
        .zip(tape.value(w_plain).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    // masked-out positions receive exactly zero attention weight
    let mut z = vec![1.0f32; nq * m];
    for q in 0..nq {
        for j in 0..m {
            if (q + j) % 3 == 0 && j > 0 {
                z[q * m + j] = 0.0;
            }
        }
    }
    let part = attention_mask(&z, nq, m).unwrap();
    let mv2 = tape.constant(part);
    let (_, w_part) = refine_queries(&mut tape, &mut b, BranchId::Nodule, pv, fv, mv2).unwrap();
    let weights = tape.value(w_part).data().to_vec();
    let mut masked_max = 0.0f32;
    let mut live = 0usize;
    for q in 0..nq {
        for j in 0..m {
            if z[q * m + j] == 0.0 {
                masked_max = masked_max.max(weights[q * m + j].abs());
            } else {
                live += 1;
            }
        }
    }
    let pass = max_gap_p < 1e-6 && max_gap_w < 1e-6 && masked_max == 0.0 && live > 0;
    report(
        3,
        pass,
        &format!(
            "all-foreground vs unmasked gap {max_gap_p:.1e} (weights {max_gap_w:.1e}); masked-out weight max {masked_max:.1e}"
        ),
    );
}

#[test]
fn criterion_4_overfit_eight_phantoms() {
    let t0 = Instant::now();
    let cfg = ModelConfig::desk(64, 8);
    assert_eq!(
        (cfg.d_enc, cfg.layers, cfg.refine_iters, cfg.queries),
        (32, 2, 3, 4),
        "criterion 4 runs at the stated desk scale"
    );
    let mut model = SsmtModel::new(cfg, 42).unwrap();
    let samples = phantoms(8, 64, 4);
    let dir = scratch("overfit");
    let phase = PhaseConfig {
        epochs: 500,
        batch_size: 8,
        val_every: 25,
        ..PhaseConfig::default()
    };
    let state = run_supervised(
        &mut model,
        &samples,
        &[],
        &phase,
        &LossWeights::default(),
        AblationFlags::default(),
        &AugmentationConfig::none(),
        &dir,
    )
    .unwrap();
    let elapsed = t0.elapsed();
    let pass = state.meta.step <= 500 && state.meta.best_dsc >= 0.90 && elapsed.as_secs() < 600;
    report(
        4,
        pass,
        &format!(
            "train DSC {:.4} after {} steps, {:.0}s (limits: 0.90, 500, 600s)",
            state.meta.best_dsc,
            state.meta.step,
            elapsed.as_secs_f64()
        ),
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn criterion_5_two_phase_contract() {
    let mut model = SsmtModel::new(ModelConfig::desk(64, 8), 42).unwrap();
    let before_hashes = model.store.fingerprints();
    let samples = phantoms(64, 64, 5);
    let before_loss = mean_recon_loss(&model, &samples).unwrap();
    let dir = scratch("twophase");
    // 64 phantoms, batch 8 -> 8 steps per epoch; 25 epochs = 200 steps
    let phase = PhaseConfig {
        epochs: 25,
        batch_size: 8,
        ..PhaseConfig::default()
    };
    let state = run_pretrain(
        &mut model,
        &samples,
        &phase,
        &AugmentationConfig::none(),
        &dir,
    )
    .unwrap();
    assert_eq!(state.meta.step, 200);
    let after_loss = mean_recon_loss(&model, &samples).unwrap();
    let after_hashes = model.store.fingerprints();
    let mut frozen_ok = true;
    for (name, h) in &before_hashes {
        if !ssmt::model::pretrain_trainable(name) && after_hashes[name] != *h {
            frozen_ok = false;
        }
    }
    let drop = before_loss / after_loss;
    let pass = frozen_ok && drop >= 5.0;
    report(
        5,
        pass,
        &format!(
            "non-(encoder+recon) hashes unchanged: {frozen_ok}; Charbonnier {before_loss:.4} -> {after_loss:.4} ({drop:.1}x, need 5x) over 200 steps"
        ),
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn criterion_6_semi_supervision_benefit() {
    let train = phantoms(64, 64, 6);
    let val = phantoms(16, 64, 7);
    let phase2 = PhaseConfig {
        epochs: 12,
        batch_size: 8,
        val_every: 12,
        ..PhaseConfig::default()
    };
    let phase1 = PhaseConfig {
        epochs: 12,
        batch_size: 8,
        ..PhaseConfig::default()
    };
    let mut with_pre = Vec::new();
    let mut scratch_arm = Vec::new();
    for seed in [41u64, 42, 43] {
        let p2 = PhaseConfig { seed, ..phase2 };
        // arm 1: phase 1 on the train images, then the shared phase 2
        let dir = scratch(&format!("semi_pre_{seed}"));
        let mut m = SsmtModel::new(ModelConfig::desk(64, 8), seed).unwrap();
        run_pretrain(
            &mut m,
            &train,
            &PhaseConfig { seed, ..phase1 },
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        let s = run_supervised(
            &mut m,
            &train,
            &val,
            &p2,
            &LossWeights::default(),
            AblationFlags::default(),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        with_pre.push(s.meta.best_dsc as f64);
        std::fs::remove_dir_all(&dir).ok();
        // arm 2: identical phase 2 from scratch
        let dir = scratch(&format!("semi_raw_{seed}"));
        let mut m = SsmtModel::new(ModelConfig::desk(64, 8), seed).unwrap();
        let s = run_supervised(
            &mut m,
            &train,
            &val,
            &p2,
            &LossWeights::default(),
            AblationFlags::default(),
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        scratch_arm.push(s.meta.best_dsc as f64);
        std::fs::remove_dir_all(&dir).ok();
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pre, raw) = (mean(&with_pre), mean(&scratch_arm));
    let pass = pre >= raw - 0.005;
    report(
        6,
        pass,
        &format!(
            "3-seed mean val DSC: pretrained {pre:.4} vs scratch {raw:.4} (slack 0.5 points); per-seed pre {with_pre:?} raw {scratch_arm:?}"
        ),
    );
}

#[test]
fn criterion_7_ablation_machinery() {
    let samples = phantoms(6, 32, 8);
    let weights = LossWeights::default();
    assert_eq!(
        (weights.alpha, weights.beta, weights.gamma, weights.eta),
        (0.8, 0.1, 0.05, 0.05)
    );
    let mut rows = Vec::new();
    for variant in 1..=5 {
        let flags = AblationFlags::variant(variant).unwrap();
        let dir = scratch(&format!("ablate_{variant}"));
        let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 42).unwrap();
        let phase = PhaseConfig {
            epochs: 1,
            batch_size: 3,
            ..PhaseConfig::default()
        };
        run_supervised(
            &mut model,
            &samples,
            &[],
            &phase,
            &weights,
            flags,
            &AugmentationConfig::none(),
            &dir,
        )
        .unwrap();
        let csv = std::fs::read_to_string(dir.join(METRICS_CSV)).unwrap();
        let row: Vec<f64> = csv
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        rows.push(row);
        std::fs::remove_dir_all(&dir).ok();
    }
    // variant #5 logs all four terms, and the weighted sum reproduces the total
    let v5 = &rows[4];
    let (total, nod, gld, siz, rec) = (v5[3], v5[4], v5[5], v5[6], v5[7]);
    let recomposed = 0.8 * nod + 0.1 * gld + 0.05 * siz + 0.05 * rec;
    let all_live = nod > 0.0 && gld > 0.0 && siz > 0.0 && rec > 0.0;
    let exact = (total - recomposed).abs() < 2e-6;
    // variant #1 is nodule-only: the disabled terms log as zero
    let v1_clean = rows[0][5] == 0.0 && rows[0][6] == 0.0 && rows[0][7] == 0.0;
    let pass = all_live && exact && v1_clean;
    report(
        7,
        pass,
        &format!(
            "variants 1-5 ran; variant 5 row decomposes as 0.8/0.1/0.05/0.05 (gap {:.1e}), all four terms live; variant 1 logs zero for disabled terms",
            (total - recomposed).abs()
        ),
    );
}

#[test]
fn criterion_8_seed_42_byte_identical() {
    let run = |dir: &Path| {
        let train = phantoms(8, 64, 9);
        let mut model = SsmtModel::new(ModelConfig::desk(64, 8), 42).unwrap();
        let p1 = PhaseConfig {
            epochs: 1,
            batch_size: 8,
            ..PhaseConfig::default()
        };
        run_pretrain(&mut model, &train, &p1, &AugmentationConfig::none(), &dir.join("pre")).unwrap();
        let p2 = PhaseConfig {
            epochs: 3,
            batch_size: 4,
            ..PhaseConfig::default()
        };
        run_supervised(
            &mut model,
            &train,
            &[],
            &p2,
            &LossWeights::default(),
            AblationFlags::default(),
            &AugmentationConfig::default(),
            &dir.join("sup"),
        )
        .unwrap();
    };
    let d1 = scratch("det_a");
    let d2 = scratch("det_b");
    run(&d1);
    run(&d2);
    let mut identical = true;
    for rel in ["pre/metrics.csv", "pre/last.ckpt", "sup/metrics.csv", "sup/last.ckpt", "sup/best.ckpt"] {
        let a = std::fs::read(d1.join(rel)).unwrap();
        let b = std::fs::read(d2.join(rel)).unwrap();
        if a != b {
            identical = false;
        }
    }
    let csv = std::fs::read_to_string(d1.join("sup/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), METRICS_CSV_HEADER);
    report(
        8,
        identical,
        "seed-42 two-phase runs (with augmentation) produce byte-identical CSVs and checkpoints",
    );
    std::fs::remove_dir_all(&d1).ok();
    std::fs::remove_dir_all(&d2).ok();
}

#[test]
fn criterion_9_full_scale_numbers_out_of_scope() {
    // The published benchmark numbers (IoU 78.34 +- 0.15, DSC 86.94 +- 0.10
    // and the ablation/transfer tables) need full-scale backbones trained on
    // real clinical datasets; this desk-scale build substitutes the property
    // suite above and records the substitution here.
    let substitutes = [
        "gradient suite",
        "metric oracle",
        "masked-attention invariants",
        "overfit check",
        "two-phase contract",
        "semi-supervision benefit",
        "ablation machinery",
        "determinism",
    ];
    report(
        9,
        substitutes.len() == 8,
        "full-scale benchmark reproduction is explicitly out of scope; criteria 1-8 substitute",
    );
}

/// The inference round trip named in the eval contract: a model overfit on
/// one phantom reproduces its mask through the full file pipeline.
#[test]
fn infer_round_trip_on_an_overfit_phantom() {
    let samples = phantoms(8, 32, 10);
    let mut model = SsmtModel::new(ModelConfig::desk(32, 4), 42).unwrap();
    let dir = scratch("roundtrip");
    let phase = PhaseConfig {
        epochs: 60,
        batch_size: 8,
        val_every: 60,
        ..PhaseConfig::default()
    };
    run_supervised(
        &mut model,
        &samples,
        &[],
        &phase,
        &LossWeights::default(),
        AblationFlags::default(),
        &AugmentationConfig::none(),
        &dir,
    )
    .unwrap();
    // through the file pipeline: write image + gt, run infer, check DSC
    let s = &samples[0];
    ssmt::data::pgm::write_pgm(&dir.join("img.pgm"), &s.image, s.h, s.w).unwrap();
    ssmt::data::pgm::write_pgm(
        &dir.join("gt.pgm"),
        s.nodule_mask.as_ref().unwrap(),
        s.h,
        s.w,
    )
    .unwrap();
    let out = ssmt::eval::infer(
        &dir.join("last.ckpt"),
        &dir.join("img.pgm"),
        Some(&dir.join("gt.pgm")),
        &dir.join("out"),
    )
    .unwrap();
    assert!(out.nodule_pgm.is_file() && out.gland_pgm.is_file() && out.overlay_ppm.is_file());
    let (pred, h, w) = ssmt::data::pgm::read_pgm(&out.nodule_pgm).unwrap();
    assert_eq!((h, w), (s.h, s.w), "outputs carry the input's dimensions");
    let pred = threshold_probs(&pred);
    let direct = dsc(&pred, s.nodule_mask.as_ref().unwrap()).unwrap();
    let reported = out.dsc_vs_gt.unwrap();
    assert!(
        (direct - reported).abs() < 1e-6,
        "reported {reported} vs recomputed {direct}"
    );
    assert!(reported >= 0.9, "overfit round trip DSC {reported}");
    std::fs::remove_dir_all(&dir).ok();
}
