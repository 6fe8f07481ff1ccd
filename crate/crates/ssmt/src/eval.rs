//! Binary segmentation metrics, dataset evaluation across seeds, and
//! single-image inference with mask/overlay export.
//!
//! Metrics come from integer pixel counts, never float accumulation, so a
//! brute-force counting oracle must agree exactly. Per-image work fans out
//! across threads (capped by `SSMT_THREADS`); reductions run over
//! stem-sorted results so manifest order never changes a single bit.

use crate::autodiff::Tape;
use crate::data::augment::{normalize_resize, resize, Interp};
use crate::data::dataset::{load_sample, DatasetManifest};
use crate::data::pgm::{read_gray_image, write_pgm, write_ppm_overlay};
use crate::error::{Result, SsmtError};
use crate::model::params::Binding;
use crate::model::{SsmtModel, TaskSet};
use crate::train::checkpoint;
use std::path::{Path, PathBuf};

/// Map probabilities to a {0,1} mask at the 0.5 decision threshold.
pub fn threshold_probs(probs: &[f32]) -> Vec<f32> {
    probs.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect()
}

fn mask_counts(pred: &[f32], gt: &[f32]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(SsmtError::Shape {
            op: "mask_counts",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p != 0.0 && p != 1.0 || g != 0.0 && g != 1.0 {
            return Err(SsmtError::Contract(format!(
                "metrics need binary masks, saw values {p} and {g}"
            )));
        }
        let (bp, bg) = (p == 1.0, g == 1.0);
        np += bp as usize;
        ng += bg as usize;
        inter += (bp && bg) as usize;
    }
    Ok((inter, np, ng))
}

/// Intersection over union; two empty masks agree perfectly (1.0).
pub fn iou(pred: &[f32], gt: &[f32]) -> Result<f32> {
    let (inter, np, ng) = mask_counts(pred, gt)?;
    let union = np + ng - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok((inter as f64 / union as f64) as f32)
}

/// Overlap coefficient 2|inter|/(|pred|+|gt|); both-empty is 1.0.
pub fn dsc(pred: &[f32], gt: &[f32]) -> Result<f32> {
    let (inter, np, ng) = mask_counts(pred, gt)?;
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok((2.0 * inter as f64 / (np + ng) as f64) as f32)
}

/// Worker-thread cap: `SSMT_THREADS` when set (minimum 1), else the
/// machine's available parallelism.
pub fn thread_budget() -> usize {
    if let Ok(v) = std::env::var("SSMT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Order-preserving parallel map over contiguous chunks.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<R>> = Vec::with_capacity(items.len());
    out.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<R>] = &mut out;
        for piece in items.chunks(chunk) {
            let (head, tail) = rest.split_at_mut(piece.len());
            rest = tail;
            let f = &f;
            scope.spawn(move || {
                for (slot, item) in head.iter_mut().zip(piece) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every slot written")).collect()
}

/// Soft nodule and gland probability maps for one image at model resolution.
pub fn predict(model: &SsmtModel, image: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut tape = Tape::new();
    let mut b = Binding::new(&model.store, |_| false);
    let tasks = TaskSet {
        nodule: true,
        gland: true,
        size: false,
        recon: false,
    };
    let out = model.forward(&mut tape, &mut b, image, tasks)?;
    let nod = tape
        .value(out.nodule.expect("nodule task requested").prob_out)
        .data()
        .to_vec();
    let gld = tape
        .value(out.gland.expect("gland task requested").prob_out)
        .data()
        .to_vec();
    Ok((nod, gld))
}

/// One image's metrics under one seed's model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub seed: u64,
    pub stem: String,
    pub iou: f32,
    pub dsc: f32,
}

/// Evaluation results: per-image rows plus per-seed dataset means, reported
/// as mean +/- population std across seeds in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub seeds: Vec<u64>,
    pub images: Vec<ImageMetrics>,
    pub per_seed_iou: Vec<f64>,
    pub per_seed_dsc: Vec<f64>,
    /// Manifest records without a nodule ground truth, skipped per seed.
    pub skipped: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "mean_std of empty slice");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    /// (mean, population std) of the per-seed IoU means, in percent.
    pub fn iou_pct(&self) -> (f64, f64) {
        let (m, s) = mean_std(&self.per_seed_iou);
        (100.0 * m, 100.0 * s)
    }

    pub fn dsc_pct(&self) -> (f64, f64) {
        let (m, s) = mean_std(&self.per_seed_dsc);
        (100.0 * m, 100.0 * s)
    }

    /// Table-style two-decimal percent summary.
    pub fn summary(&self) -> String {
        let (im, is) = self.iou_pct();
        let (dm, ds) = self.dsc_pct();
        format!("IoU(%) {im:.2} ± {is:.2}, DSC(%) {dm:.2} ± {ds:.2}")
    }

    /// Full report as CSV: per-image rows, then a summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,stem,iou,dsc\n");
        for m in &self.images {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", m.seed, m.stem, m.iou, m.dsc));
        }
        let (im, is) = self.iou_pct();
        let (dm, ds) = self.dsc_pct();
        out.push_str("metric,mean_pct,std_pct\n");
        out.push_str(&format!("iou,{im:.2},{is:.2}\n"));
        out.push_str(&format!("dsc,{dm:.2},{ds:.2}\n"));
        out
    }
}

/// Evaluate the checkpoint(s) over every nodule-labeled record in the
/// manifest. `ckpt_pattern` may contain `{seed}`, resolving to one trained
/// model per seed; a plain path evaluates the same model under every seed.
pub fn evaluate(
    ckpt_pattern: &str,
    manifest: &DatasetManifest,
    seeds: &[u64],
) -> Result<MetricReport> {
    if seeds.is_empty() {
        return Err(SsmtError::Config("evaluate needs at least one seed".to_string()));
    }
    let mut report = MetricReport {
        seeds: seeds.to_vec(),
        images: Vec::new(),
        per_seed_iou: Vec::new(),
        per_seed_dsc: Vec::new(),
        skipped: 0,
    };
    let threads = thread_budget();
    let mut usable = Vec::new();
    for rec in &manifest.records {
        if rec.mask_nodule.is_some() {
            usable.push(rec.clone());
        } else {
            report.skipped += 1;
        }
    }
    if usable.is_empty() {
        return Err(SsmtError::Dataset(
            "no records with nodule ground truth to evaluate".to_string(),
        ));
    }
    for &seed in seeds {
        let path = ckpt_pattern.replace("{seed}", &seed.to_string());
        let model = checkpoint::load_model(Path::new(&path))?;
        let (h, w) = (model.cfg.image_size, model.cfg.image_size);
        let mut rows: Vec<Result<ImageMetrics>> = parallel_map(&usable, threads, |rec| {
            let sample = load_sample(rec, h, w)?;
            let gt = sample
                .nodule_mask
                .as_ref()
                .expect("record pre-filtered for nodule mask");
            let (nod_prob, _) = predict(&model, &sample.image)?;
            let pred = threshold_probs(&nod_prob);
            Ok(ImageMetrics {
                seed,
                stem: rec.stem.clone(),
                iou: iou(&pred, gt)?,
                dsc: dsc(&pred, gt)?,
            })
        });
        // sorted reduction: the aggregate is invariant to manifest order
        let mut seed_rows = Vec::with_capacity(rows.len());
        for r in rows.drain(..) {
            seed_rows.push(r?);
        }
        seed_rows.sort_by(|a, b| a.stem.cmp(&b.stem));
        let n = seed_rows.len() as f64;
        let mi = seed_rows.iter().map(|r| r.iou as f64).sum::<f64>() / n;
        let md = seed_rows.iter().map(|r| r.dsc as f64).sum::<f64>() / n;
        report.per_seed_iou.push(mi);
        report.per_seed_dsc.push(md);
        report.images.extend(seed_rows);
    }
    Ok(report)
}

/// Products of one inference call.
#[derive(Debug, Clone)]
pub struct InferOutput {
    pub nodule_pgm: PathBuf,
    pub gland_pgm: PathBuf,
    pub overlay_ppm: PathBuf,
    /// Overlap against the provided ground truth, when given.
    pub dsc_vs_gt: Option<f32>,
}

/// Run one image through a checkpoint; write predicted nodule and gland
/// masks (PGM) and an overlay (PPM, prediction in red, ground truth in
/// green) at the input image's own dimensions.
pub fn infer(
    ckpt: &Path,
    image_path: &Path,
    gt_path: Option<&Path>,
    out_dir: &Path,
) -> Result<InferOutput> {
    let model = checkpoint::load_model(ckpt)?;
    let (gray, h, w) = read_gray_image(image_path)?;
    let side = model.cfg.image_size;
    let net_in = normalize_resize(&gray, h, w, side, side)?;
    let (nod_prob, gld_prob) = predict(&model, &net_in)?;
    // back to native resolution before the decision threshold
    let nod_full = threshold_probs(&resize(&nod_prob, side, side, h, w, Interp::Bilinear)?);
    let gld_full = threshold_probs(&resize(&gld_prob, side, side, h, w, Interp::Bilinear)?);
    let gt = match gt_path {
        Some(p) => {
            let (g, gh, gw) = read_gray_image(p)?;
            let g = if (gh, gw) == (h, w) {
                g
            } else {
                resize(&g, gh, gw, h, w, Interp::Nearest)?
            };
            Some(threshold_probs(&g))
        }
        None => None,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| SsmtError::io(out_dir, e))?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let nodule_pgm = out_dir.join(format!("{stem}_nodule.pgm"));
    let gland_pgm = out_dir.join(format!("{stem}_gland.pgm"));
    let overlay_ppm = out_dir.join(format!("{stem}_overlay.ppm"));
    write_pgm(&nodule_pgm, &nod_full, h, w)?;
    write_pgm(&gland_pgm, &gld_full, h, w)?;
    write_ppm_overlay(&overlay_ppm, &gray, &nod_full, gt.as_deref(), h, w)?;
    let dsc_vs_gt = match &gt {
        Some(g) => Some(dsc(&nod_full, g)?),
        None => None,
    };
    Ok(InferOutput {
        nodule_pgm,
        gland_pgm,
        overlay_ppm,
        dsc_vs_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn identical_nonempty_masks_score_one_on_both_metrics() {
        let m: Vec<f32> = (0..256).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
        assert_eq!(dsc(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero() {
        let a: Vec<f32> = (0..64).map(|i| if i < 10 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f32> = (0..64).map(|i| if i >= 50 { 1.0 } else { 0.0 }).collect();
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn left_half_against_full_frame_hand_counts() {
        let (h, w) = (16, 16);
        let mut pred = vec![0.0f32; h * w];
        for r in 0..h {
            for c in 0..w / 2 {
                pred[r * w + c] = 1.0;
            }
        }
        let gt = vec![1.0f32; h * w];
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
        let d = dsc(&pred, &gt).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-7, "{d}");
    }

    #[test]
    fn both_empty_masks_agree_perfectly() {
        let z = vec![0.0f32; 32];
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
        assert_eq!(dsc(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn shape_and_binariness_are_enforced() {
        let a = vec![0.0f32; 8];
        let b = vec![0.0f32; 9];
        assert!(iou(&a, &b).is_err());
        let soft = vec![0.5f32; 8];
        assert!(dsc(&a[..8], &soft).is_err());
    }

    #[test]
    fn dsc_equals_the_iou_identity_on_random_pairs() {
        let mut rng = rng_for(2, "pairs", &[]);
        for trial in 0..1000 {
            let density_a: f32 = rng.random();
            let density_b: f32 = rng.random();
            let a: Vec<f32> = (0..256)
                .map(|_| if rng.random::<f32>() < density_a { 1.0 } else { 0.0 })
                .collect();
            let b: Vec<f32> = (0..256)
                .map(|_| if rng.random::<f32>() < density_b { 1.0 } else { 0.0 })
                .collect();
            let i = iou(&a, &b).unwrap() as f64;
            let d = dsc(&a, &b).unwrap() as f64;
            assert!(
                (d - 2.0 * i / (1.0 + i)).abs() < 1e-6,
                "trial {trial}: dsc {d} vs identity {}",
                2.0 * i / (1.0 + i)
            );
        }
    }

    #[test]
    fn metrics_match_a_brute_force_counting_oracle_exactly() {
        let mut rng = rng_for(3, "oracle", &[]);
        for _ in 0..1000 {
            let a: Vec<f32> = (0..256)
                .map(|_| if rng.random::<f32>() < 0.4 { 1.0 } else { 0.0 })
                .collect();
            let b: Vec<f32> = (0..256)
                .map(|_| if rng.random::<f32>() < 0.6 { 1.0 } else { 0.0 })
                .collect();
            let mut inter = 0u32;
            let mut na = 0u32;
            let mut nb = 0u32;
            for k in 0..256 {
                if a[k] == 1.0 {
                    na += 1;
                }
                if b[k] == 1.0 {
                    nb += 1;
                }
                if a[k] == 1.0 && b[k] == 1.0 {
                    inter += 1;
                }
            }
            let union = na + nb - inter;
            let oracle_iou = if union == 0 {
                1.0
            } else {
                (inter as f64 / union as f64) as f32
            };
            let oracle_dsc = if na + nb == 0 {
                1.0
            } else {
                (2.0 * inter as f64 / (na + nb) as f64) as f32
            };
            assert_eq!(iou(&a, &b).unwrap(), oracle_iou);
            assert_eq!(dsc(&a, &b).unwrap(), oracle_dsc);
        }
    }

    #[test]
    fn iou_never_exceeds_dsc() {
        let mut rng = rng_for(5, "order", &[]);
        for _ in 0..200 {
            let a: Vec<f32> = (0..64)
                .map(|_| if rng.random::<f32>() < 0.5 { 1.0 } else { 0.0 })
                .collect();
            let b: Vec<f32> = (0..64)
                .map(|_| if rng.random::<f32>() < 0.5 { 1.0 } else { 0.0 })
                .collect();
            assert!(iou(&a, &b).unwrap() <= dsc(&a, &b).unwrap() + 1e-9);
        }
    }

    #[test]
    fn threshold_rounds_half_up() {
        let out = threshold_probs(&[0.0, 0.49999, 0.5, 0.50001, 1.0]);
        assert_eq!(out, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn parallel_map_preserves_order_at_any_thread_count() {
        let items: Vec<usize> = (0..103).collect();
        for threads in [1, 2, 3, 8, 200] {
            let out = parallel_map(&items, threads, |&x| x * x);
            let expect: Vec<usize> = items.iter().map(|&x| x * x).collect();
            assert_eq!(out, expect, "threads = {threads}");
        }
    }

    #[test]
    fn mean_std_is_population_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((m - 5.0).abs() < 1e-12);
        assert!((s - 2.0).abs() < 1e-12);
        let (_, s1) = mean_std(&[0.7]);
        assert_eq!(s1, 0.0, "single seed has zero spread");
    }
}
