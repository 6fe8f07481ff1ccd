//! Geometric augmentation and input normalization. Images are resampled
//! bilinearly; masks use nearest-neighbor and are re-binarized so they stay
//! strictly {0, 1}.

use crate::autodiff::tape::{bilinear_sample, src_coord};
use crate::data::{compute_size_label, UltrasoundSample};
use crate::error::{Result, SsmtError};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Corner-aligned resize of a row-major grid. Nearest rounds the source
/// coordinate; bilinear blends the four neighbors.
pub fn resize(data: &[f32], h: usize, w: usize, oh: usize, ow: usize, interp: Interp) -> Result<Vec<f32>> {
    if h == 0 || w == 0 || data.len() != h * w {
        return Err(SsmtError::Dim(format!(
            "resize input {}x{} with {} values",
            h,
            w,
            data.len()
        )));
    }
    if oh == 0 || ow == 0 {
        return Err(SsmtError::Dim(format!("resize target {oh}x{ow} is empty")));
    }
    if (oh, ow) == (h, w) {
        return Ok(data.to_vec());
    }
    let mut out = vec![0.0f32; oh * ow];
    for r in 0..oh {
        let sy = src_coord(r, oh, h);
        for c in 0..ow {
            let sx = src_coord(c, ow, w);
            out[r * ow + c] = match interp {
                Interp::Bilinear => bilinear_sample(data, h, w, sy, sx),
                Interp::Nearest => {
                    let ry = (sy.round() as usize).min(h - 1);
                    let rx = (sx.round() as usize).min(w - 1);
                    data[ry * w + rx]
                }
            };
        }
    }
    Ok(out)
}

/// Resize to the model grid and min-max normalize into [0,1]. A constant
/// image normalizes to all zeros.
pub fn normalize_resize(image: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f32>> {
    let mut out = resize(image, h, w, oh, ow, Interp::Bilinear)?;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &out {
        if !v.is_finite() {
            return Err(SsmtError::NonFinite("image to normalize".to_string()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for v in out.iter_mut() {
            *v = (*v - lo) * inv;
        }
    } else {
        out.fill(0.0);
    }
    Ok(out)
}

fn binarize(mask: &mut [f32]) {
    for v in mask.iter_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
}

/// Resize a full sample: bilinear+normalize for the image, nearest plus
/// re-binarization for masks, size label recomputed from the resized mask.
pub fn resize_sample(sample: &UltrasoundSample, oh: usize, ow: usize) -> Result<UltrasoundSample> {
    let image = normalize_resize(&sample.image, sample.h, sample.w, oh, ow)?;
    let resize_mask = |m: &Option<Vec<f32>>| -> Result<Option<Vec<f32>>> {
        match m {
            Some(m) => {
                let mut r = resize(m, sample.h, sample.w, oh, ow, Interp::Nearest)?;
                binarize(&mut r);
                Ok(Some(r))
            }
            None => Ok(None),
        }
    };
    let nodule_mask = resize_mask(&sample.nodule_mask)?;
    let gland_mask = resize_mask(&sample.gland_mask)?;
    let size_label = match &nodule_mask {
        Some(m) => Some(compute_size_label(m)?),
        None => None,
    };
    Ok(UltrasoundSample {
        image,
        h: oh,
        w: ow,
        nodule_mask,
        gland_mask,
        size_label,
    })
}

/// Mirror columns in place-order: out(r, c) = in(r, w-1-c).
pub fn flip_horizontal(data: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = data[r * w + (w - 1 - c)];
        }
    }
    out
}

/// Rotate content by `degrees` about the canvas center via inverse mapping;
/// coordinates falling outside the source are zero.
pub fn rotate(data: &[f32], h: usize, w: usize, degrees: f32, interp: Interp) -> Vec<f32> {
    let th = degrees.to_radians();
    let (sin, cos) = (th.sin(), th.cos());
    let cy = (h - 1) as f32 / 2.0;
    let cx = (w - 1) as f32 / 2.0;
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let dy = r as f32 - cy;
            let dx = c as f32 - cx;
            // inverse rotation of the output coordinate
            let sx = cx + dx * cos + dy * sin;
            let sy = cy - dx * sin + dy * cos;
            out[r * w + c] = match interp {
                Interp::Bilinear => {
                    if sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f32 && sy <= (h - 1) as f32 {
                        bilinear_sample(data, h, w, sy, sx)
                    } else {
                        0.0
                    }
                }
                Interp::Nearest => {
                    let rx = sx.round();
                    let ry = sy.round();
                    if rx >= 0.0 && ry >= 0.0 && rx <= (w - 1) as f32 && ry <= (h - 1) as f32 {
                        data[ry as usize * w + rx as usize]
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    out
}

/// Forward image of a source pixel under `rotate` with the same angle.
pub fn rotate_forward(r: usize, c: usize, h: usize, w: usize, degrees: f32) -> (f32, f32) {
    let th = degrees.to_radians();
    let (sin, cos) = (th.sin(), th.cos());
    let cy = (h - 1) as f32 / 2.0;
    let cx = (w - 1) as f32 / 2.0;
    let dy = r as f32 - cy;
    let dx = c as f32 - cx;
    (cy + dx * sin + dy * cos, cx + dx * cos - dy * sin)
}

/// Shrink content by `scale` and paste it centered on a zero canvas of the
/// original size.
pub fn zoom_out(data: &[f32], h: usize, w: usize, scale: f32, interp: Interp) -> Result<Vec<f32>> {
    if !(0.0 < scale && scale <= 1.0) {
        return Err(SsmtError::Config(format!("zoom scale {scale} outside (0,1]")));
    }
    let sh = ((h as f32 * scale).round() as usize).max(1);
    let sw = ((w as f32 * scale).round() as usize).max(1);
    let small = resize(data, h, w, sh, sw, interp)?;
    let mut out = vec![0.0f32; h * w];
    let oy = (h - sh) / 2;
    let ox = (w - sw) / 2;
    for r in 0..sh {
        out[(oy + r) * w + ox..(oy + r) * w + ox + sw].copy_from_slice(&small[r * sw..(r + 1) * sw]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub flip: bool,
    pub flip_prob: f32,
    pub rotate: bool,
    pub rotate_prob: f32,
    pub rotate_max_deg: f32,
    pub zoom: bool,
    pub zoom_prob: f32,
    pub zoom_range: (f32, f32),
    pub stitch: bool,
    pub stitch_prob: f32,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip: true,
            flip_prob: 0.5,
            rotate: true,
            rotate_prob: 0.5,
            rotate_max_deg: 15.0,
            zoom: true,
            zoom_prob: 0.3,
            zoom_range: (0.6, 0.9),
            stitch: true,
            stitch_prob: 0.25,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        AugmentationConfig {
            flip: false,
            rotate: false,
            zoom: false,
            stitch: false,
            ..AugmentationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("rotate_prob", self.rotate_prob),
            ("zoom_prob", self.zoom_prob),
            ("stitch_prob", self.stitch_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SsmtError::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotate_max_deg) {
            return Err(SsmtError::Config(format!(
                "rotate_max_deg must lie in [0,180], got {}",
                self.rotate_max_deg
            )));
        }
        let (lo, hi) = self.zoom_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(SsmtError::Config(format!(
                "zoom_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

fn apply_geometric(
    sample: &UltrasoundSample,
    image_op: impl Fn(&[f32], Interp) -> Vec<f32>,
) -> Result<UltrasoundSample> {
    let image = image_op(&sample.image, Interp::Bilinear);
    let map_mask = |m: &Option<Vec<f32>>| {
        m.as_ref().map(|m| {
            let mut out = image_op(m, Interp::Nearest);
            binarize(&mut out);
            out
        })
    };
    let nodule_mask = map_mask(&sample.nodule_mask);
    let gland_mask = map_mask(&sample.gland_mask);
    let size_label = match &nodule_mask {
        Some(m) => Some(compute_size_label(m)?),
        None => None,
    };
    Ok(UltrasoundSample {
        image,
        h: sample.h,
        w: sample.w,
        nodule_mask,
        gland_mask,
        size_label,
    })
}

/// 2x2 mosaic of four samples, each resized into its quadrant. Output masks
/// exist when the base sample carries them; a partner without a mask
/// contributes background.
pub fn stitch_mosaic(quads: [&UltrasoundSample; 4], h: usize, w: usize) -> Result<UltrasoundSample> {
    let hs = [h / 2, h / 2, h - h / 2, h - h / 2];
    let ws = [w / 2, w - w / 2, w / 2, w - w / 2];
    let origins = [(0, 0), (0, w / 2), (h / 2, 0), (h / 2, w / 2)];
    let mut image = vec![0.0f32; h * w];
    let base = quads[0];
    let mut nodule = base.nodule_mask.as_ref().map(|_| vec![0.0f32; h * w]);
    let mut gland = base.gland_mask.as_ref().map(|_| vec![0.0f32; h * w]);
    for q in 0..4 {
        let s = quads[q];
        let (qh, qw) = (hs[q], ws[q]);
        let (oy, ox) = origins[q];
        let img = resize(&s.image, s.h, s.w, qh, qw, Interp::Bilinear)?;
        for r in 0..qh {
            image[(oy + r) * w + ox..(oy + r) * w + ox + qw]
                .copy_from_slice(&img[r * qw..(r + 1) * qw]);
        }
        let blit_mask = |dst: &mut Option<Vec<f32>>, src: &Option<Vec<f32>>| -> Result<()> {
            if let Some(dst) = dst {
                if let Some(src) = src {
                    let mut m = resize(src, s.h, s.w, qh, qw, Interp::Nearest)?;
                    binarize(&mut m);
                    for r in 0..qh {
                        dst[(oy + r) * w + ox..(oy + r) * w + ox + qw]
                            .copy_from_slice(&m[r * qw..(r + 1) * qw]);
                    }
                }
            }
            Ok(())
        };
        blit_mask(&mut nodule, &s.nodule_mask)?;
        blit_mask(&mut gland, &s.gland_mask)?;
    }
    let size_label = match &nodule {
        Some(m) => Some(compute_size_label(m)?),
        None => None,
    };
    Ok(UltrasoundSample {
        image,
        h,
        w,
        nodule_mask: nodule,
        gland_mask: gland,
        size_label,
    })
}

/// Apply the enabled augmentations in a fixed order (stitch, flip, rotate,
/// zoom-out), each gated by its probability. Labels track every transform.
pub fn augment(
    sample: &UltrasoundSample,
    partners: &[&UltrasoundSample],
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<UltrasoundSample> {
    cfg.validate()?;
    let (h, w) = (sample.h, sample.w);
    let mut out = sample.clone();
    if cfg.stitch && partners.len() >= 3 && rng.random::<f32>() < cfg.stitch_prob {
        out = stitch_mosaic([&out, partners[0], partners[1], partners[2]], h, w)?;
    }
    if cfg.flip && rng.random::<f32>() < cfg.flip_prob {
        out = apply_geometric(&out, |d, _| flip_horizontal(d, h, w))?;
    }
    if cfg.rotate && rng.random::<f32>() < cfg.rotate_prob {
        let deg = rng.random_range(-cfg.rotate_max_deg..=cfg.rotate_max_deg);
        out = apply_geometric(&out, |d, interp| rotate(d, h, w, deg, interp))?;
    }
    if cfg.zoom && rng.random::<f32>() < cfg.zoom_prob {
        let scale = rng.random_range(cfg.zoom_range.0..=cfg.zoom_range.1);
        out = apply_geometric(&out, |d, interp| {
            zoom_out(d, h, w, scale, interp).expect("scale validated by config")
        })?;
    }
    Ok(out)
}
