//! Synthetic ultrasound-like phantoms: a darker gland ellipse on a mid-gray
//! background, nodule ellipses strictly inside the gland, multiplicative
//! speckle, and exact analytic masks.

use crate::data::{compute_size_label, UltrasoundSample};
use crate::error::{Result, SsmtError};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Square canvas side in pixels.
    pub size: usize,
    pub background_level: f32,
    pub gland_level: f32,
    /// Gland semi-axis range as a fraction of the canvas side.
    pub gland_axis_range: (f32, f32),
    /// Inclusive nodule count range.
    pub nodule_count: (usize, usize),
    /// Nodule semi-axis range as a fraction of the canvas side.
    pub nodule_radius_range: (f32, f32),
    /// Absolute nodule-vs-gland intensity difference range; sign is random.
    pub nodule_contrast: (f32, f32),
    /// Variance of the multiplicative speckle noise.
    pub speckle_var: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            background_level: 0.45,
            gland_level: 0.25,
            gland_axis_range: (0.28, 0.42),
            nodule_count: (1, 2),
            nodule_radius_range: (0.06, 0.12),
            nodule_contrast: (0.12, 0.25),
            speckle_var: 0.01,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(SsmtError::Config("phantom size must be at least 8".to_string()));
        }
        for (name, (lo, hi)) in [
            ("gland_axis_range", self.gland_axis_range),
            ("nodule_radius_range", self.nodule_radius_range),
            ("nodule_contrast", self.nodule_contrast),
        ] {
            if !(0.0 < lo && lo <= hi) {
                return Err(SsmtError::Config(format!(
                    "{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.nodule_count.0 > self.nodule_count.1 {
            return Err(SsmtError::Config("nodule_count range is inverted".to_string()));
        }
        if self.speckle_var < 0.0 {
            return Err(SsmtError::Config("speckle_var must be non-negative".to_string()));
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("gland_level", self.gland_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SsmtError::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Axis-aligned ellipse in pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub a: f32,
    pub b: f32,
}

impl Ellipse {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.cx) / self.a;
        let dy = (y - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }

    /// Every boundary point strictly inside `outer` (32-point test).
    fn strictly_inside(&self, outer: &Ellipse) -> bool {
        (0..32).all(|k| {
            let th = k as f32 * std::f32::consts::TAU / 32.0;
            let x = self.cx + self.a * th.cos();
            let y = self.cy + self.b * th.sin();
            let dx = (x - outer.cx) / outer.a;
            let dy = (y - outer.cy) / outer.b;
            dx * dx + dy * dy < 1.0
        })
    }
}

/// Sampled scene description: the gland plus nodules with their contrasts.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGeometry {
    pub gland: Ellipse,
    pub nodules: Vec<(Ellipse, f32)>,
}

const PLACEMENT_TRIES: usize = 100;

/// Sample the scene geometry. Nodules are redrawn until strictly inside the
/// gland; running out of tries is a generation error.
pub fn sample_geometry(cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<PhantomGeometry> {
    cfg.validate()?;
    let s = cfg.size as f32;
    let mid = (cfg.size - 1) as f32 / 2.0;
    let gland = Ellipse {
        cx: mid + rng.random_range(-0.05..0.05) * s,
        cy: mid + rng.random_range(-0.05..0.05) * s,
        a: rng.random_range(cfg.gland_axis_range.0..=cfg.gland_axis_range.1) * s,
        b: rng.random_range(cfg.gland_axis_range.0..=cfg.gland_axis_range.1) * s,
    };
    let count = rng.random_range(cfg.nodule_count.0..=cfg.nodule_count.1);
    let mut nodules = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let nod = Ellipse {
                cx: gland.cx + rng.random_range(-0.8..0.8) * gland.a,
                cy: gland.cy + rng.random_range(-0.8..0.8) * gland.b,
                a: rng.random_range(cfg.nodule_radius_range.0..=cfg.nodule_radius_range.1) * s,
                b: rng.random_range(cfg.nodule_radius_range.0..=cfg.nodule_radius_range.1) * s,
            };
            if nod.strictly_inside(&gland) {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let delta =
                    sign * rng.random_range(cfg.nodule_contrast.0..=cfg.nodule_contrast.1);
                nodules.push((nod, delta));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SsmtError::Dataset(format!(
                "phantom nodule placement failed after {PLACEMENT_TRIES} tries \
                 (gland too small for nodule_radius_range?)"
            )));
        }
    }
    Ok(PhantomGeometry { gland, nodules })
}

/// Render a geometry into an image plus exact masks, then apply speckle.
pub fn render(geometry: &PhantomGeometry, cfg: &PhantomConfig, rng: &mut impl Rng) -> UltrasoundSample {
    let n = cfg.size * cfg.size;
    let mut image = vec![cfg.background_level; n];
    let mut gland_mask = vec![0.0f32; n];
    let mut nodule_mask = vec![0.0f32; n];
    for r in 0..cfg.size {
        for c in 0..cfg.size {
            let (x, y) = (c as f32, r as f32);
            let i = r * cfg.size + c;
            if geometry.gland.contains(x, y) {
                gland_mask[i] = 1.0;
                image[i] = cfg.gland_level;
            }
            for (nod, delta) in &geometry.nodules {
                if nod.contains(x, y) {
                    nodule_mask[i] = 1.0;
                    image[i] = cfg.gland_level + delta;
                }
            }
        }
    }
    if cfg.speckle_var > 0.0 {
        let sd = cfg.speckle_var.sqrt();
        for v in image.iter_mut() {
            let noise: f32 = rng.sample(StandardNormal);
            *v *= 1.0 + sd * noise;
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let size_label = compute_size_label(&nodule_mask).expect("mask is binary by construction");
    UltrasoundSample {
        image,
        h: cfg.size,
        w: cfg.size,
        nodule_mask: Some(nodule_mask),
        gland_mask: Some(gland_mask),
        size_label: Some(size_label),
    }
}

/// Sample and render one phantom.
pub fn generate_phantom(cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<UltrasoundSample> {
    let geometry = sample_geometry(cfg, rng)?;
    Ok(render(&geometry, cfg, rng))
}
