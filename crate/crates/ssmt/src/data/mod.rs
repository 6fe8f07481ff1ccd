//! Dataset ingestion, augmentation, synthetic phantoms, and netpbm I/O.

pub mod augment;
pub mod dataset;
pub mod pgm;
pub mod phantom;

use crate::error::{Result, SsmtError};

/// One training unit: a grayscale image with optional nodule/gland masks and
/// the derived relative-area label.
#[derive(Debug, Clone, PartialEq)]
pub struct UltrasoundSample {
    pub image: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub nodule_mask: Option<Vec<f32>>,
    pub gland_mask: Option<Vec<f32>>,
    pub size_label: Option<f32>,
}

impl UltrasoundSample {
    /// Enforce the type's invariants: buffer sizes, binary masks, finite
    /// image values, and size_label = nodule foreground fraction.
    pub fn validate(&self) -> Result<()> {
        let n = self.h * self.w;
        if self.image.len() != n {
            return Err(SsmtError::Dim(format!(
                "image has {} values for {}x{}",
                self.image.len(),
                self.h,
                self.w
            )));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(SsmtError::NonFinite("sample image".to_string()));
        }
        for (name, mask) in [("nodule", &self.nodule_mask), ("gland", &self.gland_mask)] {
            if let Some(m) = mask {
                if m.len() != n {
                    return Err(SsmtError::Dim(format!("{name} mask size mismatch")));
                }
                if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(SsmtError::Contract(format!(
                        "{name} mask contains non-binary values"
                    )));
                }
            }
        }
        match (&self.nodule_mask, self.size_label) {
            (Some(m), Some(s)) => {
                let expect = compute_size_label(m)?;
                if s != expect {
                    return Err(SsmtError::Contract(format!(
                        "size_label {s} differs from mask fraction {expect}"
                    )));
                }
            }
            (None, Some(_)) => {
                return Err(SsmtError::Contract(
                    "size_label present without a nodule mask".to_string(),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Foreground fraction of a binary mask: pixel count / total, in [0,1].
pub fn compute_size_label(mask: &[f32]) -> Result<f32> {
    let mut fg = 0usize;
    for &v in mask {
        if v == 1.0 {
            fg += 1;
        } else if v != 0.0 {
            return Err(SsmtError::Contract(format!(
                "mask value {v} is not binary"
            )));
        }
    }
    Ok(fg as f32 / mask.len() as f32)
}
