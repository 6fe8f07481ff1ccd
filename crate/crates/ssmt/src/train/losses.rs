//! Loss terms and their weighting.
//!
//! All terms are built from tape primitives so gradients flow to every
//! parameter that produced them. Weights live on a constrained simplex:
//! non-negative, summing to one, with the nodule weight strictly dominant.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, SsmtError};
use crate::model::TaskSet;
use serde::{Deserialize, Serialize};

/// Smoothing constant in the soft-overlap ratio's numerator and denominator.
pub const DICE_SMOOTH: f32 = 1e-6;
/// Robust-penalty knee; also the loss floor for a perfect reconstruction.
pub const CHARBONNIER_EPS: f32 = 1e-6;

/// Soft overlap loss: 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s).
/// `pred` must hold probabilities in [0,1]; `target` is a binary mask of the
/// same shape.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(SsmtError::Shape {
            op: "dice_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = tape.constant(target.clone());
    let inter = tape.mul(pred, t)?;
    let inter_sum = tape.sum_all(inter);
    let doubled = tape.mul_scalar(inter_sum, 2.0);
    let num = tape.add_scalar(doubled, DICE_SMOOTH);
    let p_sum = tape.sum_all(pred);
    let t_sum = tape.sum_all(t);
    let union = tape.add(p_sum, t_sum)?;
    let den = tape.add_scalar(union, DICE_SMOOTH);
    let ratio = tape.div(num, den)?;
    let neg = tape.mul_scalar(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean over pixels of sqrt((rec - input)^2 + eps^2); a smooth absolute
/// error that bottoms out at eps for a perfect reconstruction.
pub fn charbonnier(tape: &mut Tape, rec: Var, input: &Tensor) -> Result<Var> {
    if tape.shape(rec) != input.shape() {
        return Err(SsmtError::Shape {
            op: "charbonnier",
            lhs: tape.shape(rec).to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let t = tape.constant(input.clone());
    let d = tape.sub(rec, t)?;
    let d2 = tape.mul(d, d)?;
    let inner = tape.add_scalar(d2, CHARBONNIER_EPS * CHARBONNIER_EPS);
    let per_pixel = tape.sqrt(inner);
    Ok(tape.mean(per_pixel))
}

/// Squared error between predicted and true foreground fractions.
pub fn size_loss(tape: &mut Tape, v_pred: Var, v_true: f32) -> Result<Var> {
    if !(0.0..=1.0).contains(&v_true) {
        return Err(SsmtError::Contract(format!(
            "size target {v_true} outside [0,1]"
        )));
    }
    let d = tape.add_scalar(v_pred, -v_true);
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Per-term loss weights. The nodule task must strictly dominate the three
/// auxiliaries combined, and the four weights form a unit simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub eta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 0.1,
            gamma: 0.05,
            eta: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.beta, self.gamma, self.eta];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SsmtError::Config(format!(
                "loss weights must be finite and non-negative, got {ws:?}"
            )));
        }
        let sum: f32 = ws.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SsmtError::Config(format!(
                "loss weights must sum to 1 (tolerance 1e-6), got {sum}"
            )));
        }
        let aux = self.beta + self.gamma + self.eta;
        if self.alpha <= aux {
            return Err(SsmtError::Config(format!(
                "nodule weight {} must exceed the combined auxiliary weight {aux}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Zero the weights of disabled branches and renormalize the rest
    /// proportionally so the simplex constraint keeps holding.
    pub fn ablated(&self, flags: AblationFlags) -> Result<LossWeights> {
        self.validate()?;
        let mut w = *self;
        if !flags.gland {
            w.beta = 0.0;
        }
        if !flags.size {
            w.gamma = 0.0;
        }
        if !flags.recon {
            w.eta = 0.0;
        }
        let sum = w.alpha + w.beta + w.gamma + w.eta;
        assert!(sum >= w.alpha && w.alpha > 0.0, "nodule weight always kept");
        w.alpha /= sum;
        w.beta /= sum;
        w.gamma /= sum;
        w.eta /= sum;
        w.validate()?;
        Ok(w)
    }
}

/// Which auxiliary branches participate; the nodule branch always does.
/// The five study variants map onto these three switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub recon: bool,
    pub gland: bool,
    pub size: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            recon: true,
            gland: true,
            size: true,
        }
    }
}

impl AblationFlags {
    /// Study variants: 1 = none, 2 = +recon, 3 = +recon+gland,
    /// 4 = +recon+size, 5 = all.
    pub fn variant(n: usize) -> Result<AblationFlags> {
        let (recon, gland, size) = match n {
            1 => (false, false, false),
            2 => (true, false, false),
            3 => (true, true, false),
            4 => (true, false, true),
            5 => (true, true, true),
            _ => {
                return Err(SsmtError::Config(format!(
                    "ablation variant must be 1..=5, got {n}"
                )))
            }
        };
        Ok(AblationFlags { recon, gland, size })
    }

    /// Forward tasks implied by the flags during supervised training.
    pub fn task_set(&self) -> TaskSet {
        TaskSet {
            nodule: true,
            gland: self.gland,
            size: self.size,
            recon: self.recon,
        }
    }
}

/// Batch-mean loss terms; absent entries correspond to disabled branches or
/// batches with no labeled sample for the term.
pub struct LossTerms {
    pub nodule: Var,
    pub gland: Option<Var>,
    pub size: Option<Var>,
    pub rec: Option<Var>,
}

/// alpha*nodule + beta*gland + gamma*size + eta*rec, skipping absent terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut acc = tape.mul_scalar(terms.nodule, w.alpha);
    for (term, weight) in [
        (terms.gland, w.beta),
        (terms.size, w.gamma),
        (terms.rec, w.eta),
    ] {
        if let Some(t) = term {
            let scaled = tape.mul_scalar(t, weight);
            acc = tape.add(acc, scaled)?;
        }
    }
    Ok(acc)
}
