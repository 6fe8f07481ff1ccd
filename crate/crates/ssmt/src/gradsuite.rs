//! Central finite-difference verification of every differentiable tape
//! primitive and of the complete multi-task loss through the whole model.
//!
//! Each check compares reverse-mode gradients against central differences
//! on probe indices. Op outputs are folded to a scalar through a fixed
//! random weighting so no lane's gradient can vanish structurally (a plain
//! mean of a softmax row, for instance, has zero gradient everywhere).

use crate::autodiff::tape::ResampleMode;
use crate::autodiff::{
    compare, fd_grad, probe_indices, Tape, Tensor, Var, FD_ABS_FLOOR, FD_STEP,
};
use crate::error::Result;
use crate::model::params::Binding;
use crate::model::{ModelConfig, SsmtModel, TaskSet};
use crate::rng::rng_for;
use crate::train::losses::{
    charbonnier, dice_loss, size_loss, total_loss, LossTerms, LossWeights,
};
use rand_distr::{Distribution, StandardNormal};

pub const PRIMITIVE_TOL: f32 = 1e-3;
pub const END_TO_END_TOL: f32 = 1e-2;
const PROBES: usize = 6;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel: f32,
    pub checked: usize,
    pub tol: f32,
    /// Largest |analytic gradient| seen at a probe; proves the comparison
    /// exercised a live gradient path rather than zeros on both sides.
    pub max_grad: f32,
}

impl CheckOutcome {
    pub fn pass(&self) -> bool {
        self.max_rel < self.tol
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.pass() { "pass" } else { "FAIL" };
        write!(
            f,
            "{verdict}  {:<22} max_rel {:.2e} (tol {:.0e}, {} probes, peak grad {:.2e})",
            self.name, self.max_rel, self.tol, self.checked, self.max_grad
        )
    }
}

pub fn all_pass(outcomes: &[CheckOutcome]) -> bool {
    !outcomes.is_empty() && outcomes.iter().all(CheckOutcome::pass)
}

fn randn_vec(seed: u64, tag: &str, n: usize, std: f32) -> Vec<f32> {
    let mut rng = rng_for(seed, tag, &[]);
    (0..n)
        .map(|_| {
            let v: f32 = StandardNormal.sample(&mut rng);
            v * std
        })
        .collect()
}

fn tensor(seed: u64, tag: &str, shape: &[usize], std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(randn_vec(seed, tag, n, std), shape).expect("suite shapes are consistent")
}

/// Gradient check of one op: analytic reverse pass vs central differences,
/// probed on every input tensor.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    tol: f32,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckOutcome> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    assert!(tape.value(loss).numel() == 1, "{name}: loss must be scalar");
    tape.backward(loss)?;
    let mut max_rel = 0.0f32;
    let mut checked = 0;
    let mut max_grad = 0.0f32;
    for (i, base) in inputs.iter().enumerate() {
        let analytic: Vec<f32> = match tape.grad(vars[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; base.numel()],
        };
        let idx = probe_indices(base.numel(), PROBES);
        for &k in &idx {
            max_grad = max_grad.max(analytic[k].abs());
        }
        let shape = base.shape().to_vec();
        let mut eval = |x: &[f32]| -> Result<f64> {
            let mut t2 = Tape::new();
            let mut vars2 = Vec::with_capacity(inputs.len());
            for (j, b) in inputs.iter().enumerate() {
                let t = if j == i {
                    Tensor::from_vec(x.to_vec(), &shape)?
                } else {
                    b.clone()
                };
                vars2.push(t2.leaf(t));
            }
            let l = f(&mut t2, &vars2)?;
            Ok(t2.value(l).data()[0] as f64)
        };
        let numeric = fd_grad(&mut eval, base.data(), &idx, FD_STEP)?;
        let report = compare(&analytic, &numeric, FD_ABS_FLOOR);
        max_rel = max_rel.max(report.max_rel);
        checked += report.checked;
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel,
        checked,
        tol,
        max_grad,
    })
}

/// Fold an op output to a scalar through a fixed random weighting.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    Ok(tape.mean(prod))
}

/// Keep every value at least `margin` away from zero, preserving sign.
fn away_from_zero(mut v: Vec<f32>, margin: f32) -> Vec<f32> {
    for x in v.iter_mut() {
        let s = if *x < 0.0 { -1.0 } else { 1.0 };
        *x = s * (x.abs() + margin);
    }
    v
}

fn primitive_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let t = |tag: &str, shape: &[usize]| tensor(seed, tag, shape, 0.5);
    let w46 = tensor(seed, "w46", &[4, 6], 1.0);
    let tol = PRIMITIVE_TOL;

    let a = t("add.a", &[4, 6]);
    let b = t("add.b", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("add", &[a, b], tol, &move |tp, v| {
        let o = tp.add(v[0], v[1])?;
        weighted(tp, o, &w)
    })?);

    let a = t("sub.a", &[4, 6]);
    let b = t("sub.b", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("sub", &[a, b], tol, &move |tp, v| {
        let o = tp.sub(v[0], v[1])?;
        weighted(tp, o, &w)
    })?);

    let a = t("mul.a", &[4, 6]);
    let b = t("mul.b", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("mul", &[a, b], tol, &move |tp, v| {
        let o = tp.mul(v[0], v[1])?;
        weighted(tp, o, &w)
    })?);

    let a = t("div.a", &[4, 6]);
    let den = away_from_zero(randn_vec(seed, "div.b", 24, 0.5), 0.5);
    let b = Tensor::from_vec(den, &[4, 6])?;
    let w = w46.clone();
    out.push(check_op("div", &[a, b], tol, &move |tp, v| {
        let o = tp.div(v[0], v[1])?;
        weighted(tp, o, &w)
    })?);

    let a = t("adds.a", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("add_scalar", &[a], tol, &move |tp, v| {
        let o = tp.add_scalar(v[0], 0.7);
        weighted(tp, o, &w)
    })?);

    let a = t("muls.a", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("mul_scalar", &[a], tol, &move |tp, v| {
        let o = tp.mul_scalar(v[0], -1.3);
        weighted(tp, o, &w)
    })?);

    let a = t("sig.a", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("sigmoid", &[a], tol, &move |tp, v| {
        let o = tp.sigmoid(v[0]);
        weighted(tp, o, &w)
    })?);

    // relu and clamp kink at 0 (and 1); keep probes in smooth territory
    let a = Tensor::from_vec(away_from_zero(randn_vec(seed, "relu.a", 24, 0.5), 0.1), &[4, 6])?;
    let w = w46.clone();
    out.push(check_op("relu", &[a], tol, &move |tp, v| {
        let o = tp.relu(v[0]);
        weighted(tp, o, &w)
    })?);

    let a = t("gelu.a", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("gelu", &[a], tol, &move |tp, v| {
        let o = tp.gelu(v[0]);
        weighted(tp, o, &w)
    })?);

    let pos: Vec<f32> = randn_vec(seed, "sqrt.a", 24, 0.3)
        .into_iter()
        .map(|v| 0.4 + v.abs())
        .collect();
    let a = Tensor::from_vec(pos, &[4, 6])?;
    let w = w46.clone();
    out.push(check_op("sqrt", &[a], tol, &move |tp, v| {
        let o = tp.sqrt(v[0]);
        weighted(tp, o, &w)
    })?);

    let interior: Vec<f32> = randn_vec(seed, "clamp.a", 24, 1.0)
        .into_iter()
        .map(|v| 0.1 + 0.8 * (0.5 + 0.5 * (v / 2.0).tanh()))
        .collect();
    let a = Tensor::from_vec(interior, &[4, 6])?;
    let w = w46.clone();
    out.push(check_op("clamp_unit", &[a], tol, &move |tp, v| {
        let o = tp.clamp_unit(v[0]);
        weighted(tp, o, &w)
    })?);

    let a = t("mean.a", &[4, 6]);
    out.push(check_op("mean", &[a], tol, &move |tp, v| Ok(tp.mean(v[0])))?);

    let a = t("sumall.a", &[4, 6]);
    out.push(check_op("sum_all", &[a], tol, &move |tp, v| {
        let s = tp.sum_all(v[0]);
        Ok(tp.mul_scalar(s, 1.0 / 24.0))
    })?);

    let a = t("softmax.a", &[4, 6]);
    let w = w46.clone();
    out.push(check_op("softmax", &[a], tol, &move |tp, v| {
        let o = tp.softmax(v[0])?;
        weighted(tp, o, &w)
    })?);

    let x = t("ln.x", &[4, 6]);
    let gamma = Tensor::from_vec(
        randn_vec(seed, "ln.g", 6, 0.1).into_iter().map(|v| 1.0 + v).collect(),
        &[6],
    )?;
    let beta = tensor(seed, "ln.b", &[6], 0.1);
    let w = w46.clone();
    out.push(check_op("layer_norm", &[x, gamma, beta], tol, &move |tp, v| {
        let o = tp.layer_norm(v[0], v[1], v[2])?;
        weighted(tp, o, &w)
    })?);

    let a = t("mm.a", &[4, 5]);
    let b = t("mm.b", &[5, 6]);
    let w = w46.clone();
    out.push(check_op("matmul", &[a, b], tol, &move |tp, v| {
        let o = tp.matmul(v[0], v[1])?;
        weighted(tp, o, &w)
    })?);

    let a = t("rs.a", &[4, 6]);
    let w = tensor(seed, "rs.w", &[6, 4], 1.0);
    out.push(check_op("reshape", &[a], tol, &move |tp, v| {
        let o = tp.reshape(v[0], &[6, 4])?;
        weighted(tp, o, &w)
    })?);

    let a = t("sc.a", &[4, 8]);
    let w = tensor(seed, "sc.w", &[4, 3], 1.0);
    out.push(check_op("slice_cols", &[a], tol, &move |tp, v| {
        let o = tp.slice_cols(v[0], 2, 3)?;
        weighted(tp, o, &w)
    })?);

    let a = t("cc.a", &[4, 3]);
    let b = t("cc.b", &[4, 5]);
    let w = tensor(seed, "cc.w", &[4, 8], 1.0);
    out.push(check_op("concat_cols", &[a, b], tol, &move |tp, v| {
        let o = tp.concat_cols(v[0], v[1])?;
        weighted(tp, o, &w)
    })?);

    let a = t("ab.a", &[4, 6]);
    let bias = tensor(seed, "ab.b", &[6], 0.5);
    let w = w46.clone();
    out.push(check_op("add_bias", &[a, bias], tol, &move |tp, v| {
        let o = tp.add_bias(v[0], v[1])?;
        weighted(tp, o, &w)
    })?);

    let x = tensor(seed, "c1.x", &[2, 6, 6], 0.33);
    let k = tensor(seed, "c1.w", &[3, 2, 3, 3], 0.33);
    let bias = tensor(seed, "c1.b", &[3], 0.1);
    let w = tensor(seed, "c1.o", &[3, 6, 6], 1.0);
    out.push(check_op("conv2d_s1", &[x, k, bias], tol, &move |tp, v| {
        let o = tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        weighted(tp, o, &w)
    })?);

    let x = tensor(seed, "c2.x", &[2, 6, 6], 0.33);
    let k = tensor(seed, "c2.w", &[3, 2, 3, 3], 0.33);
    let w = tensor(seed, "c2.o", &[3, 3, 3], 1.0);
    out.push(check_op("conv2d_s2", &[x, k], tol, &move |tp, v| {
        let o = tp.conv2d(v[0], v[1], None, 2, 1)?;
        weighted(tp, o, &w)
    })?);

    let x = tensor(seed, "rb.x", &[2, 4, 4], 0.5);
    let w = tensor(seed, "rb.w", &[2, 6, 6], 1.0);
    out.push(check_op("resample_bilinear", &[x], tol, &move |tp, v| {
        let o = tp.resample2d(v[0], 6, 6, ResampleMode::Bilinear)?;
        weighted(tp, o, &w)
    })?);

    let x = tensor(seed, "rn.x", &[2, 6, 6], 0.5);
    let w = tensor(seed, "rn.w", &[2, 3, 3], 1.0);
    out.push(check_op("resample_nearest", &[x], tol, &move |tp, v| {
        let o = tp.resample2d(v[0], 3, 3, ResampleMode::Nearest)?;
        weighted(tp, o, &w)
    })?);

    Ok(out)
}

/// Deterministic 8x8 fixture: image plus hand-built nodule/gland masks.
fn fixture(seed: u64) -> (Vec<f32>, Tensor, Tensor, f32) {
    let side = 8;
    let image: Vec<f32> = randn_vec(seed, "e2e.img", side * side, 1.0)
        .into_iter()
        .map(|v| 0.5 + 0.4 * (v / 2.0).tanh())
        .collect();
    let mut nodule = vec![0.0f32; side * side];
    let mut gland = vec![0.0f32; side * side];
    for r in 0..side {
        for c in 0..side {
            let (dr, dc) = (r as f32 - 3.5, c as f32 - 3.5);
            if dr * dr + dc * dc <= 4.0 {
                nodule[r * side + c] = 1.0;
            }
            if dr * dr / 9.0 + dc * dc / 12.0 <= 1.0 {
                gland[r * side + c] = 1.0;
            }
        }
    }
    let frac = nodule.iter().sum::<f32>() / (side * side) as f32;
    let nodule_t = Tensor::from_vec(nodule, &[1, side, side]).expect("fixture");
    let gland_t = Tensor::from_vec(gland, &[1, side, side]).expect("fixture");
    (image, nodule_t, gland_t, frac)
}

fn e2e_loss(
    model: &SsmtModel,
    tape: &mut Tape,
    binding: &mut Binding,
    image: &[f32],
    nodule: &Tensor,
    gland: &Tensor,
    size_label: f32,
) -> Result<Var> {
    let out = model.forward(tape, binding, image, TaskSet::all())?;
    let image_t = Tensor::from_vec(image.to_vec(), &[1, model.cfg.image_size, model.cfg.image_size])?;
    let terms = LossTerms {
        nodule: dice_loss(tape, out.nodule.expect("all tasks").prob_loss, nodule)?,
        gland: Some(dice_loss(tape, out.gland.expect("all tasks").prob_loss, gland)?),
        size: Some(size_loss(tape, out.size_pred.expect("all tasks"), size_label)?),
        rec: Some(charbonnier(tape, out.recon.expect("all tasks"), &image_t)?),
    };
    total_loss(tape, &terms, &LossWeights::default())
}

/// One representative parameter per name prefix (enc.cnn, dec.nod, ...).
fn representative_params(model: &SsmtModel) -> Vec<String> {
    let mut picked: Vec<String> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for name in model.store.names() {
        let bucket: String = name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
        if seen.insert(bucket) {
            picked.push(name);
        }
    }
    picked
}

/// The full multi-task loss differentiated through the entire model, FD
/// checked on probe entries of one parameter per module group.
pub fn end_to_end_check(seed: u64) -> Result<CheckOutcome> {
    let model = SsmtModel::new(ModelConfig::desk(8, 2), seed)?;
    let (image, nodule, gland, size_label) = fixture(seed);
    let mut tape = Tape::new();
    let mut binding = Binding::all_trainable(&model.store);
    let loss = e2e_loss(&model, &mut tape, &mut binding, &image, &nodule, &gland, size_label)?;
    tape.backward(loss)?;
    let mut max_rel = 0.0f32;
    let mut checked = 0;
    let mut max_grad = 0.0f32;
    for name in representative_params(&model) {
        let var = binding.var(&mut tape, &name)?;
        let base = model.store.get(&name)?.data().to_vec();
        let analytic: Vec<f32> = match tape.grad(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; base.len()],
        };
        let idx = probe_indices(base.len(), 3);
        for &k in &idx {
            max_grad = max_grad.max(analytic[k].abs());
        }
        let mut eval = |x: &[f32]| -> Result<f64> {
            let mut m2 = model.clone();
            m2.store.get_mut(&name)?.data_mut().copy_from_slice(x);
            let mut t2 = Tape::new();
            let mut b2 = Binding::new(&m2.store, |_| false);
            let l = e2e_loss(&m2, &mut t2, &mut b2, &image, &nodule, &gland, size_label)?;
            Ok(t2.value(l).data()[0] as f64)
        };
        let numeric = fd_grad(&mut eval, &base, &idx, FD_STEP)?;
        let report = compare(&analytic, &numeric, FD_ABS_FLOOR);
        max_rel = max_rel.max(report.max_rel);
        checked += report.checked;
    }
    Ok(CheckOutcome {
        name: "end_to_end_loss".to_string(),
        max_rel,
        checked,
        tol: END_TO_END_TOL,
        max_grad,
    })
}

/// Every primitive check followed by the end-to-end check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = primitive_checks(seed)?;
    out.push(end_to_end_check(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_and_the_full_loss_pass() {
        let outcomes = run_suite(42).unwrap();
        assert_eq!(outcomes.len(), 25);
        for o in &outcomes {
            assert!(o.pass(), "{o}");
            assert!(o.checked > 0, "{}: no probes ran", o.name);
            assert!(
                o.max_grad > FD_ABS_FLOOR,
                "{}: no live gradient reached a probe",
                o.name
            );
        }
        assert!(all_pass(&outcomes));
    }

    #[test]
    fn representative_params_cover_every_module_group() {
        let model = SsmtModel::new(ModelConfig::desk(8, 2), 1).unwrap();
        let names = representative_params(&model);
        for prefix in ["enc.", "dec.nod", "dec.gld", "size.", "rec."] {
            assert!(
                names.iter().any(|n| n.starts_with(prefix)),
                "no representative for {prefix} in {names:?}"
            );
        }
    }

    #[test]
    fn outcome_display_names_the_verdict() {
        let good = CheckOutcome {
            name: "op".into(),
            max_rel: 1e-5,
            checked: 4,
            tol: 1e-3,
            max_grad: 0.2,
        };
        assert!(good.to_string().starts_with("pass"));
        let bad = CheckOutcome {
            max_rel: 5e-3,
            ..good
        };
        assert!(bad.to_string().starts_with("FAIL"));
        assert!(!all_pass(&[bad]));
        assert!(!all_pass(&[]));
    }
}
