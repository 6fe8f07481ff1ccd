use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f32 = 1e-3;
/// Differences at or below this absolute floor count as agreement: about two
/// ulps of an O(1) f32 forward value spread over the 2h probe window, the
/// resolution limit of central differences on f32.
pub const FD_ABS_FLOOR: f32 = 2e-4;

/// Central finite-difference gradient of a scalar function at `x`, restricted
/// to `indices` (all elements when empty). The function is evaluated in f32
/// but the difference quotient is formed in f64.
pub fn fd_grad(
    f: &mut dyn FnMut(&[f32]) -> Result<f64>,
    x: &[f32],
    indices: &[usize],
    h: f32,
) -> Result<Vec<(usize, f32)>> {
    let all: Vec<usize>;
    let idx: &[usize] = if indices.is_empty() {
        all = (0..x.len()).collect();
        &all
    } else {
        indices
    };
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        out.push((i, ((fp - fm) / (2.0 * h as f64)) as f32));
    }
    Ok(out)
}

/// Worst disagreement between analytic and numeric derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f32,
    pub worst_index: usize,
    pub worst_analytic: f32,
    pub worst_numeric: f32,
}

impl GradReport {
    pub fn passes(&self, tol: f32) -> bool {
        self.max_rel < tol
    }
}

/// Relative error with an absolute floor: differences within the floor are
/// agreement regardless of scale.
pub fn rel_err(analytic: f32, numeric: f32, abs_floor: f32) -> f32 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compare an analytic gradient against `(index, derivative)` pairs from
/// [`fd_grad`].
pub fn compare(analytic: &[f32], numeric: &[(usize, f32)], abs_floor: f32) -> GradReport {
    let mut report = GradReport {
        checked: numeric.len(),
        max_rel: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &(i, n) in numeric {
        let a = analytic[i];
        let r = rel_err(a, n, abs_floor);
        if r >= report.max_rel {
            report.max_rel = r;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    report
}

/// Deterministic low-discrepancy pick of up to `take` element indices out of
/// `numel`, spread across the whole tensor.
pub fn probe_indices(numel: usize, take: usize) -> Vec<usize> {
    if numel <= take {
        return (0..numel).collect();
    }
    let mut out = Vec::with_capacity(take);
    for j in 0..take {
        // strided walk with a coprime-ish offset so probes are not clustered
        let i = (j * numel) / take + (j * 7919) % (numel / take).max(1);
        out.push(i.min(numel - 1));
    }
    out.sort_unstable();
    out.dedup();
    out
}
