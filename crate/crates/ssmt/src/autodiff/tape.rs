use crate::autodiff::tensor::Tensor;
use crate::error::{Result, SsmtError};

/// Handle to a node on a [`Tape`]. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f32 = 0.797_884_56;
const GELU_C: f32 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    ClampUnit(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Matmul(Var, Var),
    Transpose2(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Var, Var),
    Concat0(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Resample2d {
        x: Var,
        mode: ResampleMode,
    },
    Mean(Var),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Wengert list: ops are recorded in execution order and replayed in exact
/// reverse order by [`Tape::backward`]. Gradients accumulate additively into
/// leaf tensors that were registered with `requires_grad`.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Its `requires_grad` flag decides whether
    /// backward will populate a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Register an input that never receives a gradient, whatever its flag.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ── elementwise ──

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SsmtError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(data, self.shape(a))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_vec(data, self.shape(a))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(data, self.shape(a))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x / y)
            .collect();
        let value = Tensor::from_vec(data, self.shape(a))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Div(a, b), needs))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x + c).collect();
        let value = Tensor::from_vec(data, self.shape(a)).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(data, self.shape(a)).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::MulScalar(a, c), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let value = Tensor::from_vec(data, self.shape(a)).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::from_vec(data, self.shape(a)).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|&x| gelu_value(x)).collect();
        let value = Tensor::from_vec(data, self.shape(a)).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Gelu(a), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let value = Tensor::from_vec(data, self.shape(a)).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Sqrt(a), needs)
    }

    /// Clamp to [0,1]; gradient passes only through the open interval.
    pub fn clamp_unit(&mut self, a: Var) -> Var {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let value = Tensor::from_vec(data, self.shape(a)).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::ClampUnit(a), needs)
    }

    // ── reductions ──

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len();
        let sum: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar((sum / n as f64) as f32);
        let needs = self.needs(a);
        self.push(value, Op::Mean(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let sum: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar(sum as f32);
        let needs = self.needs(a);
        self.push(value, Op::SumAll(a), needs)
    }

    // ── normalization ──

    /// Softmax over the last axis with max-subtraction. Entries fed −∞ come
    /// out exactly 0; a lane that is entirely −∞ is a degenerate-row error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| {
            SsmtError::Dim("softmax requires at least one axis".to_string())
        })?;
        let xv = self.data(a);
        let rows = xv.len() / d;
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().fold(f32::NEG_INFINITY, |acc, &v| acc.max(v));
            if m == f32::NEG_INFINITY {
                return Err(SsmtError::DegenerateSoftmax);
            }
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * d + j] = e;
                sum += e as f64;
            }
            for j in 0..d {
                out[r * d + j] = (out[r * d + j] as f64 / sum) as f32;
            }
        }
        let value = Tensor::from_vec(out, &shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax(a), needs))
    }

    /// Normalize over the last axis, then scale/shift: gamma*(x−μ)/√(σ²+ε)+beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| SsmtError::Dim("layer_norm requires at least one axis".to_string()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(SsmtError::Shape {
                op: "layer_norm(gamma/beta)",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![d],
            });
        }
        let xv = self.data(x);
        let rows = xv.len() / d;
        let mut out = vec![0.0f32; xv.len()];
        {
            let gv = self.data(gamma);
            let bv = self.data(beta);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let (mean, rstd) = row_moments(row);
                for j in 0..d {
                    let xhat = ((row[j] as f64 - mean) * rstd) as f32;
                    out[r * d + j] = xhat * gv[j] + bv[j];
                }
            }
        }
        let value = Tensor::from_vec(out, &shape)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, needs))
    }

    // ── linear algebra / layout ──

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SsmtError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let x = av[i * k + kk];
                let brow = &bv[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let value = Tensor::from_vec(out, &[m, n])?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(SsmtError::Dim(format!(
                "transpose2 requires a rank-2 tensor, got {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.data(a);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::from_vec(out, &[n, m])?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Transpose2(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(SsmtError::Dim(format!(
                "slice_cols [{start}, {}) out of range for shape {s:?}",
                start + len
            )));
        }
        let (m, n) = (s[0], s[1]);
        let av = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + start + len]);
        }
        let value = Tensor::from_vec(out, &[m, len])?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::SliceCols { x: a, start, len }, needs))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(SsmtError::Shape {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, na, nb) = (sa[0], sa[1], sb[1]);
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            out.extend_from_slice(&av[r * na..(r + 1) * na]);
            out.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let value = Tensor::from_vec(out, &[m, na + nb])?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), needs))
    }

    /// Concatenate along axis 0; trailing dimensions must match.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(SsmtError::Shape {
                op: "concat0",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut shape = sa.to_vec();
        shape[0] = sa[0] + sb[0];
        let mut out = Vec::with_capacity(self.data(a).len() + self.data(b).len());
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        let value = Tensor::from_vec(out, &shape)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat0(a, b), needs))
    }

    /// Add a rank-1 bias along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| SsmtError::Dim("add_bias requires at least one axis".to_string()))?;
        if self.shape(bias) != [d] {
            return Err(SsmtError::Shape {
                op: "add_bias",
                lhs: s,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let av = self.data(a);
        let bv = self.data(bias);
        let mut out = vec![0.0f32; av.len()];
        for (i, &v) in av.iter().enumerate() {
            out[i] = v + bv[i % d];
        }
        let value = Tensor::from_vec(out, &s)?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(a, bias), needs))
    }

    // ── spatial ──

    /// Cross-correlation of x [C_in,H,W] with w [C_out,C_in,k,k], zero padding.
    /// Odd square kernels with pad = k/2 keep spatial size at stride 1.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(SsmtError::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || kh != kw {
            return Err(SsmtError::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(SsmtError::Dim(format!("conv2d kernel must be odd, got {k}")));
        }
        if pad != k / 2 {
            return Err(SsmtError::Dim(format!(
                "conv2d expects pad = k/2 ({}), got {pad}",
                k / 2
            )));
        }
        if stride == 0 {
            return Err(SsmtError::Dim("conv2d stride must be positive".to_string()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(SsmtError::Dim(format!(
                "conv2d kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(SsmtError::Shape {
                    op: "conv2d(bias)",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let xv = self.data(x);
        let wv = self.data(w);
        let bv: Option<Vec<f32>> = bias.map(|b| self.data(b).to_vec());
        let mut out = vec![0.0f32; cout * oh * ow];
        for oc in 0..cout {
            let b0 = bv.as_ref().map_or(0.0, |b| b[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for ic in 0..cin {
                        let xbase = ic * h * wd;
                        let wbase = (oc * cin + ic) * k * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xv[xrow + ix as usize] * wv[wrow + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let value = Tensor::from_vec(out, &[cout, oh, ow])?;
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Resize [C,H,W] to [C,out_h,out_w] with corner-aligned sampling, so a
    /// bilinear resize reproduces affine fields exactly.
    pub fn resample2d(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
        mode: ResampleMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(SsmtError::Dim(format!(
                "resample2d requires [C,H,W], got {xs:?}"
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(SsmtError::Dim("resample2d output dims must be positive".to_string()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.data(x);
        let mut out = vec![0.0f32; c * out_h * out_w];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for oy in 0..out_h {
                let sy = src_coord(oy, out_h, h);
                for ox in 0..out_w {
                    let sx = src_coord(ox, out_w, w);
                    let v = match mode {
                        ResampleMode::Nearest => {
                            let iy = (sy.round() as usize).min(h - 1);
                            let ix = (sx.round() as usize).min(w - 1);
                            plane[iy * w + ix]
                        }
                        ResampleMode::Bilinear => bilinear_sample(plane, h, w, sy, sx),
                    };
                    out[(ch * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        let value = Tensor::from_vec(out, &[c, out_h, out_w])?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Resample2d { x, mode }, needs))
    }

    // ── reverse pass ──

    /// Propagate d(loss)/d(node) from a scalar loss down the tape and add the
    /// results into the gradient buffers of `requires_grad` leaves. Repeated
    /// calls accumulate, so two backward passes double every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(SsmtError::Contract(
                "backward: loss is not on this tape".to_string(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SsmtError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = scratch[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &g, &mut scratch);
        }
        for (i, slot) in scratch.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let acc = node.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, node: usize, g: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    axpy(slot(scratch, a, self.data(a).len()), g, 1.0);
                }
                if self.needs(b) {
                    axpy(slot(scratch, b, self.data(b).len()), g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    axpy(slot(scratch, a, self.data(a).len()), g, 1.0);
                }
                if self.needs(b) {
                    axpy(slot(scratch, b, self.data(b).len()), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.data(b);
                    let da = slot(scratch, a, bv.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if self.needs(b) {
                    let av = self.data(a);
                    let db = slot(scratch, b, av.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.data(b);
                if self.needs(a) {
                    let da = slot(scratch, a, bv.len());
                    for j in 0..g.len() {
                        da[j] += g[j] / bv[j];
                    }
                }
                if self.needs(b) {
                    let av = self.data(a);
                    let db = slot(scratch, b, av.len());
                    for j in 0..g.len() {
                        db[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.needs(a) {
                    axpy(slot(scratch, a, g.len()), g, 1.0);
                }
            }
            Op::MulScalar(a, c) => {
                if self.needs(a) {
                    axpy(slot(scratch, a, g.len()), g, c);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(a) {
                    let y = self.nodes[node].value.data();
                    let da = slot(scratch, a, y.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(a) {
                    let xv = self.data(a);
                    let da = slot(scratch, a, xv.len());
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(a) {
                    let xv = self.data(a);
                    let da = slot(scratch, a, xv.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * gelu_grad(xv[j]);
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.needs(a) {
                    let y = self.nodes[node].value.data();
                    let da = slot(scratch, a, y.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * 0.5 / y[j];
                    }
                }
            }
            Op::ClampUnit(a) => {
                if self.needs(a) {
                    let xv = self.data(a);
                    let da = slot(scratch, a, xv.len());
                    for j in 0..g.len() {
                        if xv[j] > 0.0 && xv[j] < 1.0 {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(a) {
                    let y = self.nodes[node].value.data();
                    let d = *self.nodes[node].value.shape().last().expect("rank >= 1");
                    let da = slot(scratch, a, y.len());
                    for r in 0..y.len() / d {
                        let base = r * d;
                        let mut dot = 0.0f64;
                        for j in 0..d {
                            dot += g[base + j] as f64 * y[base + j] as f64;
                        }
                        for j in 0..d {
                            da[base + j] += y[base + j] * (g[base + j] - dot as f32);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.data(x);
                let d = *self.nodes[x.0].value.shape().last().expect("rank >= 1");
                let gv = self.data(gamma);
                let rows = xv.len() / d;
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let wants_x = self.needs(x);
                let mut dx = if wants_x { vec![0.0f32; xv.len()] } else { Vec::new() };
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let (mean, rstd) = row_moments(row);
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for j in 0..d {
                        let xhat = (row[j] as f64 - mean) * rstd;
                        let go = g[r * d + j] as f64;
                        dgamma[j] += go * xhat;
                        dbeta[j] += go;
                        let dxhat = go * gv[j] as f64;
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    if wants_x {
                        for j in 0..d {
                            let xhat = (row[j] as f64 - mean) * rstd;
                            let dxhat = g[r * d + j] as f64 * gv[j] as f64;
                            dx[r * d + j] = (rstd * (dxhat - m1 - xhat * m2)) as f32;
                        }
                    }
                }
                if wants_x {
                    axpy(slot(scratch, x, xv.len()), &dx, 1.0);
                }
                if self.needs(gamma) {
                    let dst = slot(scratch, gamma, d);
                    for j in 0..d {
                        dst[j] += dgamma[j] as f32;
                    }
                }
                if self.needs(beta) {
                    let dst = slot(scratch, beta, d);
                    for j in 0..d {
                        dst[j] += dbeta[j] as f32;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    // dA = g · Bᵀ
                    let bv = self.data(b);
                    let da = slot(scratch, a, m * k);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0f32;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                }
                if self.needs(b) {
                    // dB = Aᵀ · g
                    let av = self.data(a);
                    let db = slot(scratch, b, k * n);
                    for i in 0..m {
                        let x = &av[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (kk, &xk) in x.iter().enumerate() {
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] += xk * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose2(a) => {
                if self.needs(a) {
                    let s = self.nodes[a.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    let da = slot(scratch, a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(a) {
                    axpy(slot(scratch, a, g.len()), g, 1.0);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(x) {
                    let s = self.nodes[x.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    let dx = slot(scratch, x, m * n);
                    for r in 0..m {
                        for j in 0..len {
                            dx[r * n + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let na = self.nodes[a.0].value.shape()[1];
                let nb = self.nodes[b.0].value.shape()[1];
                let m = self.nodes[a.0].value.shape()[0];
                if self.needs(a) {
                    let da = slot(scratch, a, m * na);
                    for r in 0..m {
                        for j in 0..na {
                            da[r * na + j] += g[r * (na + nb) + j];
                        }
                    }
                }
                if self.needs(b) {
                    let db = slot(scratch, b, m * nb);
                    for r in 0..m {
                        for j in 0..nb {
                            db[r * nb + j] += g[r * (na + nb) + na + j];
                        }
                    }
                }
            }
            Op::Concat0(a, b) => {
                let la = self.data(a).len();
                if self.needs(a) {
                    axpy(slot(scratch, a, la), &g[..la], 1.0);
                }
                if self.needs(b) {
                    let lb = self.data(b).len();
                    axpy(slot(scratch, b, lb), &g[la..], 1.0);
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(a) {
                    axpy(slot(scratch, a, g.len()), g, 1.0);
                }
                if self.needs(bias) {
                    let d = self.data(bias).len();
                    let db = slot(scratch, bias, d);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let os = self.nodes[node].value.shape();
                let (oh, ow) = (os[1], os[2]);
                let xv = self.data(x);
                let wv = self.data(w);
                let wants_x = self.needs(x);
                let wants_w = self.needs(w);
                let mut dx = if wants_x { vec![0.0f32; xv.len()] } else { Vec::new() };
                let mut dw = if wants_w { vec![0.0f32; wv.len()] } else { Vec::new() };
                for oc in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(oc * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for ic in 0..cin {
                                let xbase = ic * h * wd;
                                let wbase = (oc * cin + ic) * k * k;
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = xbase + iy as usize * wd;
                                    let wrow = wbase + ky * k;
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        if wants_w {
                                            dw[wrow + kx] += go * xv[xrow + ix as usize];
                                        }
                                        if wants_x {
                                            dx[xrow + ix as usize] += go * wv[wrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if wants_x {
                    axpy(slot(scratch, x, xv.len()), &dx, 1.0);
                }
                if wants_w {
                    axpy(slot(scratch, w, wv.len()), &dw, 1.0);
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let db = slot(scratch, b, cout);
                        for oc in 0..cout {
                            let mut acc = 0.0f32;
                            for p in 0..oh * ow {
                                acc += g[oc * oh * ow + p];
                            }
                            db[oc] += acc;
                        }
                    }
                }
            }
            Op::Resample2d { x, mode } => {
                if self.needs(x) {
                    let xs = self.nodes[x.0].value.shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let os = self.nodes[node].value.shape();
                    let (oh, ow) = (os[1], os[2]);
                    let dx = slot(scratch, x, c * h * w);
                    for ch in 0..c {
                        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        for oy in 0..oh {
                            let sy = src_coord(oy, oh, h);
                            for ox in 0..ow {
                                let sx = src_coord(ox, ow, w);
                                let go = g[(ch * oh + oy) * ow + ox];
                                match mode {
                                    ResampleMode::Nearest => {
                                        let iy = (sy.round() as usize).min(h - 1);
                                        let ix = (sx.round() as usize).min(w - 1);
                                        dplane[iy * w + ix] += go;
                                    }
                                    ResampleMode::Bilinear => {
                                        let (y0, y1, fy) = lerp_ends(sy, h);
                                        let (x0, x1, fx) = lerp_ends(sx, w);
                                        dplane[y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                                        dplane[y0 * w + x1] += go * (1.0 - fy) * fx;
                                        dplane[y1 * w + x0] += go * fy * (1.0 - fx);
                                        dplane[y1 * w + x1] += go * fy * fx;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Mean(a) => {
                if self.needs(a) {
                    let n = self.data(a).len();
                    let da = slot(scratch, a, n);
                    let gv = g[0] / n as f32;
                    for v in da.iter_mut() {
                        *v += gv;
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(a) {
                    let n = self.data(a).len();
                    let da = slot(scratch, a, n);
                    for v in da.iter_mut() {
                        *v += g[0];
                    }
                }
            }
        }
    }
}

fn slot<'a>(scratch: &'a mut [Option<Vec<f32>>], v: Var, numel: usize) -> &'a mut [f32] {
    scratch[v.0]
        .get_or_insert_with(|| vec![0.0; numel])
        .as_mut_slice()
}

fn axpy(dst: &mut [f32], src: &[f32], scale: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Per-row mean and reciprocal standard deviation, accumulated in f64.
fn row_moments(row: &[f32]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn gelu_value(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Corner-aligned source coordinate: endpoints map to endpoints, a single
/// output sample reads the input center.
pub(crate) fn src_coord(o: usize, out_len: usize, in_len: usize) -> f32 {
    if out_len == 1 {
        (in_len as f32 - 1.0) / 2.0
    } else {
        (o * (in_len - 1)) as f32 / (out_len - 1) as f32
    }
}

pub(crate) fn lerp_ends(s: f32, len: usize) -> (usize, usize, f32) {
    let i0 = (s.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f32)
}

pub(crate) fn bilinear_sample(plane: &[f32], h: usize, w: usize, sy: f32, sx: f32) -> f32 {
    let (y0, y1, fy) = lerp_ends(sy, h);
    let (x0, x1, fx) = lerp_ends(sx, w);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}
