//! Operation recording and reverse-mode gradient propagation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Ops are
//! appended in execution order, so the node list is already topologically
//! sorted and `backward` is a single reverse sweep.

use std::cell::Cell;
use std::collections::HashMap;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Clamp applied to probabilities inside [`Tape::binary_cross_entropy`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Linear,
    MatMul,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    MeanPoolHeight,
    BilinearSample,
    SoftmaxCrossEntropy,
    BinaryCrossEntropy,
    BinaryCrossEntropyLogits,
    Add,
    Sub,
    Mul,
    AddRow,
    Affine,
    Sum,
    Mean,
    Reshape,
    Concat,
    Slice,
    Gather,
    SoftmaxRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::MatMul => "matmul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::MeanPoolHeight => "mean_pool_height",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
            OpKind::BinaryCrossEntropyLogits => "binary_cross_entropy_logits",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Affine => "affine",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Gather => "gather",
            OpKind::SoftmaxRows => "softmax_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

pub(crate) const ALL_KINDS: [OpKind; 26] = [
    OpKind::Leaf,
    OpKind::Conv2d,
    OpKind::Linear,
    OpKind::MatMul,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::Abs,
    OpKind::Square,
    OpKind::MeanPoolHeight,
    OpKind::BilinearSample,
    OpKind::SoftmaxCrossEntropy,
    OpKind::BinaryCrossEntropy,
    OpKind::BinaryCrossEntropyLogits,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::AddRow,
    OpKind::Affine,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::Gather,
    OpKind::SoftmaxRows,
];

thread_local! {
    static CORRUPTED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Negative-control hook: scales the upstream gradient of one op kind by 1.5
/// during `backward` on the current thread. Only meant for exercising the
/// gradient checker.
#[doc(hidden)]
pub fn set_corrupted_backward(kind: Option<OpKind>) {
    CORRUPTED.with(|c| c.set(kind));
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cells(&self) -> usize {
        self.oh * self.ow
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    MeanPoolHeight(Var),
    BilinearSample {
        map: Var,
        grid: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BinaryCrossEntropy {
        prob: Var,
        labels: Vec<f64>,
    },
    BinaryCrossEntropyLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    SoftmaxRows(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::MeanPoolHeight(_) => OpKind::MeanPoolHeight,
            Op::BilinearSample { .. } => OpKind::BilinearSample,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::BinaryCrossEntropy { .. } => OpKind::BinaryCrossEntropy,
            Op::BinaryCrossEntropyLogits { .. } => OpKind::BinaryCrossEntropyLogits,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Affine { .. } => OpKind::Affine,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Gather { .. } => OpKind::Gather,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn dims_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
}

/// `c[m,n] += a[m,k] * b[k,n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserted extents keep every strided access inside the
    // slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite output from {}",
            op.kind().name()
        );
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. It takes part in `backward` iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), rg, Op::Leaf)
    }

    /// Records a constant leaf (never receives a gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Copies the value of `v` into a fresh leaf cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    /// Registers the named parameter as a differentiable leaf. Repeated calls
    /// with the same name return the same handle.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of parameters registered on this tape, in registration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated")
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    // ---------------------------------------------------------------- ops

    /// 2-d cross-correlation of `[n,c_in,h,w]` with `[c_out,c_in,k,k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 4 || ws.len() != 4 {
            return dims_err(format!("conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || k != k2 {
            return dims_err(format!("conv2d weight {ws:?} incompatible with input {xs:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return dims_err(format!("conv2d bias {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (eh, ew) = (h + 2 * pad, w + 2 * pad);
        if eh < k || ew < k || (eh - k) % stride != 0 || (ew - k) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size not integral for h={h}, w={w}, k={k}, stride={stride}, pad={pad}"
            )));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (eh - k) / stride + 1,
            ow: (ew - k) / stride + 1,
        };
        let (kk, l) = (geom.patch(), geom.cells());
        let x = &self.nodes[input.0].value;
        let mut cols = vec![0.0; n * kk * l];
        for b in 0..n {
            im2col(
                &x[b * cin * h * w..(b + 1) * cin * h * w],
                &geom,
                &mut cols[b * kk * l..(b + 1) * kk * l],
            );
        }
        let wv = &self.nodes[weight.0].value;
        let mut out = vec![0.0; n * cout * l];
        for b in 0..n {
            let ob = &mut out[b * cout * l..(b + 1) * cout * l];
            if let Some(bv) = bias {
                let bias_v = &self.nodes[bv.0].value;
                for co in 0..cout {
                    ob[co * l..(co + 1) * l].fill(bias_v[co]);
                }
            }
            gemm(cout, kk, l, wv, kk, 1, &cols[b * kk * l..], l, 1, ob, l);
        }
        let needs = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            vec![n, cout, geom.oh, geom.ow],
            out,
            needs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Affine map `[n,p] x [q,p]^T + [q]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return dims_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, p, q) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [q] {
                return dims_err(format!("linear bias {:?}, expected [{q}]", self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * q];
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            for row in out.chunks_mut(q) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            p,
            q,
            &self.nodes[input.0].value,
            p,
            1,
            &self.nodes[weight.0].value,
            1,
            p,
            &mut out,
            q,
        );
        let needs = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(vec![n, q], out, needs, Op::Linear { input, weight, bias }))
    }

    /// Matrix product `[n,k] x [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dims_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            &self.nodes[a.0].value,
            k,
            1,
            &self.nodes[b.0].value,
            m,
            1,
            &mut out,
            m,
        );
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(vec![n, m], out, needs, Op::MatMul(a, b)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.ng(x);
        self.push(shape, value, needs, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    /// Mean over the height axis of `[n,c,h,w]`, giving `[n,c,1,w]`.
    pub fn mean_pool_height(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dims_err(format!("mean_pool_height expects 4-d input, got {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * c * w];
        for nc in 0..n * c {
            let dst = &mut out[nc * w..(nc + 1) * w];
            for r in 0..h {
                let src = &xv[(nc * h + r) * w..(nc * h + r + 1) * w];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= h as f64);
        }
        let needs = self.ng(x);
        Ok(self.push(vec![n, c, 1, w], out, needs, Op::MeanPoolHeight(x)))
    }

    /// Bilinear interpolation of a `[c,h,w]` map at `grid` points (`[p,2]`,
    /// rows of `(x, y)` in map pixel units). Samples outside the map read as
    /// zero. Output is `[c,p]`.
    pub fn bilinear_sample(&mut self, map: Var, grid: Var) -> Result<Var> {
        let (ms, gs) = (self.shape(map).to_vec(), self.shape(grid).to_vec());
        if ms.len() != 3 || gs.len() != 2 || gs[1] != 2 {
            return dims_err(format!("bilinear_sample: map {ms:?}, grid {gs:?}"));
        }
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let p = gs[0];
        let mv = &self.nodes[map.0].value;
        let gv = &self.nodes[grid.0].value;
        let mut out = vec![0.0; c * p];
        for i in 0..p {
            let taps = bilinear_taps(gv[2 * i], gv[2 * i + 1], h, w);
            for ch in 0..c {
                let plane = &mv[ch * h * w..(ch + 1) * h * w];
                out[ch * p + i] = taps.iter().flatten().map(|&(idx, wt)| wt * plane[idx]).sum();
            }
        }
        let needs = self.ng(map) || self.ng(grid);
        Ok(self.push(vec![c, p], out, needs, Op::BilinearSample { map, grid }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return dims_err(format!(
                "softmax_cross_entropy: logits {s:?} with {} targets",
                targets.len()
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("target class {t} outside [0,{k})")));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[targets[r]];
        }
        let needs = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss / n as f64],
            needs,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy; probabilities clamped to `[eps, 1-eps]`.
    pub fn binary_cross_entropy(&mut self, prob: Var, labels: &[f64]) -> Result<Var> {
        let pv = &self.nodes[prob.0].value;
        if pv.len() != labels.len() {
            return dims_err(format!(
                "binary_cross_entropy: {} probabilities, {} labels",
                pv.len(),
                labels.len()
            ));
        }
        let n = pv.len() as f64;
        let loss: f64 = pv
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let needs = self.ng(prob);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::BinaryCrossEntropy {
                prob,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)`, computed without
    /// forming the probabilities. Gradients stay finite and non-zero for
    /// any logit.
    pub fn binary_cross_entropy_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let zv = &self.nodes[logits.0].value;
        if zv.len() != labels.len() {
            return dims_err(format!(
                "binary_cross_entropy_logits: {} logits, {} labels",
                zv.len(),
                labels.len()
            ));
        }
        let n = zv.len() as f64;
        let loss: f64 = zv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let needs = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::BinaryCrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dims_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push(shape, value, needs, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds `row` (numel = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let m = *self.shape(x).last().unwrap();
        if self.nodes[row.0].value.len() != m {
            return dims_err(format!(
                "add_row: row of {} values for last dim {m}",
                self.nodes[row.0].value.len()
            ));
        }
        let rv = &self.nodes[row.0].value;
        let value = self.nodes[x.0]
            .value
            .chunks(m)
            .flat_map(|r| r.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x) || self.ng(row);
        Ok(self.push(shape, value, needs, Op::AddRow { x, row }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let needs = self.ng(x);
        self.push(vec![1], vec![s], needs, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.ng(x);
        self.push(vec![1], vec![s], needs, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() || shape.contains(&0) {
            return dims_err(format!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.ng(x);
        Ok(self.push(shape, value, needs, Op::Reshape(x)))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return dims_err("concat of zero tensors".into()),
        };
        if axis >= first.len() {
            return dims_err(format!("concat axis {axis} for rank {}", first.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dims_err(format!("concat: {s:?} does not match {first:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let a = self.shape(v)[axis];
                value.extend_from_slice(&self.nodes[v.0].value[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            shape,
            value,
            needs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return dims_err(format!("slice {start}..{} on axis {axis} of {s:?}", start + len));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let a = s[axis];
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&xv[(o * a + start) * inner..(o * a + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.ng(x);
        Ok(self.push(shape, value, needs, Op::Slice { x, axis, start, len }))
    }

    /// Picks flat elements of `x` into a 1-d tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if indices.is_empty() {
            return dims_err("gather with no indices".into());
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Input(format!("gather index {i} out of {}", xv.len())));
        }
        let value = indices.iter().map(|&i| xv[i]).collect();
        let needs = self.ng(x);
        Ok(self.push(
            vec![indices.len()],
            value,
            needs,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let m = *self.shape(x).last().unwrap();
        let mut value = self.nodes[x.0].value.clone();
        for row in value.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.ng(x);
        self.push(shape, value, needs, Op::SoftmaxRows(x))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d`loss` to every node that needs a gradient. Gradients are
    /// added to whatever earlier `backward` calls left on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let corrupted = CORRUPTED.with(|c| c.get());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if corrupted == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Adds the tape gradient of every registered parameter into `params`.
    /// Registered parameters that the loss does not reach receive zeros.
    pub fn accumulate_param_grads(&self, params: &mut ParameterSet) -> Result<()> {
        for (name, v) in &self.params {
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("parameter {name:?} vanished")))?;
            match &self.nodes[v.0].grad {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let (kk, l, cout) = (geom.patch(), geom.cells(), geom.cout);
                if let Some(dw) = slot(nodes, grads, *weight) {
                    for b in 0..geom.n {
                        gemm(cout, l, kk, &g[b * cout * l..], l, 1, &cols[b * kk * l..], 1, l, dw, kk);
                    }
                }
                if let Some(bias) = bias {
                    if let Some(db) = slot(nodes, grads, *bias) {
                        for b in 0..geom.n {
                            for co in 0..cout {
                                let off = (b * cout + co) * l;
                                db[co] += g[off..off + l].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if nodes[input.0].needs_grad {
                    let wv = &nodes[weight.0].value;
                    let mut dcols = vec![0.0; kk * l];
                    let chw = geom.cin * geom.h * geom.w;
                    let dx = slot(nodes, grads, *input).unwrap();
                    for b in 0..geom.n {
                        dcols.fill(0.0);
                        gemm(kk, cout, l, wv, 1, kk, &g[b * cout * l..], l, 1, &mut dcols, l);
                        col2im(&dcols, geom, &mut dx[b * chw..(b + 1) * chw]);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = &nodes[input.0].shape;
                let (n, p) = (xs[0], xs[1]);
                let q = nodes[weight.0].shape[0];
                if let Some(dx) = slot(nodes, grads, *input) {
                    gemm(n, q, p, g, q, 1, &nodes[weight.0].value, p, 1, dx, p);
                }
                if let Some(dw) = slot(nodes, grads, *weight) {
                    gemm(q, n, p, g, 1, q, &nodes[input.0].value, p, 1, dw, p);
                }
                if let Some(bias) = bias {
                    if let Some(db) = slot(nodes, grads, *bias) {
                        for row in g.chunks(q) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let m = nodes[b.0].shape[1];
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm(n, m, k, g, m, 1, &nodes[b.0].value, 1, m, da, k);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm(k, n, m, &nodes[a.0].value, 1, k, g, m, 1, db, m);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = &nodes[x.0].value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        } else if xi < 0.0 {
                            *d -= gi;
                        }
                    }
                }
            }
            Op::Square(x) => {
                let xv = &nodes[x.0].value;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += 2.0 * xi * gi;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += scale * gi);
                }
            }
            Op::MeanPoolHeight(x) => {
                let s = &nodes[x.0].shape;
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for c in 0..nc {
                        let gr = &g[c * w..(c + 1) * w];
                        for r in 0..h {
                            let dst = &mut dx[(c * h + r) * w..(c * h + r + 1) * w];
                            dst.iter_mut().zip(gr).for_each(|(d, gi)| *d += gi / h as f64);
                        }
                    }
                }
            }
            Op::BilinearSample { map, grid } => {
                let ms = &nodes[map.0].shape;
                let (c, h, w) = (ms[0], ms[1], ms[2]);
                let gv = &nodes[grid.0].value;
                let p = gv.len() / 2;
                if let Some(dm) = slot(nodes, grads, *map) {
                    for i in 0..p {
                        let taps = bilinear_taps(gv[2 * i], gv[2 * i + 1], h, w);
                        for ch in 0..c {
                            let gi = g[ch * p + i];
                            for &(idx, wt) in taps.iter().flatten() {
                                dm[ch * h * w + idx] += wt * gi;
                            }
                        }
                    }
                }
                if let Some(dg) = slot(nodes, grads, *grid) {
                    let mv = &nodes[map.0].value;
                    for i in 0..p {
                        let (x, y) = (gv[2 * i], gv[2 * i + 1]);
                        let (x0, y0) = (x.floor(), y.floor());
                        let (fx, fy) = (x - x0, y - y0);
                        let (x0, y0) = (x0 as i64, y0 as i64);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ch in 0..c {
                            let plane = &mv[ch * h * w..(ch + 1) * h * w];
                            let at = |yy: i64, xx: i64| -> f64 {
                                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                    0.0
                                } else {
                                    plane[yy as usize * w + xx as usize]
                                }
                            };
                            let (a, b) = (at(y0, x0), at(y0, x0 + 1));
                            let (cc, d) = (at(y0 + 1, x0), at(y0 + 1, x0 + 1));
                            let gi = g[ch * p + i];
                            gx += gi * ((1.0 - fy) * (b - a) + fy * (d - cc));
                            gy += gi * ((1.0 - fx) * (cc - a) + fx * (d - b));
                        }
                        dg[2 * i] += gx;
                        dg[2 * i + 1] += gy;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let k = probs.len() / n;
                if let Some(dl) = slot(nodes, grads, *logits) {
                    let scale = g[0] / n as f64;
                    for r in 0..n {
                        for j in 0..k {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            dl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy { prob, labels } => {
                let pv = &nodes[prob.0].value;
                let n = pv.len() as f64;
                if let Some(dp) = slot(nodes, grads, *prob) {
                    for ((d, &p), &y) in dp.iter_mut().zip(pv).zip(labels) {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            continue;
                        }
                        *d += g[0] * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
                    }
                }
            }
            Op::BinaryCrossEntropyLogits { logits, labels } => {
                let zv = &nodes[logits.0].value;
                let n = zv.len() as f64;
                if let Some(dz) = slot(nodes, grads, *logits) {
                    for ((d, &z), &y) in dz.iter_mut().zip(zv).zip(labels) {
                        *d += g[0] * (stable_sigmoid(z) - y) / n;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(dr) = slot(nodes, grads, *row) {
                    let m = dr.len();
                    for r in g.chunks(m) {
                        dr.iter_mut().zip(r).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let a = nodes[v.0].shape[*axis];
                    if let Some(dv) = slot(nodes, grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + a) * inner];
                            let dst = &mut dv[o * a * inner..(o + 1) * a * inner];
                            dst.iter_mut().zip(src).for_each(|(d, gi)| *d += gi);
                        }
                    }
                    offset += a;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let xs = &nodes[x.0].shape;
                let (outer, inner) = outer_inner(xs, *axis);
                let a = xs[*axis];
                if let Some(dx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let dst = &mut dx[(o * a + start) * inner..(o * a + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Gather { x, indices } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (&i, gi) in indices.iter().zip(g) {
                        dx[i] += gi;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let m = *node.shape.last().unwrap();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((dr, yr), gr) in dx.chunks_mut(m).zip(node.value.chunks(m)).zip(g.chunks(m)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                        for ((d, y), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += y * (gi - dot);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulation buffer for `v` if it participates in backward.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Logistic function without overflow for large |x|.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Up to four `(flat index, weight)` pairs for sampling at `(x, y)`;
/// neighbours outside the map are `None`.
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let tap = |yy: i64, xx: i64, wt: f64| {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            None
        } else {
            Some((yy as usize * w + xx as usize, wt))
        }
    };
    [
        tap(y0, x0, (1.0 - fx) * (1.0 - fy)),
        tap(y0, x0 + 1, fx * (1.0 - fy)),
        tap(y0 + 1, x0, (1.0 - fx) * fy),
        tap(y0 + 1, x0 + 1, fx * fy),
    ]
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let l = g.cells();
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let row = &mut cols[r * l..(r + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as i64 - g.pad as i64;
                    if iy < 0 || iy >= g.h as i64 {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as i64 - g.pad as i64;
                        if ix >= 0 && ix < g.w as i64 {
                            row[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let l = g.cells();
    for ci in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let row = &cols[r * l..(r + 1) * l];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as i64 - g.pad as i64;
                    if iy < 0 || iy >= g.h as i64 {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as i64 - g.pad as i64;
                        if ix >= 0 && ix < g.w as i64 {
                            dx[base + ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
