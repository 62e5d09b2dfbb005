//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; every node's inputs precede
//! it, so the node order is already a topological order. Graphs are built for
//! one minibatch (or one attack step) and dropped afterwards.
//!
//! Backward only visits nodes that are both ancestors of the loss and
//! descendants of a requested node, so asking for input gradients alone never
//! pays for parameter gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// The differentiable forward operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d(Padding),
    AddBias,
    Relu,
    MaxPool2x2,
    Flatten,
    ScaleAdd { alpha: f64, beta: f64 },
}

impl OpKind {
    pub const fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::AddBias => "add_bias",
            OpKind::Relu => "relu",
            OpKind::MaxPool2x2 => "max_pool2x2",
            OpKind::Flatten => "flatten",
            OpKind::ScaleAdd { .. } => "scale_add",
        }
    }

    pub const fn arity(&self) -> usize {
        match self {
            OpKind::Relu | OpKind::MaxPool2x2 | OpKind::Flatten => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Node<S> {
    Leaf,
    MatMul,
    Conv2d {
        padding: (usize, usize),
        cols: Vec<S>,
    },
    AddBias,
    Relu,
    MaxPool2x2 {
        argmax: Vec<usize>,
    },
    Flatten,
    ScaleAdd {
        alpha: S,
        beta: S,
    },
    Scale {
        alpha: S,
    },
    Sum,
    SoftmaxXent {
        probs: Vec<S>,
        targets: Vec<S>,
        target_mass: Vec<S>,
        reduction: Reduction,
    },
    PairL2,
    LogitNorm,
}

#[derive(Debug)]
struct Entry<S> {
    node: Node<S>,
    inputs: Vec<usize>,
    value: Arc<Tensor<S>>,
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a leaf tensor (an input or a parameter).
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor<S>>>) -> Var {
        self.push(Node::Leaf, vec![], value.into())
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.0].value.shape()
    }

    fn push(&mut self, node: Node<S>, inputs: Vec<usize>, value: Arc<Tensor<S>>) -> Var {
        debug_assert!(inputs.iter().all(|&i| i < self.entries.len()));
        self.entries.push(Entry {
            node,
            inputs,
            value,
        });
        Var(self.entries.len() - 1)
    }

    fn finish(&mut self, op: &'static str, node: Node<S>, inputs: Vec<usize>, out: Tensor<S>) -> Result<Var> {
        out.check_finite(op)?;
        Ok(self.push(node, inputs, Arc::new(out)))
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::shape(
                kind.name(),
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d(p) => self.conv2d(inputs[0], inputs[1], p),
            OpKind::AddBias => self.add_bias(inputs[0], inputs[1]),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::MaxPool2x2 => self.max_pool2x2(inputs[0]),
            OpKind::Flatten => self.flatten(inputs[0]),
            OpKind::ScaleAdd { alpha, beta } => {
                self.scale_add(inputs[0], S::from_f64(alpha), inputs[1], S::from_f64(beta))
            }
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.finish("matmul", Node::MatMul, vec![a.0, b.0], out)
    }

    /// NHWC input `[n, h, w, c]` with HWIO kernel `[kh, kw, c, o]`, stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} and kernel {sw:?} must both be rank 4"),
            ));
        }
        let geom = ConvGeometry::new(&sx, &sw, padding)?;
        let cols = geom.im2col(self.value(x).data());
        let mut out = vec![S::zero(); geom.rows() * geom.cout];
        S::gemm(
            geom.rows(),
            geom.patch(),
            geom.cout,
            S::one(),
            &cols,
            geom.patch() as isize,
            1,
            self.value(w).data(),
            geom.cout as isize,
            1,
            S::zero(),
            &mut out,
            geom.cout as isize,
            1,
        );
        let out = Tensor::new(vec![geom.n, geom.oh, geom.ow, geom.cout], out)?;
        let node = Node::Conv2d {
            padding: (geom.ph, geom.pw),
            cols,
        };
        self.finish("conv2d", node, vec![x.0, w.0], out)
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::shape("add_bias", format!("input {sx:?}, bias {sb:?}")));
        }
        let bias = self.value(b).data();
        let mut out = (*self.value(x)).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (v, &bv) in chunk.iter_mut().zip(bias) {
                *v = *v + bv;
            }
        }
        self.finish("add_bias", Node::AddBias, vec![x.0, b.0], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.finish("relu", Node::Relu, vec![x.0], out)
    }

    /// 2x2 max pooling with stride 2 over NHWC; odd trailing rows/cols are dropped.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::shape("max_pool2x2", format!("input {s:?} is not NHWC with h, w >= 2")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best = ((b * h + 2 * y) * w + 2 * xx) * c + ch;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        self.finish("max_pool2x2", Node::MaxPool2x2 { argmax }, vec![x.0], out)
    }

    /// `[m, ...] -> [m, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = vec![v.rows(), v.row_len()];
        let out = v.clone().reshape(shape)?;
        self.finish("flatten", Node::Flatten, vec![x.0], out)
    }

    /// `alpha * a + beta * b` for equally shaped inputs.
    pub fn scale_add(&mut self, a: Var, alpha: S, b: Var, beta: S) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "scale_add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.finish("scale_add", Node::ScaleAdd { alpha, beta }, vec![a.0, b.0], out)
    }

    pub fn scale(&mut self, a: Var, alpha: S) -> Result<Var> {
        let out = self.value(a).map(|v| alpha * v);
        self.finish("scale", Node::Scale { alpha }, vec![a.0], out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.finish("sum", Node::Sum, vec![x.0], out)
    }

    /// Mean over the batch of the cross-entropy between `softmax(logits)` and
    /// the target distributions.
    pub fn softmax_xent(&mut self, logits: Var, targets: &Tensor<S>) -> Result<Var> {
        self.softmax_xent_reduced(logits, targets, Reduction::Mean)
    }

    pub(crate) fn softmax_xent_reduced(
        &mut self,
        logits: Var,
        targets: &Tensor<S>,
        reduction: Reduction,
    ) -> Result<Var> {
        const OP: &str = "softmax_xent";
        let z = self.value(logits);
        let s = z.shape();
        if s.len() != 2 || s[1] < 2 || targets.shape() != s {
            return Err(Error::shape(
                OP,
                format!("logits {s:?}, targets {:?} (need [m, K] with K >= 2)", targets.shape()),
            ));
        }
        let (m, k) = (s[0], s[1]);
        let mut probs = Vec::with_capacity(m * k);
        let mut target_mass = Vec::with_capacity(m);
        let mut total = S::zero();
        for i in 0..m {
            let row = z.row(i);
            let t = targets.row(i);
            let mass: f64 = t.iter().map(|v| v.as_f64()).sum();
            if (mass - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "{OP}: target row {i} sums to {mass}, expected 1"
                )));
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            let mut loss = S::zero();
            for (&zk, &tk) in row.iter().zip(t) {
                probs.push((zk - lse).exp());
                if tk != S::zero() {
                    loss = loss + tk * (lse - zk);
                }
            }
            target_mass.push(t.iter().copied().sum());
            total = total + loss;
        }
        if reduction == Reduction::Mean {
            total = total / S::from_f64(m as f64);
        }
        let node = Node::SoftmaxXent {
            probs,
            targets: targets.data().to_vec(),
            target_mass,
            reduction,
        };
        self.finish(OP, node, vec![logits.0], Tensor::scalar(total))
    }

    /// `(1/m) * sum_i ||a_i - b_i||^2`.
    pub fn pair_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rank() < 2 {
            return Err(Error::shape(
                "pair_l2",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let m = S::from_f64(va.rows() as f64);
        let ss: S = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.finish("pair_l2", Node::PairL2, vec![a.0, b.0], Tensor::scalar(ss / m))
    }

    /// `(1/m) * sum_i ||z_i||^2`.
    pub fn logit_norm(&mut self, z: Var) -> Result<Var> {
        let v = self.value(z);
        if v.rank() < 2 {
            return Err(Error::shape("logit_norm", format!("{:?}", v.shape())));
        }
        let m = S::from_f64(v.rows() as f64);
        let ss: S = v.data().iter().map(|&x| x * x).sum();
        self.finish("logit_norm", Node::LogitNorm, vec![z.0], Tensor::scalar(ss / m))
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`, in
    /// the same order. Nodes that do not influence `loss` get zeros.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<S>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let n = loss.0 + 1;
        // Nodes downstream of any requested node.
        let mut active = vec![false; n];
        for v in wrt {
            if v.0 < n {
                active[v.0] = true;
            }
        }
        for i in 0..n {
            if !active[i] && self.entries[i].inputs.iter().any(|&j| active[j]) {
                active[i] = true;
            }
        }

        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        if active[loss.0] {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let entry = &self.entries[i];
            let need: Vec<bool> = entry.inputs.iter().map(|&j| active[j]).collect();
            let contribs = self.local_backward(entry, &g, &need);
            for (&j, c) in entry.inputs.iter().zip(contribs) {
                if let Some(c) = c {
                    match &mut grads[j] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(c) {
                                *a = *a + b;
                            }
                        }
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            // keep gradients of requested nodes
            if wrt.iter().any(|w| w.0 == i) {
                grads[i] = Some(g);
            }
        }

        wrt.iter()
            .map(|v| {
                let shape = self.shape(*v).to_vec();
                let data = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![S::zero(); shape.iter().product()]);
                let t = Tensor::new(shape, data)?;
                t.check_finite("backward")?;
                Ok(t)
            })
            .collect()
    }

    /// Vector-Jacobian products of one node for each input flagged in `need`.
    fn local_backward(&self, entry: &Entry<S>, g: &[S], need: &[bool]) -> Vec<Option<Vec<S>>> {
        let inp = |k: usize| -> &Tensor<S> { &self.entries[entry.inputs[k]].value };
        match &entry.node {
            Node::Leaf => vec![],
            Node::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = need[0].then(|| {
                    let mut da = vec![S::zero(); m * k];
                    // dA = dC * B^T
                    S::gemm(m, n, k, S::one(), g, n as isize, 1, b.data(), 1, n as isize, S::zero(), &mut da, k as isize, 1);
                    da
                });
                let db = need[1].then(|| {
                    let mut db = vec![S::zero(); k * n];
                    // dB = A^T * dC
                    S::gemm(k, m, n, S::one(), a.data(), 1, k as isize, g, n as isize, 1, S::zero(), &mut db, n as isize, 1);
                    db
                });
                vec![da, db]
            }
            Node::Conv2d { padding, cols } => {
                let (x, w) = (inp(0), inp(1));
                let geom = ConvGeometry::with_padding(x.shape(), w.shape(), *padding);
                let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
                let dx = need[0].then(|| {
                    let mut dcols = vec![S::zero(); rows * patch];
                    S::gemm(rows, cout, patch, S::one(), g, cout as isize, 1, w.data(), 1, cout as isize, S::zero(), &mut dcols, patch as isize, 1);
                    geom.col2im(&dcols)
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![S::zero(); patch * cout];
                    S::gemm(patch, rows, cout, S::one(), cols, 1, patch as isize, g, cout as isize, 1, S::zero(), &mut dw, cout as isize, 1);
                    dw
                });
                vec![dx, dw]
            }
            Node::AddBias => {
                let c = inp(1).len();
                let db = need[1].then(|| {
                    let mut db = vec![S::zero(); c];
                    for chunk in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    db
                });
                vec![need[0].then(|| g.to_vec()), db]
            }
            Node::Relu => {
                let x = inp(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect(),
                )]
            }
            Node::MaxPool2x2 { argmax } => {
                let mut dx = vec![S::zero(); inp(0).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                vec![Some(dx)]
            }
            Node::Flatten => vec![Some(g.to_vec())],
            Node::ScaleAdd { alpha, beta } => vec![
                need[0].then(|| g.iter().map(|&v| *alpha * v).collect()),
                need[1].then(|| g.iter().map(|&v| *beta * v).collect()),
            ],
            Node::Scale { alpha } => vec![Some(g.iter().map(|&v| *alpha * v).collect())],
            Node::Sum => vec![Some(vec![g[0]; inp(0).len()])],
            Node::SoftmaxXent {
                probs,
                targets,
                target_mass,
                reduction,
            } => {
                let k = inp(0).shape()[1];
                let m = target_mass.len();
                let scale = match reduction {
                    Reduction::Mean => g[0] / S::from_f64(m as f64),
                    Reduction::Sum => g[0],
                };
                let mut dz = Vec::with_capacity(m * k);
                for (i, &mass) in target_mass.iter().enumerate() {
                    for j in 0..k {
                        let idx = i * k + j;
                        dz.push(scale * (probs[idx] * mass - targets[idx]));
                    }
                }
                vec![Some(dz)]
            }
            Node::PairL2 => {
                let (a, b) = (inp(0), inp(1));
                let c = g[0] * S::from_f64(2.0 / a.rows() as f64);
                let da: Vec<S> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| c * (x - y))
                    .collect();
                let db = need[1].then(|| da.iter().map(|&v| -v).collect());
                vec![need[0].then_some(da), db]
            }
            Node::LogitNorm => {
                let z = inp(0);
                let c = g[0] * S::from_f64(2.0 / z.rows() as f64);
                vec![Some(z.data().iter().map(|&v| c * v).collect())]
            }
        }
    }
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], padding: Padding) -> Result<Self> {
        if sx[3] != sw[2] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel in-channels {} ({sx:?} * {sw:?})", sx[3], sw[2]),
            ));
        }
        let (ph, pw) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((sw[0] - 1) / 2, (sw[1] - 1) / 2),
        };
        if sx[1] + 2 * ph < sw[0] || sx[2] + 2 * pw < sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        }
        Ok(Self::with_padding(sx, sw, (ph, pw)))
    }

    fn with_padding(sx: &[usize], sw: &[usize], (ph, pw): (usize, usize)) -> Self {
        Self {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            kh: sw[0],
            kw: sw[1],
            cout: sw[3],
            ph,
            pw,
            oh: sx[1] + 2 * ph - sw[0] + 1,
            ow: sx[2] + 2 * pw - sw[1] + 1,
        }
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Source pixel offset for output (y, x) and kernel tap (ky, kx), if inside the image.
    #[inline]
    fn source(&self, b: usize, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (y + ky).checked_sub(self.ph).filter(|&v| v < self.h)?;
        let ix = (x + kx).checked_sub(self.pw).filter(|&v| v < self.w)?;
        Some(((b * self.h + iy) * self.w + ix) * self.cin)
    }

    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let c = self.cin;
        let mut cols = vec![S::zero(); self.rows() * self.patch()];
        let mut r = 0;
        for b in 0..self.n {
            for y in 0..self.oh {
                for xx in 0..self.ow {
                    let row = &mut cols[r * self.patch()..(r + 1) * self.patch()];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some(src) = self.source(b, y, xx, ky, kx) {
                                let dst = (ky * self.kw + kx) * c;
                                row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
        cols
    }

    fn col2im<S: Scalar>(&self, dcols: &[S]) -> Vec<S> {
        let c = self.cin;
        let mut dx = vec![S::zero(); self.n * self.h * self.w * c];
        let mut r = 0;
        for b in 0..self.n {
            for y in 0..self.oh {
                for xx in 0..self.ow {
                    let row = &dcols[r * self.patch()..(r + 1) * self.patch()];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            if let Some(dst) = self.source(b, y, xx, ky, kx) {
                                let src = (ky * self.kw + kx) * c;
                                for ch in 0..c {
                                    dx[dst + ch] = dx[dst + ch] + row[src + ch];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
        dx
    }
}
