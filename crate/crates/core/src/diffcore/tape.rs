//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. Because inputs always precede outputs, replaying the nodes in
//! reverse order is a valid topological order for the chain rule.

use super::Tensor;
use crate::scalar::check_finite;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of a floored negative log-likelihood: `-log(a + b * p[row, label])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllTerm {
    pub row: usize,
    pub label: usize,
    pub floor: f64,
    pub scale: f64,
}

/// Probability floor applied inside logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    SumSquares(usize),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        x: usize,
        bias: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        height: usize,
        width: usize,
        cin: usize,
        cout: usize,
        ksize: usize,
    },
    LogSoftmax {
        x: usize,
        classes: usize,
    },
    Softmax {
        x: usize,
        classes: usize,
    },
    FlooredNll {
        logp: usize,
        classes: usize,
        terms: Vec<NllTerm>,
    },
    CorrectedNll {
        logp: usize,
        classes: usize,
        transition: Vec<f64>,
        picks: Vec<(usize, usize)>,
    },
    BilinearPotts {
        q: usize,
        classes: usize,
        pairs: Vec<(usize, usize, f64)>,
    },
}

/// Recorded computation. One tape per forward pass; `backward` may be run
/// once unless [`Tape::reset_grads`] is called in between.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Result<Var> {
        check_finite("tape value", value.data())?;
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.0 < self.values.len() {
            Ok(v.0)
        } else {
            Err(Error::Autodiff(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        let req = tensor.requires_grad();
        self.push(tensor, Op::Leaf, req)
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].data()[0]
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn same_shape(&self, a: usize, b: usize) -> Result<()> {
        if self.values[a].shape() == self.values[b].shape() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )))
        }
    }

    fn unary_map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let xi = self.check(x)?;
        let t = &self.values[xi];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        let req = self.requires[xi];
        self.push(out, op(xi), req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(ai, bi)?;
        let data = zip_map(self.values[ai].data(), self.values[bi].data(), |x, y| x + y);
        let out = Tensor::new(self.values[ai].shape().to_vec(), data)?;
        let req = self.requires[ai] || self.requires[bi];
        self.push(out, Op::Add(ai, bi), req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(ai, bi)?;
        let data = zip_map(self.values[ai].data(), self.values[bi].data(), |x, y| x - y);
        let out = Tensor::new(self.values[ai].shape().to_vec(), data)?;
        let req = self.requires[ai] || self.requires[bi];
        self.push(out, Op::Sub(ai, bi), req)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(ai, bi)?;
        let data = zip_map(self.values[ai].data(), self.values[bi].data(), |x, y| x * y);
        let out = Tensor::new(self.values[ai].shape().to_vec(), data)?;
        let req = self.requires[ai] || self.requires[bi];
        self.push(out, Op::Mul(ai, bi), req)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_map(x, |v| c * v, |xi| Op::Scale(xi, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, f64::exp, Op::Exp)
    }

    /// Natural log with the argument floored at [`PROB_FLOOR`]; the gradient
    /// is zero where the floor is active.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, |v| v.max(PROB_FLOOR).ln(), Op::Log)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.values[xi].clone().with_requires_grad(false).reshape(shape)?;
        let req = self.requires[xi];
        self.push(out, Op::Reshape(xi), req)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.values[xi].data().iter().sum();
        let req = self.requires[xi];
        self.push(Tensor::scalar(s)?, Op::Sum(xi), req)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.values[xi].data().iter().map(|v| v * v).sum();
        let req = self.requires[xi];
        self.push(Tensor::scalar(s)?, Op::SumSquares(xi), req)
    }

    /// Selects flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xi = self.check(x)?;
        let src = self.values[xi].data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of {}", src.len())));
        }
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(vec![data.len()], data)?;
        let req = self.requires[xi];
        self.push(out, Op::Gather(xi, indices), req)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.values[ai].shape(), self.values[bi].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.values[ai].data(), self.values[bi].data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let req = self.requires[ai] || self.requires[bi];
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: ai, b: bi, m, k, n }, req)
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(bias)?);
        let n = self.values[bi].len();
        let xs = self.values[xi].shape();
        if xs.last() != Some(&n) {
            return Err(Error::Shape(format!("bias of {n} for {xs:?}")));
        }
        let b = self.values[bi].data();
        let data: Vec<f64> = self.values[xi]
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let out = Tensor::new(xs.to_vec(), data)?;
        let req = self.requires[xi] || self.requires[bi];
        self.push(out, Op::AddRowBias { x: xi, bias: bi }, req)
    }

    /// Same-padded 2-D convolution on an `[H, W, Cin]` image with an odd
    /// `[k, k, Cin, Cout]` kernel and `[Cout]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ii, wi, bi) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let is = self.values[ii].shape();
        let ws = self.values[wi].shape();
        if is.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[0] % 2 == 0 || ws[2] != is[2] {
            return Err(Error::Shape(format!("conv2d input {is:?} kernel {ws:?}")));
        }
        let (height, width, cin) = (is[0], is[1], is[2]);
        let (ksize, cout) = (ws[0], ws[3]);
        if self.values[bi].len() != cout {
            return Err(Error::Shape(format!("conv2d bias of {} for {cout} channels", self.values[bi].len())));
        }
        let out = conv_forward(
            self.values[ii].data(),
            self.values[wi].data(),
            self.values[bi].data(),
            height,
            width,
            cin,
            cout,
            ksize,
        );
        let req = self.requires[ii] || self.requires[wi] || self.requires[bi];
        self.push(
            Tensor::new(vec![height, width, cout], out)?,
            Op::Conv2d {
                input: ii,
                weight: wi,
                bias: bi,
                height,
                width,
                cin,
                cout,
                ksize,
            },
            req,
        )
    }

    fn last_dim(&self, xi: usize) -> Result<usize> {
        match self.values[xi].shape().last() {
            Some(&k) if k > 0 => Ok(k),
            _ => Err(Error::Shape("row-wise op on empty trailing axis".into())),
        }
    }

    /// Log-softmax over the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let classes = self.last_dim(xi)?;
        let mut out = self.values[xi].data().to_vec();
        for row in out.chunks_mut(classes) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(self.values[xi].shape().to_vec(), out)?;
        let req = self.requires[xi];
        self.push(out, Op::LogSoftmax { x: xi, classes }, req)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let classes = self.last_dim(xi)?;
        let mut out = self.values[xi].data().to_vec();
        softmax_rows(&mut out, classes);
        let out = Tensor::new(self.values[xi].shape().to_vec(), out)?;
        let req = self.requires[xi];
        self.push(out, Op::Softmax { x: xi, classes }, req)
    }

    /// `sum_t -log(floor_t + scale_t * exp(logp[row_t, label_t]))` over rows of
    /// log-probabilities. With `floor = 0` this is exactly the negative
    /// log-likelihood, evaluated without any clamping.
    pub fn floored_nll(&mut self, logp: Var, terms: Vec<NllTerm>) -> Result<Var> {
        let li = self.check(logp)?;
        let classes = self.last_dim(li)?;
        let rows = self.values[li].len() / classes;
        let lp = self.values[li].data();
        let mut total = 0.0;
        for t in &terms {
            if t.row >= rows || t.label >= classes {
                return Err(Error::Shape(format!("nll term ({}, {}) out of range", t.row, t.label)));
            }
            if !(t.floor >= 0.0 && t.scale > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "nll term needs floor >= 0 and scale > 0, got ({}, {})",
                    t.floor, t.scale
                )));
            }
            total += floored_nll_value(lp[t.row * classes + t.label], t.floor, t.scale);
        }
        let req = self.requires[li];
        self.push(Tensor::scalar(total)?, Op::FlooredNll { logp: li, classes, terms }, req)
    }

    /// `sum -log((T^T p_row)[label])` with `T` a row-major `K x K` matrix.
    pub fn corrected_nll(
        &mut self,
        logp: Var,
        transition: Vec<f64>,
        picks: Vec<(usize, usize)>,
    ) -> Result<Var> {
        let li = self.check(logp)?;
        let classes = self.last_dim(li)?;
        if transition.len() != classes * classes {
            return Err(Error::Shape(format!(
                "transition matrix of {} entries for {classes} classes",
                transition.len()
            )));
        }
        let rows = self.values[li].len() / classes;
        let lp = self.values[li].data();
        let mut total = 0.0;
        for &(row, label) in &picks {
            if row >= rows || label >= classes {
                return Err(Error::Shape(format!("pick ({row}, {label}) out of range")));
            }
            let corrected: f64 = (0..classes)
                .map(|l| lp[row * classes + l].exp() * transition[l * classes + label])
                .sum();
            if corrected <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "zero corrected probability for label {label} at row {row}"
                )));
            }
            total -= corrected.max(PROB_FLOOR).ln();
        }
        let req = self.requires[li];
        self.push(
            Tensor::scalar(total)?,
            Op::CorrectedNll {
                logp: li,
                classes,
                transition,
                picks,
            },
            req,
        )
    }

    /// `sum_{(i,j,w)} w * (1 - <q_i, q_j>)` over rows of a probability matrix.
    /// On one-hot rows this is the Potts penalty of the listed pairs.
    pub fn bilinear_potts(&mut self, q: Var, pairs: Vec<(usize, usize, f64)>) -> Result<Var> {
        let qi = self.check(q)?;
        let classes = self.last_dim(qi)?;
        let rows = self.values[qi].len() / classes;
        let qd = self.values[qi].data();
        let mut total = 0.0;
        for &(i, j, w) in &pairs {
            if i >= rows || j >= rows {
                return Err(Error::Shape(format!("pair ({i}, {j}) out of {rows} rows")));
            }
            let dot: f64 = (0..classes).map(|k| qd[i * classes + k] * qd[j * classes + k]).sum();
            total += w * (1.0 - dot);
        }
        let req = self.requires[qi];
        self.push(Tensor::scalar(total)?, Op::BilinearPotts { q: qi, classes, pairs }, req)
    }

    /// Populates gradients of every `requires_grad` node reachable from the
    /// scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ri = self.check(root)?;
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.values[ri].len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[ri].shape()
            )));
        }
        if !self.requires[ri] {
            return Err(Error::Autodiff("root is detached from every parameter".into()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[ri] = Some(vec![1.0]);
        for id in (0..=ri).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if self.requires[id] {
                self.propagate(id, &g);
            }
            self.grads[id] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn acc(&mut self, id: usize) -> Option<&mut Vec<f64>> {
        if !self.requires[id] {
            return None;
        }
        let n = self.values[id].len();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Ops are immutable during backward; take one out to appease the
        // borrow checker and put it back afterwards.
        let op = std::mem::replace(&mut self.ops[id], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in &[*a, *b] {
                    if let Some(ga) = self.acc(i) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires[a] {
                    let contrib = zip_map(g, self.values[b].data(), |x, y| x * y);
                    add_into(self.acc(a).unwrap(), &contrib);
                }
                if self.requires[b] {
                    let contrib = zip_map(g, self.values[a].data(), |x, y| x * y);
                    add_into(self.acc(b).unwrap(), &contrib);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SumSquares(x) => {
                let x = *x;
                if self.requires[x] {
                    let contrib: Vec<f64> = self.values[x].data().iter().map(|v| 2.0 * v * g[0]).collect();
                    add_into(self.acc(x).unwrap(), &contrib);
                }
            }
            Op::Gather(x, idx) => {
                if let Some(gx) = self.acc(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    add_into(gx, g);
                }
            }
            Op::Exp(x) => {
                let x = *x;
                if self.requires[x] {
                    let contrib = zip_map(g, self.values[id].data(), |a, b| a * b);
                    add_into(self.acc(x).unwrap(), &contrib);
                }
            }
            Op::Log(x) => {
                let x = *x;
                if self.requires[x] {
                    let contrib = zip_map(g, self.values[x].data(), |a, v| {
                        if v > PROB_FLOOR {
                            a / v
                        } else {
                            0.0
                        }
                    });
                    add_into(self.acc(x).unwrap(), &contrib);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if self.requires[x] {
                    let contrib = zip_map(g, self.values[x].data(), |a, v| if v > 0.0 { a } else { 0.0 });
                    add_into(self.acc(x).unwrap(), &contrib);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.requires[a] {
                    // dA = G B^T
                    let bd = self.values[b].data();
                    let mut contrib = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            contrib[i * k + p] = (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    add_into(self.acc(a).unwrap(), &contrib);
                }
                if self.requires[b] {
                    // dB = A^T G
                    let ad = self.values[a].data();
                    let mut contrib = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                contrib[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    add_into(self.acc(b).unwrap(), &contrib);
                }
            }
            Op::AddRowBias { x, bias } => {
                if let Some(gx) = self.acc(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(*bias) {
                    let n = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                height,
                width,
                cin,
                cout,
                ksize,
            } => {
                let dims = ConvDims {
                    height: *height,
                    width: *width,
                    cin: *cin,
                    cout: *cout,
                    ksize: *ksize,
                };
                let (input, weight, bias) = (*input, *weight, *bias);
                let mut gin = self.requires[input].then(|| vec![0.0; self.values[input].len()]);
                let mut gw = self.requires[weight].then(|| vec![0.0; self.values[weight].len()]);
                conv_backward(
                    self.values[input].data(),
                    self.values[weight].data(),
                    g,
                    dims,
                    gin.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(c) = gin {
                    add_into(self.acc(input).unwrap(), &c);
                }
                if let Some(c) = gw {
                    add_into(self.acc(weight).unwrap(), &c);
                }
                if let Some(gb) = self.acc(bias) {
                    for px in g.chunks(dims.cout) {
                        add_into(gb, px);
                    }
                }
            }
            Op::LogSoftmax { x, classes } => {
                let (x, classes) = (*x, *classes);
                if self.requires[x] {
                    let y = self.values[id].data();
                    let mut contrib = vec![0.0; y.len()];
                    for ((cr, yr), gr) in contrib.chunks_mut(classes).zip(y.chunks(classes)).zip(g.chunks(classes)) {
                        let gs: f64 = gr.iter().sum();
                        for k in 0..classes {
                            cr[k] = gr[k] - yr[k].exp() * gs;
                        }
                    }
                    add_into(self.acc(x).unwrap(), &contrib);
                }
            }
            Op::Softmax { x, classes } => {
                let (x, classes) = (*x, *classes);
                if self.requires[x] {
                    let y = self.values[id].data();
                    let mut contrib = vec![0.0; y.len()];
                    for ((cr, yr), gr) in contrib.chunks_mut(classes).zip(y.chunks(classes)).zip(g.chunks(classes)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..classes {
                            cr[k] = yr[k] * (gr[k] - dot);
                        }
                    }
                    add_into(self.acc(x).unwrap(), &contrib);
                }
            }
            Op::FlooredNll { logp, classes, terms } => {
                let (logp, classes) = (*logp, *classes);
                if self.requires[logp] {
                    let lp = self.values[logp].data();
                    let mut contrib = vec![0.0; lp.len()];
                    for t in terms {
                        let at = t.row * classes + t.label;
                        contrib[at] += g[0] * floored_nll_slope(lp[at], t.floor, t.scale);
                    }
                    add_into(self.acc(logp).unwrap(), &contrib);
                }
            }
            Op::CorrectedNll {
                logp,
                classes,
                transition,
                picks,
            } => {
                let (logp, classes) = (*logp, *classes);
                if self.requires[logp] {
                    let lp = self.values[logp].data();
                    let mut contrib = vec![0.0; lp.len()];
                    for &(row, label) in picks {
                        let parts: Vec<f64> = (0..classes)
                            .map(|l| lp[row * classes + l].exp() * transition[l * classes + label])
                            .collect();
                        let corrected: f64 = parts.iter().sum();
                        if corrected <= PROB_FLOOR {
                            continue;
                        }
                        for l in 0..classes {
                            contrib[row * classes + l] -= g[0] * parts[l] / corrected;
                        }
                    }
                    add_into(self.acc(logp).unwrap(), &contrib);
                }
            }
            Op::BilinearPotts { q, classes, pairs } => {
                let (q, classes) = (*q, *classes);
                if self.requires[q] {
                    let qd = self.values[q].data();
                    let mut contrib = vec![0.0; qd.len()];
                    for &(i, j, w) in pairs {
                        for k in 0..classes {
                            contrib[i * classes + k] -= g[0] * w * qd[j * classes + k];
                            contrib[j * classes + k] -= g[0] * w * qd[i * classes + k];
                        }
                    }
                    add_into(self.acc(q).unwrap(), &contrib);
                }
            }
        }
        self.ops[id] = op;
    }
}

/// `-log(floor + scale * exp(l))`, stable for very negative `l`.
pub fn floored_nll_value(l: f64, floor: f64, scale: f64) -> f64 {
    if floor == 0.0 {
        -(scale.ln() + l)
    } else {
        let (x, y) = (floor.ln(), scale.ln() + l);
        let m = x.max(y);
        -(m + ((x - m).exp() + (y - m).exp()).ln())
    }
}

/// Derivative of [`floored_nll_value`] with respect to `l`.
pub fn floored_nll_slope(l: f64, floor: f64, scale: f64) -> f64 {
    if floor == 0.0 {
        -1.0
    } else {
        -sigmoid(scale.ln() + l - floor.ln())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(data: &mut [f64], classes: usize) {
    for row in data.chunks_mut(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[derive(Clone, Copy)]
struct ConvDims {
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
    ksize: usize,
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    height: usize,
    width: usize,
    cin: usize,
    cout: usize,
    ksize: usize,
) -> Vec<f64> {
    let pad = ksize / 2;
    let mut out = vec![0.0; height * width * cout];
    for y in 0..height {
        for x in 0..width {
            let o = &mut out[(y * width + x) * cout..][..cout];
            o.copy_from_slice(bias);
            for ky in 0..ksize {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < height) else {
                    continue;
                };
                for kx in 0..ksize {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < width) else {
                        continue;
                    };
                    let inp = &input[(iy * width + ix) * cin..][..cin];
                    let wbase = (ky * ksize + kx) * cin * cout;
                    for (ci, &v) in inp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &weight[wbase + ci * cout..][..cout];
                        for (oc, wv) in o.iter_mut().zip(wrow) {
                            *oc += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    d: ConvDims,
    mut gin: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let pad = d.ksize / 2;
    for y in 0..d.height {
        for x in 0..d.width {
            let g = &gout[(y * d.width + x) * d.cout..][..d.cout];
            for ky in 0..d.ksize {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < d.height) else {
                    continue;
                };
                for kx in 0..d.ksize {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < d.width) else {
                        continue;
                    };
                    let ibase = (iy * d.width + ix) * d.cin;
                    let wbase = (ky * d.ksize + kx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let wrow = &weight[wbase + ci * d.cout..][..d.cout];
                        if let Some(gi) = gin.as_deref_mut() {
                            let s: f64 = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
                            gi[ibase + ci] += s;
                        }
                        if let Some(gwv) = gw.as_deref_mut() {
                            let v = input[ibase + ci];
                            if v != 0.0 {
                                let gwrow = &mut gwv[wbase + ci * d.cout..][..d.cout];
                                for (a, b) in gwrow.iter_mut().zip(g) {
                                    *a += v * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_of_params_has_unit_grads() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn squared_norm_grad_is_twice_x() {
        let mut tape = Tape::new();
        let data = vec![1.5, -2.0, 0.25];
        let x = tape.param(t(vec![3], data.clone())).unwrap();
        let s = tape.sum_squares(x).unwrap();
        tape.backward(s).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err(), "non-scalar root");
        let c = tape.constant(t(vec![2], vec![1.0, 2.0])).unwrap();
        let s = tape.sum(c).unwrap();
        assert!(tape.backward(s).is_err(), "detached root");
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err(), "second backward");
        tape.reset_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![1], vec![800.0])).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_special_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 4], vec![0.3; 8])).unwrap();
        let q = tape.softmax(x).unwrap();
        for v in tape.value(q).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        for xv in [-30.0, -2.0, 0.0, 0.7, 25.0] {
            let x = tape.constant(t(vec![1, 2], vec![xv, 0.0])).unwrap();
            let q = tape.softmax(x).unwrap();
            let expect = 1.0 / (1.0 + (-xv as f64).exp());
            assert!((tape.value(q).data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(vec![2, 3], vec![3.0, 1.0, 0.0, -4.0, 10.0, 2.5]))
            .unwrap();
        let q = tape.softmax(x).unwrap();
        let lq = tape.log_softmax(x).unwrap();
        for (a, b) in tape.value(q).data().iter().zip(tape.value(lq).data()) {
            assert!((a - b.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn floored_nll_is_stable() {
        assert!((floored_nll_value(-1000.0, 0.2, 0.6) + 0.2f64.ln()).abs() < 1e-12);
        assert_eq!(floored_nll_value(-3.0, 0.0, 1.0), 3.0);
        assert!(floored_nll_slope(-1000.0, 0.2, 0.6).abs() < 1e-300);
    }
}
