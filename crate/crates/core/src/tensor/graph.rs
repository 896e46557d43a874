use crate::error::{Error, Result};
use crate::tensor::conv::{self, ConvGeom, TconvGeom};
use crate::tensor::norm::{channel_stats, BatchNormState, BN_EPS};
use crate::tensor::{Mode, ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a weighted cross-entropy sum is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNormalization {
    /// Divide by the number of pixels with positive weight (at least 1).
    #[default]
    PositiveWeights,
    /// The raw weighted sum.
    Sum,
}

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Tconv {
        x: Var,
        w: Var,
        geom: TconvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A leaf holding the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [o, ci, k, k2] = self.value(w).dims4()?;
        if ci != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv kernel {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "kernel {k} larger than padded input {h}x{wd}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv bias shape {:?}, expected [{o}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: o,
            kernel: k,
            pad,
        };
        let mut out = Tensor::zeros(&[n, o, geom.out_height(), geom.out_width()]);
        conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            out.data_mut(),
        );
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn tconv2(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [ci, o, kh, kw] = self.value(w).dims4()?;
        if ci != c || kh != 2 || kw != 2 {
            return Err(Error::Shape(format!(
                "transposed-conv kernel {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let geom = TconvGeom {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: o,
        };
        let mut out = Tensor::zeros(&[n, o, 2 * h, 2 * wd]);
        conv::tconv2_forward(
            self.value(x).data(),
            self.value(w).data(),
            &geom,
            out.data_mut(),
        );
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Tconv { x, w, geom }, rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max pool needs even dims, got {h}x{w}"
            )));
        }
        let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
        let argmax = conv::maxpool2_forward(self.value(x).data(), n * c, h, w, out.data_mut());
        let rg = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Per-channel batch normalization. In train mode the batch statistics
    /// are used and the running statistics updated; in eval mode the running
    /// statistics are used as constants.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || state.channels() != c
        {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got gamma {:?}, beta {:?}, state {}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                state.channels()
            )));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = channel_stats(xd, n, c, plane);
                let m = (n * plane) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    state.running_mean[ch] =
                        (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean[ch];
                    state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch]
                        + state.momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )
        .expect("same length");
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| sigmoid(a)).collect(),
        )
        .expect("same length");
        let rg = self.needs(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for n in 0..na {
            out.extend_from_slice(&ad[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&bd[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
        )?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "multiply")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
        )?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a * factor).collect(),
        )
        .expect("same length");
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Confidence-weighted binary cross-entropy between probabilities `p` and
    /// binary `targets`: `Σ w·(−t·ln p − (1−t)·ln(1−p))`, scaled per `norm`.
    /// Probabilities are clamped to `[1e-7, 1 − 1e-7]`; clamped entries pass
    /// no gradient.
    pub fn weighted_bce(
        &mut self,
        p: Var,
        targets: &[f64],
        weights: &[f64],
        norm: LossNormalization,
    ) -> Result<Var> {
        let pd = self.value(p).data();
        if targets.len() != pd.len() || weights.len() != pd.len() {
            return Err(Error::Shape(format!(
                "loss over {} predictions got {} targets and {} weights",
                pd.len(),
                targets.len(),
                weights.len()
            )));
        }
        let denom = match norm {
            LossNormalization::PositiveWeights => {
                weights.iter().filter(|&&w| w > 0.0).count().max(1) as f64
            }
            LossNormalization::Sum => 1.0,
        };
        let mut total = 0.0;
        for i in 0..pd.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let q = pd[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = targets[i];
            total += weights[i] * (-t * q.ln() - (1.0 - t) * (1.0 - q).ln());
        }
        let rg = self.needs(p);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Fingerprint of the branch taken by every piecewise operation: the sign
    /// of each ReLU input, each max-pool window's winner and each clamped
    /// cross-entropy probability. Two passes with equal signatures evaluate
    /// the same smooth piece of the recorded function, which is what
    /// finite-difference checks need to know.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Bce { p, weights, .. } => {
                    i.hash(&mut h);
                    for (&q, &w) in self.value(*p).data().iter().zip(weights) {
                        (w != 0.0 && !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&q)).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from the scalar `loss`, adding `d loss / d param` into
    /// the gradients held by `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads, store);
        }
        Ok(())
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }

    fn propagate(
        &self,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => store.accumulate(*id, dy),
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                let mut db = b
                    .filter(|b| self.needs(*b))
                    .map(|b| vec![0.0; self.value(b).len()]);
                let dx = self.grad_slot(grads, *x);
                conv::conv2d_backward(xv, wv, geom, dy, dx, dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dw) = dw {
                    add_into(self.grad_slot(grads, *w), &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    add_into(self.grad_slot(grads, *b), &db);
                }
            }
            Op::Tconv { x, w, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = self.needs(*w).then(|| vec![0.0; wv.len()]);
                let dx = self.grad_slot(grads, *x);
                conv::tconv2_backward(xv, wv, geom, dy, dx, dw.as_deref_mut());
                if let Some(dw) = dw {
                    add_into(self.grad_slot(grads, *w), &dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    conv::maxpool2_backward(argmax, dy, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                let gv = self.value(*gamma).data().to_vec();
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    add_into(Some(dg), &sum_dy_xhat);
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    add_into(Some(db), &sum_dy);
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let m = (n * plane) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] += if *batch_stats {
                                    k * (dy[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += dy[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).dims4().expect("rank 4")[1];
                let plane = h * w;
                let (la, lb) = (ca * plane, cb * plane);
                if let Some(da) = self.grad_slot(grads, *a) {
                    for k in 0..n {
                        add_into(
                            Some(&mut da[k * la..(k + 1) * la]),
                            &dy[k * (la + lb)..][..la],
                        );
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for k in 0..n {
                        add_into(
                            Some(&mut db[k * lb..(k + 1) * lb]),
                            &dy[k * (la + lb) + la..][..lb],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.grad_slot(grads, *a), dy);
                add_into(self.grad_slot(grads, *b), dy);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.grad_slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for i in 0..db.len() {
                        db[i] += dy[i] * av[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += dy[i] * f;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += dy[0];
                    }
                }
            }
            Op::Bce {
                p,
                targets,
                weights,
                denom,
            } => {
                let pv = self.value(*p).data();
                if let Some(dp) = self.grad_slot(grads, *p) {
                    let s = dy[0] / denom;
                    for i in 0..dp.len() {
                        let q = pv[i];
                        if weights[i] == 0.0 || !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&q) {
                            continue;
                        }
                        let t = targets[i];
                        dp[i] += s * weights[i] * (-t / q + (1.0 - t) / (1.0 - q));
                    }
                }
            }
        }
    }
}

fn add_into(dst: Option<&mut [f64]>, src: &[f64]) {
    if let Some(dst) = dst {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
