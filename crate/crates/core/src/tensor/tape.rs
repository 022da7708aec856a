//! Gradient tape: every operation appends a node holding its output and the
//! data its backward pass needs; [`Tape::backward`] walks the nodes in reverse.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layer behaviour switch (BatchNorm statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics produced by a train-mode BatchNorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// How the Dice loss aggregates over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceReduction {
    /// One soft overlap ratio over every pixel of the batch.
    Pooled,
    /// Mean of per-item losses (makes the loss additive across samples).
    PerSampleMean,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: Mode,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2x {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Dice {
        pred: Var,
        target: Vec<T>,
        smooth: T,
        reduction: DiceReduction,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Reused patch-matrix buffer for convolutions.
    scratch: Vec<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(what: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{what}: shapes {a} and {b} differ"
        )));
    }
    Ok(())
}

/// Logistic function kept strictly inside (0,1) once it saturates.
fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(top)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are tracked iff `requires_grad()` is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.c != ws.c {
            return Err(Error::Dimension(format!(
                "conv2d: input has {} channels, weight expects {}",
                xs.c, ws.c
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be positive".into()));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(Error::Dimension(format!(
                    "conv2d: bias of shape {bs} for {} output channels",
                    ws.n
                )));
            }
        }
        let (ph, pw) = (xs.h + 2 * padding, xs.w + 2 * padding);
        if ph < ws.h || pw < ws.w {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {}x{} larger than padded input {ph}x{pw}",
                ws.h, ws.w
            )));
        }
        let geom = ConvGeom {
            cin: xs.c,
            h: xs.h,
            w: xs.w,
            cout: ws.n,
            kh: ws.h,
            kw: ws.w,
            stride,
            pad: padding,
            oh: (ph - ws.h) / stride + 1,
            ow: (pw - ws.w) / stride + 1,
        };
        let out = kernels::conv_forward(
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            bias.map(|b| self.nodes[b.0].value.data()),
            &geom,
            xs.n,
            &mut self.scratch,
        );
        let out = Tensor::from_vec(Shape::new(xs.n, geom.cout, geom.oh, geom.ow), out)?;
        out.check_finite("conv2d")?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Batch normalisation over batch and spatial axes.
    ///
    /// In train mode the batch statistics normalise the input and the updated
    /// running statistics are returned; eval mode uses `running_*` unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let s = self.shape(input);
        let c = s.c;
        for (name, len) in [
            ("gamma", self.shape(gamma).numel()),
            ("beta", self.shape(beta).numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::Dimension(format!(
                    "batchnorm2d: {name} has {len} entries for {c} channels"
                )));
            }
        }
        let plane = s.plane();
        let count = s.n * plane;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();

        let (mean, var, updated) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateVariance(format!(
                        "batchnorm2d in train mode needs more than one value per channel, got shape {s}"
                    )));
                }
                let (mean, var) = kernels::channel_moments(x, s.n, c, plane);
                let unbias = count as f64 / (count as f64 - 1.0);
                let stats = BatchNormStats {
                    mean: (0..c)
                        .map(|i| {
                            T::of((1.0 - momentum) * running_mean[i].as_f64() + momentum * mean[i])
                        })
                        .collect(),
                    var: (0..c)
                        .map(|i| {
                            T::of(
                                (1.0 - momentum) * running_var[i].as_f64()
                                    + momentum * var[i] * unbias,
                            )
                        })
                        .collect(),
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (
                running_mean.iter().map(|v| v.as_f64()).collect(),
                running_var.iter().map(|v| v.as_f64()).collect(),
                None,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::of).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for n in 0..s.n {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let out = Tensor::from_vec(s, out)?;
        out.check_finite("batchnorm2d")?;
        let rg = self.needs(&[input, gamma, beta]);
        let v = self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        );
        Ok((v, updated))
    }

    /// Max pooling with a `k x k` window and stride `s`. Ties go to the first
    /// position in row-major window order.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input);
        if k == 0 || stride == 0 {
            return Err(Error::Dimension(
                "max_pool2d: window and stride must be positive".into(),
            ));
        }
        if s.h < k
            || s.w < k
            || !(s.h - k).is_multiple_of(stride)
            || !(s.w - k).is_multiple_of(stride)
        {
            return Err(Error::Dimension(format!(
                "max_pool2d: spatial size {}x{} does not tile with window {k} stride {stride}",
                s.h, s.w
            )));
        }
        let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (oy * stride) * s.w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * s.w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, rg, Op::MaxPool { input, argmax }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let (oh, ow) = (2 * s.h, 2 * s.w);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); s.n * s.c * oh * ow];
        for nc in 0..s.n * s.c {
            let src = &x[nc * s.plane()..(nc + 1) * s.plane()];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..oh {
                let srow = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
                let drow = &mut dst[y * ow..(y + 1) * ow];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, rg, Op::Upsample2x { input }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&x| sigmoid(x)).collect())?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, rg, Op::Sigmoid { input }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let out = Tensor::from_vec(
            v.shape(),
            v.data().iter().map(|&x| x.max(T::zero())).collect(),
        )?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, rg, Op::Relu { input }))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::Dimension(format!(
                "concat_channels: shapes {sa} and {sb} differ outside the channel axis"
            )));
        }
        let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa.n * (la + lb));
        for n in 0..sa.n {
            out.extend_from_slice(&xa[n * la..(n + 1) * la]);
            out.extend_from_slice(&xb[n * lb..(n + 1) * lb]);
        }
        let out = Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Concat { a, b }))
    }

    /// Elementwise product. `b` may also be a per-channel `(1, c, 1, 1)` vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb == Shape::channels(sa.c) {
            true
        } else {
            return Err(Error::Dimension(format!(
                "mul: cannot combine {sa} with {sb}"
            )));
        };
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = if broadcast {
            xa.iter()
                .enumerate()
                .map(|(i, &v)| v * xb[(i / sa.plane()) % sa.c])
                .collect()
        } else {
            xa.iter().zip(xb).map(|(&x, &y)| x * y).collect()
        };
        let out = Tensor::from_vec(sa, out)?;
        out.check_finite("mul")?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b, broadcast }))
    }

    /// Soft Dice loss `1 - (2 sum(p g) + s) / (sum p + sum g + s)`.
    pub fn dice_loss(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        smooth: f64,
        reduction: DiceReduction,
    ) -> Result<Var> {
        let ps = self.shape(pred);
        same_shape("dice_loss", ps, target.shape())?;
        let p = self.value(pred).data();
        if let Some(bad) = p.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Contract(format!(
                "dice_loss: prediction {bad} outside [0, 1]"
            )));
        }
        if let Some(bad) = target
            .data()
            .iter()
            .find(|v| **v != T::zero() && **v != T::one())
        {
            return Err(Error::Contract(format!(
                "dice_loss: target value {bad} is not binary"
            )));
        }
        let s = T::of(smooth);
        let groups = match reduction {
            DiceReduction::Pooled => 1,
            DiceReduction::PerSampleMean => ps.n,
        };
        let len = p.len() / groups;
        let mut total = T::zero();
        for gi in 0..groups {
            let (pg, tg) = (
                &p[gi * len..(gi + 1) * len],
                &target.data()[gi * len..(gi + 1) * len],
            );
            let inter: T = pg.iter().zip(tg).map(|(&a, &b)| a * b).sum();
            let denom = pg.iter().copied().sum::<T>() + tg.iter().copied().sum::<T>() + s;
            total += T::one() - (T::of(2.0) * inter + s) / denom;
        }
        let loss = total / T::of(groups as f64);
        let out = Tensor::scalar(loss);
        out.check_finite("dice_loss")?;
        let rg = self.needs(&[pred]);
        Ok(self.push(
            out,
            rg,
            Op::Dice {
                pred,
                target: target.data().to_vec(),
                smooth: s,
                reduction,
            },
        ))
    }

    /// `sum(x * w)` for a constant weight vector; a convenient scalar probe.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                x.len()
            )));
        }
        let total: T = x.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Hash of every piecewise-linear branch decision (ReLU signs, max-pool
    /// winners). Two forward passes with equal signatures lie on the same
    /// smooth piece of the network.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.nodes[input.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar node. Gradients of earlier passes are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backward_node(&node.op, &node.value, g, before, &mut self.scratch)?;
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(
                        "non-finite gradient in backward pass".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn backward_node<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    nodes: &mut [Node<T>],
    scratch: &mut Vec<T>,
) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let batch = nodes[input.0].value.shape().n;
            let want_dx = nodes[input.0].requires_grad;
            let want_dw = nodes[weight.0].requires_grad;
            let mut dx = want_dx.then(|| vec![T::zero(); nodes[input.0].value.numel()]);
            let mut dw = want_dw.then(|| vec![T::zero(); nodes[weight.0].value.numel()]);
            let mut db = bias
                .filter(|b| nodes[b.0].requires_grad)
                .map(|_| vec![T::zero(); geom.cout]);
            kernels::conv_backward(
                nodes[input.0].value.data(),
                nodes[weight.0].value.data(),
                g,
                geom,
                batch,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
                scratch,
            );
            add_into(nodes, *input, dx);
            add_into(nodes, *weight, dw);
            if let Some(b) = bias {
                add_into(nodes, *b, db);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let s = out.shape();
            let (c, plane) = (s.c, s.plane());
            let count = T::of((s.n * plane) as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for n in 0..s.n {
                for ch in 0..c {
                    let off = (n * c + ch) * plane;
                    for i in off..off + plane {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            if nodes[input.0].requires_grad {
                let gam = nodes[gamma.0].value.data().to_vec();
                let mut dx = vec![T::zero(); g.len()];
                for n in 0..s.n {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        let k = gam[ch] * inv_std[ch];
                        match mode {
                            Mode::Train => {
                                let k = k / count;
                                for i in off..off + plane {
                                    dx[i] = k * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                            Mode::Eval => {
                                for i in off..off + plane {
                                    dx[i] = k * g[i];
                                }
                            }
                        }
                    }
                }
                add_into(nodes, *input, Some(dx));
            }
            add_into(nodes, *gamma, Some(dgamma));
            add_into(nodes, *beta, Some(dbeta));
        }
        Op::MaxPool { input, argmax } => {
            if nodes[input.0].requires_grad {
                let mut dx = vec![T::zero(); nodes[input.0].value.numel()];
                for (gi, &idx) in g.iter().zip(argmax) {
                    dx[idx as usize] += *gi;
                }
                add_into(nodes, *input, Some(dx));
            }
        }
        Op::Upsample2x { input } => {
            let s = nodes[input.0].value.shape();
            let ow = 2 * s.w;
            let mut dx = vec![T::zero(); s.numel()];
            for nc in 0..s.n * s.c {
                let src = &g[nc * 4 * s.plane()..(nc + 1) * 4 * s.plane()];
                let dst = &mut dx[nc * s.plane()..(nc + 1) * s.plane()];
                for y in 0..2 * s.h {
                    for x in 0..ow {
                        dst[(y / 2) * s.w + x / 2] += src[y * ow + x];
                    }
                }
            }
            add_into(nodes, *input, Some(dx));
        }
        Op::Sigmoid { input } => {
            let dx = out
                .data()
                .iter()
                .zip(g)
                .map(|(&y, &gi)| gi * y * (T::one() - y))
                .collect();
            add_into(nodes, *input, Some(dx));
        }
        Op::Relu { input } => {
            let dx = nodes[input.0]
                .value
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                .collect();
            add_into(nodes, *input, Some(dx));
        }
        Op::Concat { a, b } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
            let mut da = Vec::with_capacity(sa.numel());
            let mut db = Vec::with_capacity(sb.numel());
            for n in 0..sa.n {
                let base = n * (la + lb);
                da.extend_from_slice(&g[base..base + la]);
                db.extend_from_slice(&g[base + la..base + la + lb]);
            }
            add_into(nodes, *a, Some(da));
            add_into(nodes, *b, Some(db));
        }
        Op::Mul { a, b, broadcast } => {
            let sa = nodes[a.0].value.shape();
            let xa = nodes[a.0].value.data().to_vec();
            let xb = nodes[b.0].value.data().to_vec();
            if *broadcast {
                let chan = |i: usize| (i / sa.plane()) % sa.c;
                if nodes[a.0].requires_grad {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * xb[chan(i)])
                        .collect();
                    add_into(nodes, *a, Some(da));
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); sa.c];
                    for (i, &gi) in g.iter().enumerate() {
                        db[chan(i)] += gi * xa[i];
                    }
                    add_into(nodes, *b, Some(db));
                }
            } else {
                if nodes[a.0].requires_grad {
                    add_into(
                        nodes,
                        *a,
                        Some(g.iter().zip(&xb).map(|(&gi, &y)| gi * y).collect()),
                    );
                }
                if nodes[b.0].requires_grad {
                    add_into(
                        nodes,
                        *b,
                        Some(g.iter().zip(&xa).map(|(&gi, &x)| gi * x).collect()),
                    );
                }
            }
        }
        Op::Dice {
            pred,
            target,
            smooth,
            reduction,
        } => {
            let p = nodes[pred.0].value.data();
            let groups = match reduction {
                DiceReduction::Pooled => 1,
                DiceReduction::PerSampleMean => nodes[pred.0].value.shape().n,
            };
            let len = p.len() / groups;
            let scale = g[0] / T::of(groups as f64);
            let two = T::of(2.0);
            let mut dp = vec![T::zero(); p.len()];
            for gi in 0..groups {
                let r = gi * len..(gi + 1) * len;
                let (pg, tg) = (&p[r.clone()], &target[r.clone()]);
                let inter: T = pg.iter().zip(tg).map(|(&a, &b)| a * b).sum();
                let denom = pg.iter().copied().sum::<T>() + tg.iter().copied().sum::<T>() + *smooth;
                let num = two * inter + *smooth;
                let d2 = denom * denom;
                for (d, &t) in dp[r].iter_mut().zip(tg) {
                    *d = -scale * (two * t * denom - num) / d2;
                }
            }
            add_into(nodes, *pred, Some(dp));
        }
        Op::WeightedSum { input, weights } => {
            let dx = weights.iter().map(|&w| w * g[0]).collect();
            add_into(nodes, *input, Some(dx));
        }
    }
    Ok(())
}

fn add_into<T: Scalar>(nodes: &mut [Node<T>], v: Var, delta: Option<Vec<T>>) {
    let Some(delta) = delta else { return };
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        None => node.grad = Some(delta),
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
    }
}
