//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward op as a node in insertion order, which is
//! already a topological order, so `backward` is a single reverse sweep.

use std::collections::HashSet;

use crate::error::{shape_err, NumError, Result};
use crate::kernels::{self, ChannelLayout, ConvGeom};
use crate::params::{ParamId, ParamStore, RunningStats};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Mish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct BnOptions {
    pub mode: BnMode,
    pub momentum: f64,
    pub eps: f64,
}

impl BnOptions {
    pub fn train() -> Self {
        Self {
            mode: BnMode::Train,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: BnMode::Eval,
            ..Self::train()
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        layout: ChannelLayout,
        train: bool,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Square {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    CenterColumns {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`]. Holds leaf gradients and any
/// intermediate marked with [`Graph::retain_grad`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    retained: HashSet<usize>,
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// Input whose gradient is tracked (e.g. for attribution).
    pub fn input_with_grad(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// Parameter leaf. With `trainable == false` it behaves as a constant and
    /// never receives a gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Result<Var> {
        self.leaf(store.get(id).value.clone(), trainable, trainable.then_some(id))
    }

    /// Keep the gradient of an intermediate after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.insert(v.0);
    }

    // ---- ops ---------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            co,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, co, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels: co,
            },
            &inputs,
            "conv2d",
        )
    }

    /// One filter per channel; `w` is `[C, 1, k, k]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (cw, one, kh, kw) = self.value(w).dims4()?;
        if cw != c || one != 1 || kh != kw || stride == 0 || h + 2 * padding < kh {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("input {:?}, weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(shape_err("depthwise_conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Depthwise { x, w, b, geom }, &inputs, "depthwise_conv2d")
    }

    /// Batch normalization over `[N, C, ...]`. Train mode normalizes with batch
    /// statistics and updates `running`; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        opts: BnOptions,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {shape:?}")));
        }
        let layout = ChannelLayout {
            batch: shape[0],
            channels: shape[1],
            spatial: shape[2..].iter().product(),
        };
        let c = layout.channels;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(shape_err("batch_norm", format!("affine params for {c} channels")));
        }
        let train = opts.mode == BnMode::Train;
        if train && layout.batch < 2 {
            return Err(NumError::BatchTooSmall(layout.batch));
        }
        let stats = (!train).then(|| (running.mean.as_slice(), running.var.as_slice()));
        let fwd = kernels::batch_norm_forward(
            self.value(x).data(),
            layout,
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            opts.eps,
        );
        if let Some((mean, var)) = fwd.batch_stats {
            let m = layout.per_channel_count() as f64;
            let unbias = m / (m - 1.0);
            for ch in 0..c {
                running.mean[ch] = (1.0 - opts.momentum) * running.mean[ch] + opts.momentum * mean[ch];
                running.var[ch] =
                    (1.0 - opts.momentum) * running.var[ch] + opts.momentum * var[ch] * unbias;
            }
        }
        let value = Tensor::new(&shape, fwd.y)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                layout,
                train,
            },
            &[x, gamma, beta],
            "batch_norm",
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |z| z.max(0.0),
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Tanh => f64::tanh,
            Activation::Mish => kernels::mish,
        };
        let value = self.value(x).map(f);
        self.push(value, Op::Act { x, kind }, &[x], "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn mish(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Mish)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if win != fin {
            return Err(shape_err(
                "linear",
                format!("input {:?}, weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let mut out = vec![0.0; n * fout];
        let mut beta = 0.0;
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err("linear", format!("bias {:?}", self.shape(b))));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
            beta = 1.0;
        }
        kernels::gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let value = Tensor::new(&[n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs, "linear")
    }

    /// `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        self.push(value, Op::GlobalAvgPool { x }, &[x], "global_avg_pool")
    }

    /// `[N, C, H, W]` → `[N, C, 1, 1]`.
    pub fn adaptive_avg_pool_1x1(&mut self, x: Var) -> Result<Var> {
        let (n, c, _, _) = self.value(x).dims4()?;
        let pooled = self.global_avg_pool(x)?;
        self.reshape(pooled, &[n, c, 1, 1])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x], "reshape")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub { a, b }, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul { a, b }, &[a, b], "mul")
    }

    /// `x: [N, C, H, W]` scaled per (sample, channel) by `s: [N, C]` or `[N, C, 1, 1]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).numel() != n * c || self.shape(s)[..2] != [n, c] {
            return Err(shape_err(
                "channel_scale",
                format!("{:?} by {:?}", self.shape(x), self.shape(s)),
            ));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .zip(sv)
            .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
            .collect();
        let value = Tensor::new(&[n, c, h, w], data)?;
        self.push(value, Op::ChannelScale { x, s }, &[x, s], "channel_scale")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x], "affine")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, 1.0, c)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square { x }, &[x], "square")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::sqrt);
        self.push(value, Op::Sqrt { x }, &[x], "sqrt")
    }

    /// `[N, A]`, `[N, B]` → `[N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.value(a).dims2()?;
        let (nb, cb) = self.value(b).dims2()?;
        if na != nb {
            return Err(shape_err("concat_cols", format!("{na} vs {nb} rows")));
        }
        let mut data = Vec::with_capacity(na * (ca + cb));
        for r in 0..na {
            data.extend_from_slice(&self.value(a).data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.value(b).data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(&[na, ca + cb], data)?;
        self.push(value, Op::ConcatCols { a, b }, &[a, b], "concat_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean { x }, &[x], "mean")
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if k != kb {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{kb},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let value = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        self.push(value, Op::Transpose { x }, &[x], "transpose")
    }

    /// Subtract each column's mean: `[R, C]` → `[R, C]`.
    pub fn center_columns(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let means = column_means(self.value(x).data(), r, c);
        let src = self.value(x).data();
        let value = Tensor::from_fn(&[r, c], |i| src[i] - means[i % c]);
        self.push(value, Op::CenterColumns { x }, &[x], "center_columns")
    }

    /// Column means: `[R, C]` → `[1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let means = column_means(self.value(x).data(), r, c);
        let value = Tensor::new(&[1, c], means)?;
        self.push(value, Op::MeanRows { x }, &[x], "mean_rows")
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = (if self.retained.contains(&i) {
                grads[i].clone()
            } else {
                grads[i].take()
            }) else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, g: Tensor| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
            } => {
                let xv = self.value(*x);
                let (dx, dw, db) = kernels::conv2d_backward(
                    xv.data(),
                    xv.shape()[0],
                    geom,
                    self.value(*w).data(),
                    *out_channels,
                    dy.data(),
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    send(*x, Tensor::new(xv.shape(), dx)?);
                }
                send(*w, Tensor::new(self.shape(*w), dw)?);
                if let Some(b) = b {
                    send(*b, Tensor::new(self.shape(*b), db)?);
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let xv = self.value(*x);
                let (dx, dw, db) = kernels::depthwise_backward(
                    xv.data(),
                    xv.shape()[0],
                    geom,
                    self.value(*w).data(),
                    dy.data(),
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    send(*x, Tensor::new(xv.shape(), dx)?);
                }
                send(*w, Tensor::new(self.shape(*w), dw)?);
                if let Some(b) = b {
                    send(*b, Tensor::new(self.shape(*b), db)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                train,
            } => {
                let (dx, dg, db) = kernels::batch_norm_backward(
                    dy.data(),
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    *layout,
                    *train,
                );
                send(*x, Tensor::new(self.shape(*x), dx)?);
                send(*gamma, Tensor::new(self.shape(*gamma), dg)?);
                send(*beta, Tensor::new(self.shape(*beta), db)?);
            }
            Op::Act { x, kind } => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let g: Vec<f64> = match kind {
                    Activation::Relu => dy
                        .data()
                        .iter()
                        .zip(xs)
                        .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => dy.data().iter().zip(ys).map(|(d, y)| d * y * (1.0 - y)).collect(),
                    Activation::Tanh => dy.data().iter().zip(ys).map(|(d, y)| d * (1.0 - y * y)).collect(),
                    Activation::Mish => dy
                        .data()
                        .iter()
                        .zip(xs)
                        .map(|(d, &z)| d * kernels::mish_grad(z))
                        .collect(),
                };
                send(*x, Tensor::new(dy.shape(), g)?);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2()?;
                let fout = dy.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(n, fout, fin, dy.data(), false, self.value(*w).data(), false, 0.0, &mut dx);
                    send(*x, Tensor::new(&[n, fin], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(fout, n, fin, dy.data(), true, self.value(*x).data(), false, 0.0, &mut dw);
                    send(*w, Tensor::new(&[fout, fin], dw)?);
                }
                if let Some(b) = b {
                    send(*b, Tensor::new(&[fout], column_sums(dy.data(), n, fout))?);
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let d = dy.data();
                send(*x, Tensor::from_fn(self.shape(*x), |i| d[i / hw] * inv));
            }
            Op::Reshape { x } => send(*x, dy.clone().reshape(self.shape(*x))?),
            Op::Add { a, b } => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub { a, b } => {
                send(*a, dy.clone());
                send(*b, dy.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    send(*a, elementwise(dy, self.value(*b), |d, y| d * y));
                }
                if self.wants(*b) {
                    send(*b, elementwise(dy, self.value(*a), |d, x| d * x));
                }
            }
            Op::ChannelScale { x, s } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let sv = self.value(*s).data();
                if self.wants(*x) {
                    let d = dy.data();
                    send(*x, Tensor::from_fn(dy.shape(), |i| d[i] * sv[i / hw]));
                }
                if self.wants(*s) {
                    let ds: Vec<f64> = dy
                        .data()
                        .chunks(hw)
                        .zip(self.value(*x).data().chunks(hw))
                        .map(|(d, xv)| d.iter().zip(xv).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*s, Tensor::new(self.shape(*s), ds)?);
                }
            }
            Op::Affine { x, scale } => send(*x, dy.map(|d| d * scale)),
            Op::Square { x } => send(*x, elementwise(dy, self.value(*x), |d, v| 2.0 * d * v)),
            Op::Sqrt { x } => send(*x, elementwise(dy, &node.value, |d, y| d / (2.0 * y))),
            Op::ConcatCols { a, b } => {
                let (n, ca) = self.value(*a).dims2()?;
                let cb = self.shape(*b)[1];
                let d = dy.data();
                let ga = Tensor::from_fn(&[n, ca], |i| d[(i / ca) * (ca + cb) + i % ca]);
                let gb = Tensor::from_fn(&[n, cb], |i| d[(i / cb) * (ca + cb) + ca + i % cb]);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Sum { x } => send(*x, Tensor::full(self.shape(*x), dy.item())),
            Op::Mean { x } => {
                let n = self.value(*x).numel() as f64;
                send(*x, Tensor::full(self.shape(*x), dy.item() / n));
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, dy.data(), false, self.value(*b).data(), true, 0.0, &mut da);
                    send(*a, Tensor::new(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, dy.data(), false, 0.0, &mut db);
                    send(*b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.value(*x).dims2()?;
                let d = dy.data();
                // dy is [c, r]
                send(*x, Tensor::from_fn(&[r, c], |i| d[(i % c) * r + i / c]));
            }
            Op::CenterColumns { x } => {
                let (r, c) = self.value(*x).dims2()?;
                let means = column_means(dy.data(), r, c);
                let d = dy.data();
                send(*x, Tensor::from_fn(&[r, c], |i| d[i] - means[i % c]));
            }
            Op::MeanRows { x } => {
                let (r, c) = self.value(*x).dims2()?;
                let d = dy.data();
                let inv = 1.0 / r as f64;
                send(*x, Tensor::from_fn(&[r, c], |i| d[i % c] * inv));
            }
        }
        Ok(())
    }

    /// Add every trainable parameter's gradient into `store`. Parameters the
    /// loss does not reach are left untouched.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn column_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

fn column_means(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let inv = 1.0 / rows as f64;
    column_sums(data, rows, cols).into_iter().map(|s| s * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = g.input_with_grad(t.clone()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let expected: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(g.backward(x), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_params_keep_their_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.add("b", Tensor::full(&[2], 1.0)).unwrap();
        store.get_mut(b).grad = Some(Tensor::full(&[2], 7.0));
        let mut g = Graph::new();
        let va = g.param(&store, a, true).unwrap();
        let _vb = g.param(&store, b, true).unwrap();
        let loss = g.sum(va).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.get(a).grad.as_ref().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(store.get(b).grad.as_ref().unwrap().data(), &[7.0, 7.0]);
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 3.0)).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let va = g.param(&store, a, true).unwrap();
            let loss = g.sum(va).unwrap();
            let grads = g.backward(loss).unwrap();
            g.accumulate_param_grads(&grads, &mut store);
        }
        assert_eq!(store.get(a).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 3.0)).unwrap();
        let mut g = Graph::new();
        let va = g.param(&store, a, false).unwrap();
        let x = g.input_with_grad(Tensor::full(&[2], 1.0)).unwrap();
        let prod = g.mul(va, x).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        assert!(store.get(a).grad.is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn train_mode_batch_norm_rejects_single_sample() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64)).unwrap();
        let gamma = g.constant(Tensor::full(&[2], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[2])).unwrap();
        let mut rs = RunningStats::new(2);
        let r = g.batch_norm(x, gamma, beta, &mut rs, BnOptions::train());
        assert!(matches!(r, Err(NumError::BatchTooSmall(1))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2], -1.0)).unwrap();
        assert!(matches!(g.sqrt(x), Err(NumError::NonFinite { .. })));
    }
}
