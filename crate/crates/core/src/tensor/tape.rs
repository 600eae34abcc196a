//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op evaluates eagerly, appends a node holding its value and whatever
//! it needs for the backward pass, and returns a [`Var`] handle. `backward`
//! walks the nodes in strict reverse append order exactly once.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom, Window};
use super::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Normalization statistics grouping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per channel over batch and space.
    #[default]
    Batch,
    /// Per sample and channel over space.
    Instance,
}

/// Running mean / variance of a batch-norm layer, used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    /// Normalization with statistics from the current input.
    Norm {
        input: usize,
        gamma: usize,
        beta: usize,
        kind: NormKind,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Batch norm with frozen (running) statistics: a per-channel affine map.
    NormFrozen {
        input: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        input: usize,
        slope: T,
    },
    Tanh {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    /// Elementwise multiply by a fixed mask (already scaled by 1/(1−p)).
    Mask {
        input: usize,
        mask: Vec<T>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Abs {
        input: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    BceWithLogits {
        logits: usize,
        target: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// An append-only record of evaluated ops.
#[derive(Debug)]
pub struct Tape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`. `None` if `v` is not a
    /// trainable leaf of the tape the gradients came from.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

fn sum_f64<T: Element>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

fn same_dims(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, a.dims(), b.dims()));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {op:?}",
            op = std::mem::discriminant(&op)
        );
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Value of `v`.
    ///
    /// Panics if `v` was created on a different tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.idx(v).expect("Tape::value called with a variable from another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn conv_geom(&self, op: &'static str, x: usize, w: usize, bias: Option<usize>, win: Window, transposed: bool) -> Result<ConvGeom> {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let [n, c, h, wd] = xv.dims4()?;
        let [w0, w1, kh, kw] = wv.dims4()?;
        if kh != kw || kh != win.kernel {
            return Err(Error::shape(op, xv.dims(), wv.dims()));
        }
        if win.stride == 0 {
            return Err(Error::Param(format!("{op}: stride must be ≥ 1")));
        }
        // conv2d weight is O×C×K×K; the transposed op takes C×O×K×K.
        let (w_in, o) = if transposed { (w0, w1) } else { (w1, w0) };
        if w_in != c {
            return Err(Error::shape(op, xv.dims(), wv.dims()));
        }
        if let Some(b) = bias {
            if self.nodes[b].value.dims() != [o] {
                return Err(Error::shape(op, wv.dims(), self.nodes[b].value.dims()));
            }
        }
        let (oh, ow) = if transposed {
            (win.transposed_len(h), win.transposed_len(wd))
        } else {
            (win.out_len(h), win.out_len(wd))
        };
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                n,
                c,
                h,
                w: wd,
                o,
                oh,
                ow,
                win,
            }),
            _ => Err(Error::shape(op, xv.dims(), wv.dims())),
        }
    }

    /// 2-D convolution of an N×C×H×W input with an O×C×K×K weight.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let kernel = self.nodes[wi].value.dims().get(2).copied().unwrap_or(0);
        let geom = self.conv_geom("conv2d", xi, wi, bi, Window { kernel, stride, padding }, false)?;
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
        );
        let value = Tensor::from_parts(vec![geom.n, geom.o, geom.oh, geom.ow], out);
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
            },
            &inputs,
        ))
    }

    /// Transposed 2-D convolution (the input-gradient operator of conv2d) of
    /// an N×C×H×W input with a C×O×K×K weight.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let kernel = self.nodes[wi].value.dims().get(2).copied().unwrap_or(0);
        let geom = self.conv_geom("conv_transpose2d", xi, wi, bi, Window { kernel, stride, padding }, true)?;
        let out = kernels::conv_transpose2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
        );
        let value = Tensor::from_parts(vec![geom.n, geom.o, geom.oh, geom.ow], out);
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
            },
            &inputs,
        ))
    }

    fn check_affine(&self, op: &'static str, xi: usize, gi: usize, bi: usize) -> Result<[usize; 4]> {
        let dims = self.nodes[xi].value.dims4()?;
        for p in [gi, bi] {
            if self.nodes[p].value.dims() != [dims[1]] {
                return Err(Error::shape(op, self.nodes[xi].value.dims(), self.nodes[p].value.dims()));
            }
        }
        Ok(dims)
    }

    /// Batch normalization. In training mode the batch statistics normalize
    /// the input and update `stats`; otherwise `stats` are used as-is.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats<T>, training: bool) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let [n, c, h, w] = self.check_affine("batch_norm2d", xi, gi, bi)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batch_norm2d", self.nodes[xi].value.dims(), &[stats.mean.len()]));
        }
        if !training {
            let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
            let (g, b) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
            let hw = h * w;
            let xv = self.nodes[xi].value.data();
            let mut out = vec![T::zero(); xv.len()];
            for (plane_idx, (dst, src)) in out.chunks_exact_mut(hw).zip(xv.chunks_exact(hw)).enumerate() {
                let ch = plane_idx % c;
                let (scale, m) = (g[ch] * inv_std[ch], stats.mean[ch]);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - m) * scale + b[ch];
                }
            }
            let value = Tensor::from_parts(vec![n, c, h, w], out);
            let op = Op::NormFrozen {
                input: xi,
                gamma: gi,
                beta: bi,
                mean: stats.mean.clone(),
                inv_std,
            };
            return Ok(self.push(value, op, &[xi, gi, bi]));
        }
        let (var, mean) = self.normalize(xi, gi, bi, NormKind::Batch, stats.eps)?;
        let members = n * h * w;
        let unbias = T::from_f64_lossy(members as f64 / (members - 1) as f64);
        let mom = stats.momentum;
        for ch in 0..c {
            stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
            stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
        }
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Instance normalization with a per-channel affine transform. Always
    /// uses the statistics of the current sample.
    pub fn instance_norm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        self.check_affine("instance_norm2d", xi, gi, bi)?;
        self.normalize(xi, gi, bi, NormKind::Instance, eps)?;
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Shared normalization forward; pushes the node and returns per-group
    /// (biased variance, mean).
    fn normalize(&mut self, xi: usize, gi: usize, bi: usize, kind: NormKind, eps: T) -> Result<(Vec<T>, Vec<T>)> {
        let [n, c, h, w] = self.nodes[xi].value.dims4()?;
        let hw = h * w;
        let (groups, members) = match kind {
            NormKind::Batch => (c, n * hw),
            NormKind::Instance => (n * c, hw),
        };
        if members < 2 {
            return Err(Error::DegenerateVariance {
                op: match kind {
                    NormKind::Batch => "batch_norm2d",
                    NormKind::Instance => "instance_norm2d",
                },
            });
        }
        let xv = self.nodes[xi].value.data();
        let group_of = |plane: usize| match kind {
            NormKind::Batch => plane % c,
            NormKind::Instance => plane,
        };
        let mut sums = vec![0.0f64; groups];
        for (plane, chunk) in xv.chunks_exact(hw).enumerate() {
            sums[group_of(plane)] += sum_f64(chunk);
        }
        let mean: Vec<f64> = sums.iter().map(|s| s / members as f64).collect();
        let mut sq = vec![0.0f64; groups];
        for (plane, chunk) in xv.chunks_exact(hw).enumerate() {
            let g = group_of(plane);
            sq[g] += chunk.iter().map(|v| (v.as_f64() - mean[g]).powi(2)).sum::<f64>();
        }
        let var: Vec<f64> = sq.iter().map(|s| s / members as f64).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (T::from_f64_lossy(v) + eps).sqrt()).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();

        let (gam, bet) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (plane, ((xh, o), src)) in xhat
            .chunks_exact_mut(hw)
            .zip(out.chunks_exact_mut(hw))
            .zip(xv.chunks_exact(hw))
            .enumerate()
        {
            let (g, ch) = (group_of(plane), plane % c);
            for ((xh, o), &s) in xh.iter_mut().zip(o.iter_mut()).zip(src) {
                *xh = (s - mean_t[g]) * inv_std[g];
                *o = gam[ch] * *xh + bet[ch];
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let op = Op::Norm {
            input: xi,
            gamma: gi,
            beta: bi,
            kind,
            xhat,
            inv_std,
        };
        self.push(value, op, &[xi, gi, bi]);
        Ok((var.into_iter().map(T::from_f64_lossy).collect(), mean_t))
    }

    /// `x` for positive inputs, `slope·x` otherwise (derivative at 0 is `slope`).
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| if v > T::zero() { v } else { v * slope });
        Ok(self.push(value, Op::LeakyRelu { input: xi, slope }, &[xi]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, T::zero())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| v.tanh());
        Ok(self.push(value, Op::Tanh { input: xi }, &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| T::one() / (T::one() + (-v).exp()));
        Ok(self.push(value, Op::Sigmoid { input: xi }, &[xi]))
    }

    /// Inverted dropout. With `rng == None` (noise disabled) this is the
    /// identity; otherwise each element is zeroed with probability `p` and
    /// survivors are scaled by `1/(1−p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let xi = self.idx(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability must be in [0, 1), got {p}")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[xi].value.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.masked(xi, mask)
    }

    /// Multiplies by a caller-supplied fixed mask.
    pub fn mask(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        same_dims("mask", &self.nodes[xi].value, mask)?;
        self.masked(xi, mask.data().to_vec())
    }

    fn masked(&mut self, xi: usize, mask: Vec<T>) -> Result<Var> {
        let src = &self.nodes[xi].value;
        let out = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(src.dims().to_vec(), out);
        Ok(self.push(value, Op::Mask { input: xi, mask }, &[xi]))
    }

    /// Channel concatenation of two NCHW tensors, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let [n, ca, h, w] = av.dims4()?;
        let [nb, cb, hb, wb] = bv.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", av.dims(), bv.dims()));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&av.data()[s * la..(s + 1) * la]);
            out.extend_from_slice(&bv.data()[s * lb..(s + 1) * lb]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], out);
        Ok(self.push(value, Op::Concat { a: ai, b: bi }, &[ai, bi]))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        same_dims(op, av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::from_parts(av.dims().to_vec(), out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, value) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| v * factor);
        Ok(self.push(value, Op::Scale { input: xi, factor }, &[xi]))
    }

    /// Elementwise absolute value (subgradient 0 at 0).
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| v.abs());
        Ok(self.push(value, Op::Abs { input: xi }, &[xi]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = sum_f64(self.nodes[xi].value.data());
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum { input: xi }, &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let m = sum_f64(v.data()) / v.numel() as f64;
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(m)), Op::Mean { input: xi }, &[xi]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant
    /// target, evaluated in the overflow-free form
    /// `max(x, 0) − x·t + ln(1 + e^(−|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: T) -> Result<Var> {
        let li = self.idx(logits)?;
        let v = &self.nodes[li].value;
        let t = target.as_f64();
        let total: f64 = v
            .data()
            .iter()
            .map(|x| {
                let x = x.as_f64();
                x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar(T::from_f64_lossy(total / v.numel() as f64));
        Ok(self.push(value, Op::BceWithLogits { logits: li, target }, &[li]))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    /// Leaves the loss does not depend on receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.nodes[li].value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::from_parts(node.value.dims().to_vec(), g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && out[i].is_none() {
                out[i] = Some(Tensor::zeros(node.value.dims()));
            }
        }
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let zeros = |j: usize| vec![T::zero(); self.nodes[j].value.numel()];

        fn acc<T: Element>(grads: &mut [Option<Vec<T>>], j: usize, contrib: Vec<T>) {
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        }
        let elementwise = |grads: &mut [Option<Vec<T>>], j: usize, f: &dyn Fn(usize) -> T| {
            if self.wants(j) {
                acc(grads, j, (0..g.len()).map(f).collect());
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } | Op::ConvTranspose2d { input, weight, bias, geom } => {
                let mut dx = self.wants(*input).then(|| zeros(*input));
                let mut dw = self.wants(*weight).then(|| zeros(*weight));
                let mut db = bias.filter(|&b| self.wants(b)).map(zeros);
                let backward = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward
                } else {
                    kernels::conv_transpose2d_backward
                };
                backward(
                    geom,
                    val(*input),
                    val(*weight),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    acc(grads, *b, db);
                }
            }
            Op::Norm {
                input,
                gamma,
                beta,
                kind,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = self.nodes[*input].value.dims4().expect("norm input is NCHW");
                let hw = h * w;
                let gam = val(*gamma);
                let group_of = |plane: usize| match kind {
                    NormKind::Batch => plane % c,
                    NormKind::Instance => plane,
                };
                let groups = inv_std.len();
                let members = match kind {
                    NormKind::Batch => n * hw,
                    NormKind::Instance => hw,
                };
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut s1 = vec![0.0f64; groups];
                let mut s2 = vec![0.0f64; groups];
                for (plane, (gp, xp)) in g.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                    let (grp, ch) = (group_of(plane), plane % c);
                    let (mut a, mut b) = (0.0f64, 0.0f64);
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        a += gv.as_f64();
                        b += (gv * xv).as_f64();
                    }
                    dbeta[ch] += T::from_f64_lossy(a);
                    dgamma[ch] += T::from_f64_lossy(b);
                    let gm = gam[ch].as_f64();
                    s1[grp] += a * gm;
                    s2[grp] += b * gm;
                }
                if self.wants(*input) {
                    let m = T::from_f64_lossy(members as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (plane, ((dxp, gp), xp)) in dx
                        .chunks_exact_mut(hw)
                        .zip(g.chunks_exact(hw))
                        .zip(xhat.chunks_exact(hw))
                        .enumerate()
                    {
                        let (grp, ch) = (group_of(plane), plane % c);
                        let (a, b) = (T::from_f64_lossy(s1[grp]), T::from_f64_lossy(s2[grp]));
                        let k = inv_std[grp] / m;
                        for ((d, &gv), &xv) in dxp.iter_mut().zip(gp).zip(xp) {
                            *d = k * (m * gv * gam[ch] - a - xv * b);
                        }
                    }
                    acc(grads, *input, dx);
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::NormFrozen {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [_, c, h, w] = self.nodes[*input].value.dims4().expect("norm input is NCHW");
                let hw = h * w;
                let (gam, xv) = (val(*gamma), val(*input));
                if self.wants(*input) {
                    let dx = (0..g.len()).map(|k| g[k] * gam[(k / hw) % c] * inv_std[(k / hw) % c]).collect();
                    acc(grads, *input, dx);
                }
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (k, &gv) in g.iter().enumerate() {
                    let ch = (k / hw) % c;
                    dgamma[ch] += gv * (xv[k] - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gv;
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                elementwise(grads, *input, &|k| if x[k] > T::zero() { g[k] } else { g[k] * *slope });
            }
            Op::Tanh { input } => {
                let y = node.value.data();
                elementwise(grads, *input, &|k| g[k] * (T::one() - y[k] * y[k]));
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                elementwise(grads, *input, &|k| g[k] * y[k] * (T::one() - y[k]));
            }
            Op::Mask { input, mask } => elementwise(grads, *input, &|k| g[k] * mask[k]),
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[*a].value.dims4().expect("concat input is NCHW");
                let cb = self.nodes[*b].value.dims()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                if self.wants(*a) {
                    let ga = (0..n).flat_map(|s| g[s * (la + lb)..s * (la + lb) + la].iter().copied()).collect();
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = (0..n)
                        .flat_map(|s| g[s * (la + lb) + la..(s + 1) * (la + lb)].iter().copied())
                        .collect();
                    acc(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                elementwise(grads, *a, &|k| g[k]);
                elementwise(grads, *b, &|k| g[k]);
            }
            Op::Sub { a, b } => {
                elementwise(grads, *a, &|k| g[k]);
                elementwise(grads, *b, &|k| -g[k]);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                elementwise(grads, *a, &|k| g[k] * bv[k]);
                elementwise(grads, *b, &|k| g[k] * av[k]);
            }
            Op::Scale { input, factor } => elementwise(grads, *input, &|k| g[k] * *factor),
            Op::Abs { input } => {
                let x = val(*input);
                elementwise(grads, *input, &|k| {
                    if x[k] > T::zero() {
                        g[k]
                    } else if x[k] < T::zero() {
                        -g[k]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sum { input } => {
                if self.wants(*input) {
                    acc(grads, *input, vec![g[0]; self.nodes[*input].value.numel()]);
                }
            }
            Op::Mean { input } => {
                if self.wants(*input) {
                    let n = self.nodes[*input].value.numel();
                    acc(grads, *input, vec![g[0] / T::from_f64_lossy(n as f64); n]);
                }
            }
            Op::BceWithLogits { logits, target } => {
                if self.wants(*logits) {
                    let x = val(*logits);
                    let k = g[0] / T::from_f64_lossy(x.len() as f64);
                    let d = x.iter().map(|&v| (T::one() / (T::one() + (-v).exp()) - *target) * k).collect();
                    acc(grads, *logits, d);
                }
            }
        }
    }
}
