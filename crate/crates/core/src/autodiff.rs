//! Reverse-mode automatic differentiation over the layer primitives used by
//! the reconstruction networks.
//!
//! A [`Tape`] is an arena of executed primitives. Forward calls append nodes
//! and return [`NodeId`]s; [`Tape::backward`] walks the arena in reverse and
//! accumulates gradients additively. Parameters enter the tape as leaves
//! tagged with a caller-chosen slot index so gradients can be routed back to
//! the owning parameter store.
//!
//! All tape tensors are real. Complex quantities travel as 2-channel tensors
//! (channel 0 real part, channel 1 imaginary part), which keeps the FFT and
//! magnitude layers inside the differentiable graph.

use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{fft2, ifft2, Dtype, Tensor};

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros_like(&value);
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = T::zero();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Relu,
    AvgPool2,
    UpsampleNearest2,
    ConcatChannels,
    Add,
}

enum Op<T> {
    Leaf,
    Param { slot: usize },
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId },
    Relu { input: NodeId },
    AvgPool2 { input: NodeId },
    Upsample2 { input: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, c: T },
    Fft2Pairs { input: NodeId },
    Ifft2Pairs { input: NodeId },
    ComplexMagnitude { input: NodeId },
    MaskedReplace { input: NodeId, mask: Tensor<T> },
    L1Loss { pred: NodeId, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        debug_assert_eq!(value.dtype(), Dtype::Real, "tape tensors are real");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        assert_eq!(t.dtype(), Dtype::Real, "tape tensors are real");
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf. `slot` identifies the parameter to the caller; grads
    /// for the slot are exposed by [`Tape::param_grads`] after backward.
    pub fn param(&mut self, slot: usize, p: &Parameter<T>) -> NodeId {
        self.push(p.value.clone(), Op::Param { slot })
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn value_scalar(&self, id: NodeId) -> Result<T> {
        let t = &self.nodes[id.0].value;
        if t.numel() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    /// Cross-correlation with stride 1 and (k-1)/2 zero padding, plus bias.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d wants input rank 3, weight rank 4, bias rank 1; got {}/{}/{}",
                x.rank(),
                w.rank(),
                b.rank()
            )));
        }
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, wcin, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if k != k2 || k % 2 == 0 {
            return Err(Error::Dimension(format!("conv2d kernel must be odd square, got {k}x{k2}")));
        }
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        if b.shape()[0] != cout {
            return Err(Error::Dimension(format!(
                "conv2d bias length {} vs {cout} output channels",
                b.shape()[0]
            )));
        }
        let mut out = Tensor::zeros(&[cout, h, wd]);
        conv_fwd(x.data(), w.data(), b.data(), out.data_mut(), cin, cout, h, wd, k);
        Ok(self.push(out, Op::Conv2d { input, weight, bias }))
    }

    pub fn apply_layer(&mut self, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            LayerKind::Relu | LayerKind::AvgPool2 | LayerKind::UpsampleNearest2 => 1,
            LayerKind::ConcatChannels | LayerKind::Add => 2,
        };
        if inputs.len() != arity {
            return Err(Error::Dimension(format!(
                "{kind:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        match kind {
            LayerKind::Relu => Ok(self.relu(inputs[0])),
            LayerKind::AvgPool2 => self.avgpool2(inputs[0]),
            LayerKind::UpsampleNearest2 => self.upsample_nearest2(inputs[0]),
            LayerKind::ConcatChannels => self.concat_channels(inputs[0], inputs[1]),
            LayerKind::Add => self.add(inputs[0], inputs[1]),
        }
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input.0].value.map(|v| v.max(T::zero()));
        self.push(out, Op::Relu { input })
    }

    pub fn avgpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 3 {
            return Err(Error::Dimension("avgpool2 wants rank 3".into()));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("avgpool2 needs even extents, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::cast(0.25);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let xd = x.data();
            let od = out.data_mut();
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = ci * h * w + 2 * y * w + 2 * xx;
                        od[ci * oh * ow + y * ow + xx] =
                            (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter;
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2 { input }))
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 3 {
            return Err(Error::Dimension("upsample_nearest2 wants rank 3".into()));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let xd = x.data();
            let od = out.data_mut();
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xd[ci * h * w + y * w + xx];
                        let base = ci * oh * ow + 2 * y * ow + 2 * xx;
                        od[base] = v;
                        od[base + 1] = v;
                        od[base + ow] = v;
                        od[base + ow + 1] = v;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Upsample2 { input }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 3 || tb.rank() != 3 {
            return Err(Error::Dimension("concat_channels wants rank 3".into()));
        }
        if ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::Dimension(format!(
                "concat_channels spatial mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let shape = [ta.shape()[0] + tb.shape()[0], ta.shape()[1], ta.shape()[2]];
        let mut data = Vec::with_capacity(ta.data().len() + tb.data().len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.add(tb)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: NodeId, c: T) -> NodeId {
        let out = self.nodes[input.0].value.scale(c);
        self.push(out, Op::Scale { input, c })
    }

    /// Forward 2-D DFT of a pair tensor [2,H,W]. Backward is the inverse
    /// transform scaled by H*W (linearity of the DFT).
    pub fn fft2_pairs(&mut self, input: NodeId) -> Result<NodeId> {
        let out = pairs_transform(&self.nodes[input.0].value, false)?;
        Ok(self.push(out, Op::Fft2Pairs { input }))
    }

    /// Inverse 2-D DFT of a pair tensor [2,H,W]; carries the 1/(H*W) factor.
    pub fn ifft2_pairs(&mut self, input: NodeId) -> Result<NodeId> {
        let out = pairs_transform(&self.nodes[input.0].value, true)?;
        Ok(self.push(out, Op::Ifft2Pairs { input }))
    }

    /// Elementwise magnitude of a pair tensor [2,H,W] -> [1,H,W].
    /// Subgradient at 0 is 0 for both components.
    pub fn complex_magnitude(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        check_pairs(x, "complex_magnitude")?;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let plane = h * w;
        let mut out = Tensor::zeros(&[1, h, w]);
        {
            let xd = x.data();
            let od = out.data_mut();
            for i in 0..plane {
                let (re, im) = (xd[i], xd[plane + i]);
                od[i] = (re * re + im * im).sqrt();
            }
        }
        Ok(self.push(out, Op::ComplexMagnitude { input }))
    }

    /// Data consistency: where mask = 1 the input element (both components)
    /// is replaced by the measured value, so no gradient flows there.
    pub fn masked_replace(
        &mut self,
        input: NodeId,
        mask: &Tensor<T>,
        measured: &Tensor<T>,
    ) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        check_pairs(x, "masked_replace")?;
        if measured.shape() != x.shape() {
            return Err(Error::Dimension(format!(
                "masked_replace measured shape {:?} vs input {:?}",
                measured.shape(),
                x.shape()
            )));
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if mask.rank() != 2 || mask.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "masked_replace mask shape {:?} vs spatial {h}x{w}",
                mask.shape()
            )));
        }
        let plane = h * w;
        let mut out = x.clone();
        {
            let od = out.data_mut();
            let md = mask.data();
            let rd = measured.data();
            for i in 0..plane {
                let m = md[i];
                let keep = T::one() - m;
                od[i] = keep * od[i] + m * rd[i];
                od[plane + i] = keep * od[plane + i] + m * rd[plane + i];
            }
        }
        Ok(self.push(
            out,
            Op::MaskedReplace {
                input,
                mask: mask.clone(),
            },
        ))
    }

    /// Mean absolute error over all elements, as a shape-[1] node.
    pub fn l1_loss(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let p = &self.nodes[pred.0].value;
        if p.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "l1_loss shape mismatch: {:?} vs {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = T::cast(p.data().len() as f64);
        let sum: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let out = Tensor::from_vec(&[1], vec![sum / n])?;
        Ok(self.push(
            out,
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar node, seeding dLoss/dLoss = 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::from_vec(&[1], vec![T::one()])?);

        let Tape { nodes, grads } = self;
        for i in (0..nodes.len()).rev() {
            if grads[i].is_none() {
                continue;
            }
            // Children always precede their consumer, so splitting at i gives
            // mutable access to every child slot while grads[i] stays shared.
            let (lo, hi) = grads.split_at_mut(i);
            let g = hi[0].as_ref().unwrap();
            match &nodes[i].op {
                Op::Leaf | Op::Param { .. } => {}
                Op::Conv2d { input, weight, bias } => {
                    let x = &nodes[input.0].value;
                    let w = &nodes[weight.0].value;
                    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (cout, k) = (w.shape()[0], w.shape()[2]);
                    conv_bwd_input(
                        ensure(&mut lo[input.0], x).data_mut(),
                        w.data(),
                        g.data(),
                        cin,
                        cout,
                        h,
                        wd,
                        k,
                    );
                    conv_bwd_weight(
                        ensure(&mut lo[weight.0], w).data_mut(),
                        x.data(),
                        g.data(),
                        cin,
                        cout,
                        h,
                        wd,
                        k,
                    );
                    let db = ensure(&mut lo[bias.0], &nodes[bias.0].value).data_mut();
                    let plane = h * wd;
                    for (co, dbv) in db.iter_mut().enumerate().take(cout) {
                        *dbv += lane_sum(&g.data()[co * plane..(co + 1) * plane]);
                    }
                }
                Op::Relu { input } => {
                    let x = &nodes[input.0].value;
                    let gx = ensure(&mut lo[input.0], x).data_mut();
                    for ((gv, xv), out) in g.data().iter().zip(x.data()).zip(gx) {
                        // select instead of branch so the loop vectorizes
                        *out += if *xv > T::zero() { *gv } else { T::zero() };
                    }
                }
                Op::AvgPool2 { input } => {
                    let x = &nodes[input.0].value;
                    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::cast(0.25);
                    let gx = ensure(&mut lo[input.0], x).data_mut();
                    let gd = g.data();
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = gd[ci * oh * ow + y * ow + xx] * quarter;
                                let base = ci * h * w + 2 * y * w + 2 * xx;
                                gx[base] += gv;
                                gx[base + 1] += gv;
                                gx[base + w] += gv;
                                gx[base + w + 1] += gv;
                            }
                        }
                    }
                }
                Op::Upsample2 { input } => {
                    let x = &nodes[input.0].value;
                    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let gx = ensure(&mut lo[input.0], x).data_mut();
                    let gd = g.data();
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let base = ci * oh * ow + 2 * y * ow + 2 * xx;
                                gx[ci * h * w + y * w + xx] +=
                                    gd[base] + gd[base + 1] + gd[base + ow] + gd[base + ow + 1];
                            }
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let ca = nodes[a.0].value.data().len();
                    {
                        let ga = ensure(&mut lo[a.0], &nodes[a.0].value).data_mut();
                        for (o, gv) in ga.iter_mut().zip(&g.data()[..ca]) {
                            *o += *gv;
                        }
                    }
                    let gb = ensure(&mut lo[b.0], &nodes[b.0].value).data_mut();
                    for (o, gv) in gb.iter_mut().zip(&g.data()[ca..]) {
                        *o += *gv;
                    }
                }
                Op::Add { a, b } => {
                    {
                        let ga = ensure(&mut lo[a.0], &nodes[a.0].value).data_mut();
                        for (o, gv) in ga.iter_mut().zip(g.data()) {
                            *o += *gv;
                        }
                    }
                    let gb = ensure(&mut lo[b.0], &nodes[b.0].value).data_mut();
                    for (o, gv) in gb.iter_mut().zip(g.data()) {
                        *o += *gv;
                    }
                }
                Op::Scale { input, c } => {
                    let gx = ensure(&mut lo[input.0], &nodes[input.0].value).data_mut();
                    for (o, gv) in gx.iter_mut().zip(g.data()) {
                        *o += *gv * *c;
                    }
                }
                Op::Fft2Pairs { input } => {
                    // Adjoint of the unnormalized forward DFT: inverse DFT
                    // times H*W.
                    let (h, w) = (g.shape()[1], g.shape()[2]);
                    let scale = T::cast((h * w) as f64);
                    let back = pairs_transform(g, true)?.scale(scale);
                    let gx = ensure(&mut lo[input.0], &nodes[input.0].value).data_mut();
                    for (o, gv) in gx.iter_mut().zip(back.data()) {
                        *o += *gv;
                    }
                }
                Op::Ifft2Pairs { input } => {
                    let (h, w) = (g.shape()[1], g.shape()[2]);
                    let scale = T::cast(1.0 / (h * w) as f64);
                    let back = pairs_transform(g, false)?.scale(scale);
                    let gx = ensure(&mut lo[input.0], &nodes[input.0].value).data_mut();
                    for (o, gv) in gx.iter_mut().zip(back.data()) {
                        *o += *gv;
                    }
                }
                Op::ComplexMagnitude { input } => {
                    let x = &nodes[input.0].value;
                    let plane = x.shape()[1] * x.shape()[2];
                    let m = &nodes[i].value;
                    let gx = ensure(&mut lo[input.0], x).data_mut();
                    let (gd, xd, md) = (g.data(), x.data(), m.data());
                    for j in 0..plane {
                        let mag = md[j];
                        if mag > T::zero() {
                            let s = gd[j] / mag;
                            gx[j] += s * xd[j];
                            gx[plane + j] += s * xd[plane + j];
                        }
                    }
                }
                Op::MaskedReplace { input, mask } => {
                    let x = &nodes[input.0].value;
                    let plane = mask.data().len();
                    let gx = ensure(&mut lo[input.0], x).data_mut();
                    let (gd, md) = (g.data(), mask.data());
                    for j in 0..plane {
                        let keep = T::one() - md[j];
                        gx[j] += keep * gd[j];
                        gx[plane + j] += keep * gd[plane + j];
                    }
                }
                Op::L1Loss { pred, target } => {
                    let p = &nodes[pred.0].value;
                    let n = T::cast(p.data().len() as f64);
                    let seed = g.data()[0] / n;
                    let gp = ensure(&mut lo[pred.0], p).data_mut();
                    for ((o, &pv), &tv) in gp.iter_mut().zip(p.data()).zip(target.data()) {
                        let d = pv - tv;
                        if d > T::zero() {
                            *o += seed;
                        } else if d < T::zero() {
                            *o -= seed;
                        }
                        // sign(0) = 0: no contribution at exact zero residual
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients of parameter leaves, keyed by slot, after [`Tape::backward`].
    /// Unreachable parameters are absent.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param { slot } => self.grads[i].as_ref().map(|g| (slot, g)),
            _ => None,
        })
    }
}

fn ensure<'a, T: Scalar>(slot: &'a mut Option<Tensor<T>>, like: &Tensor<T>) -> &'a mut Tensor<T> {
    if slot.is_none() {
        *slot = Some(Tensor::zeros_like(like));
    }
    slot.as_mut().unwrap()
}

fn check_pairs<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.rank() != 3 || t.shape()[0] != 2 {
        return Err(Error::Dimension(format!(
            "{what} wants a [2,H,W] pair tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// DFT of a [2,H,W] pair tensor via the complex transform.
fn pairs_transform<T: Scalar>(t: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    check_pairs(t, if inverse { "ifft2_pairs" } else { "fft2_pairs" })?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let c = pairs_to_complex(t)?;
    let f = if inverse { ifft2(&c)? } else { fft2(&c)? };
    complex_to_pairs(&f, h, w)
}

/// [2,H,W] planes -> complex H x W tensor.
pub fn pairs_to_complex<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    check_pairs(t, "pairs_to_complex")?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let d = t.data();
    let elems: Vec<Complex<T>> = (0..plane).map(|i| Complex::new(d[i], d[plane + i])).collect();
    Tensor::from_complex(&[h, w], &elems)
}

/// Complex H x W tensor -> [2,H,W] planes.
pub fn complex_to_pairs<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if t.dtype() != Dtype::Complex || t.shape() != [h, w] {
        return Err(Error::Dimension(format!(
            "complex_to_pairs wants complex [{h},{w}], got {:?}",
            t.shape()
        )));
    }
    let plane = h * w;
    let mut data = vec![T::zero(); 2 * plane];
    for (i, z) in t.data().chunks_exact(2).enumerate() {
        data[i] = z[0];
        data[plane + i] = z[1];
    }
    Tensor::from_vec(&[2, h, w], data)
}

#[allow(clippy::too_many_arguments)]
fn conv_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    out: &mut [T],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let p = ((k - 1) / 2) as isize;
    let plane = h * wd;
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        for v in o.iter_mut() {
            *v = b[co];
        }
        for ci in 0..cin {
            let xp = &x[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * k * k;
            for dy in 0..k {
                let sy = dy as isize - p;
                let y0 = (-sy).max(0) as usize;
                let y1 = ((h as isize - sy).min(h as isize)).max(0) as usize;
                for dx in 0..k {
                    let wv = w[wbase + dy * k + dx];
                    let sx = dx as isize - p;
                    let x0 = (-sx).max(0) as usize;
                    let x1 = ((wd as isize - sx).min(wd as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + sy) as usize;
                        let ib = iy * wd + (x0 as isize + sx) as usize;
                        let orow = &mut o[y * wd + x0..y * wd + x1];
                        let irow = &xp[ib..ib + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * *iv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd_input<T: Scalar>(
    dx: &mut [T],
    w: &[T],
    g: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let p = ((k - 1) / 2) as isize;
    let plane = h * wd;
    for co in 0..cout {
        let gp = &g[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let dxp = &mut dx[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * k * k;
            for dy in 0..k {
                let sy = dy as isize - p;
                let y0 = (-sy).max(0) as usize;
                let y1 = ((h as isize - sy).min(h as isize)).max(0) as usize;
                for dx_ in 0..k {
                    let wv = w[wbase + dy * k + dx_];
                    let sx = dx_ as isize - p;
                    let x0 = (-sx).max(0) as usize;
                    let x1 = ((wd as isize - sx).min(wd as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + sy) as usize;
                        let ib = iy * wd + (x0 as isize + sx) as usize;
                        let grow = &gp[y * wd + x0..y * wd + x1];
                        let xrow = &mut dxp[ib..ib + (x1 - x0)];
                        for (xv, gv) in xrow.iter_mut().zip(grow) {
                            *xv += wv * *gv;
                        }
                    }
                }
            }
        }
    }
}

/// Sum with eight parallel accumulators; see [`lane_dot`].
fn lane_sum<T: Scalar>(a: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let ra = ca.remainder();
    for pa in ca {
        for l in 0..8 {
            lanes[l] += pa[l];
        }
    }
    let mut tail = T::zero();
    for v in ra {
        tail += *v;
    }
    let head = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    head + tail
}

/// Dot product with eight parallel accumulators. A plain `acc += a*b` chain
/// serializes on the float adds; fixed lanes keep the result deterministic
/// while letting the loop vectorize.
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (pa, pb) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut tail = T::zero();
    for (va, vb) in ra.iter().zip(rb) {
        tail += *va * *vb;
    }
    let head = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    head + tail
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd_weight<T: Scalar>(
    dw: &mut [T],
    x: &[T],
    g: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let p = ((k - 1) / 2) as isize;
    let plane = h * wd;
    for co in 0..cout {
        let gp = &g[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let xp = &x[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * k * k;
            for dy in 0..k {
                let sy = dy as isize - p;
                let y0 = (-sy).max(0) as usize;
                let y1 = ((h as isize - sy).min(h as isize)).max(0) as usize;
                for dx in 0..k {
                    let sx = dx as isize - p;
                    let x0 = (-sx).max(0) as usize;
                    let x1 = ((wd as isize - sx).min(wd as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + sy) as usize;
                        let ib = iy * wd + (x0 as isize + sx) as usize;
                        let grow = &gp[y * wd + x0..y * wd + x1];
                        let xrow = &xp[ib..ib + (x1 - x0)];
                        acc += lane_dot(grow, xrow);
                    }
                    dw[wbase + dy * k + dx] += acc;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
}

/// SGD and RMSProp (running mean-square decay 0.99, eps 1e-8).
/// State is keyed by parameter slot, so one optimizer follows one model.
#[derive(Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    sq: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, sq: Vec::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update to each `(slot, parameter)` and zero its grad.
    /// Non-finite updated values surface as a numeric error.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (usize, &'a mut Parameter<T>)>,
        lr: T,
    ) -> Result<()> {
        let decay = T::cast(0.99);
        let eps = T::cast(1e-8);
        for (slot, p) in params {
            if self.sq.len() <= slot {
                self.sq.resize_with(slot + 1, || None);
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::RmsProp => {
                    let s = ensure(&mut self.sq[slot], &p.value);
                    for ((v, &g), sv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(s.data_mut())
                    {
                        *sv = decay * *sv + (T::one() - decay) * g * g;
                        *v -= lr * g / (sv.sqrt() + eps);
                    }
                }
            }
            if p.value.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value in parameter {} after update",
                    p.name
                )));
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Compare analytic gradients against central finite differences at
/// `n_coords` random parameter coordinates; returns the worst relative
/// error. `eval_grads` must zero and then fill every `Parameter.grad`;
/// `eval_loss` must be deterministic.
pub fn grad_check<T: Scalar, R: Rng>(
    params: &mut [Parameter<T>],
    mut eval_loss: impl FnMut(&[Parameter<T>]) -> Result<T>,
    mut eval_grads: impl FnMut(&mut [Parameter<T>]) -> Result<()>,
    n_coords: usize,
    eps: T,
    rng: &mut R,
) -> Result<T> {
    eval_grads(params)?;
    let analytic: Vec<Vec<T>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let total: usize = params.iter().map(|p| p.value.data().len()).sum();
    if total == 0 {
        return Err(Error::Config("grad_check on an empty parameter list".into()));
    }

    let floor = T::cast(1e-6);
    let mut worst = T::zero();
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= params[pi].value.data().len() {
            flat -= params[pi].value.data().len();
            pi += 1;
        }

        let orig = params[pi].value.data()[flat];
        params[pi].value.data_mut()[flat] = orig + eps;
        let lp = eval_loss(params)?;
        params[pi].value.data_mut()[flat] = orig - eps;
        let lm = eval_loss(params)?;
        params[pi].value.data_mut()[flat] = orig;

        let fd = (lp - lm) / (T::cast(2.0) * eps);
        let ad = analytic[pi][flat];
        let denom = ad.abs().max(fd.abs()).max(floor);
        let rel = (ad - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
