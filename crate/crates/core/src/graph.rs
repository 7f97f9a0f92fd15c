//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node holding its
//! value and a closure mapping the upstream gradient onto its parents.
//! Nodes are created after their parents, so a reverse sweep over the tape
//! is a valid topological order.

use std::sync::Arc;

use rayon::prelude::*;

use crate::conv::{deconv_out_len, gemm, ConvGeom, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Maps the upstream gradient onto each parent; `needs[i]` is false for
/// parents that do not require a gradient, which may be skipped.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as accumulated into running statistics.
    pub var: Vec<f64>,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append an op node. The backward closure is dropped when no parent
    /// requires a gradient.
    pub fn push_op(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_value = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&upstream, &needs);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(g) = g {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Grads { grads }
    }

    // ---- structural ops -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push_op(out, &[x], Box::new(move |g, _| vec![Some(g.scale(scale))]))
    }

    /// Weighted sum of same-shaped values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Shape("weighted sum of nothing".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let val = self.value(v);
            if val.shape() != shape.as_slice() {
                return Err(Error::Shape("weighted sum shape mismatch".into()));
            }
            for (o, x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += w * x;
            }
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push_op(
            out,
            &vars,
            Box::new(move |g, _| weights.iter().map(|&w| Some(g.scale(w))).collect()),
        ))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let mut dims = Vec::new();
        for &p in parts {
            dims.push(self.value(p).dims4()?);
        }
        let (n, _, h, w) = dims[0];
        if dims.iter().any(|&(n2, _, h2, w2)| (n2, h2, w2) != (n, h, w)) {
            return Err(Error::Shape(format!("concat mismatch {dims:?}")));
        }
        let chans: Vec<usize> = dims.iter().map(|d| d.1).collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        {
            let od = out.data_mut();
            for s in 0..n {
                let mut off = 0;
                for (&p, &c) in parts.iter().zip(&chans) {
                    let src = &self.value(p).data()[s * c * plane..(s + 1) * c * plane];
                    let base = (s * total + off) * plane;
                    od[base..base + c * plane].copy_from_slice(src);
                    off += c;
                }
            }
        }
        Ok(self.push_op(
            out,
            parts,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut off = 0;
                let mut res = Vec::with_capacity(chans.len());
                for (&c, &need) in chans.iter().zip(needs) {
                    if need {
                        let mut part = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let base = (s * total + off) * plane;
                            part.extend_from_slice(&gd[base..base + c * plane]);
                        }
                        res.push(Some(Tensor::new(vec![n, c, h, w], part).unwrap()));
                    } else {
                        res.push(None);
                    }
                    off += c;
                }
                res
            }),
        ))
    }

    /// Replicate-pad the spatial borders of an NCHW tensor.
    pub fn pad_replicate(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if bottom == 0 && right == 0 {
            return Ok(x);
        }
        let (h2, w2) = (h + bottom, w + right);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                let sy = y.min(h - 1);
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = xd[(p * h + sy) * w + xx.min(w - 1)];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        let sy = y.min(h - 1);
                        for xx in 0..w2 {
                            dx[(p * h + sy) * w + xx.min(w - 1)] += gd[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx).unwrap())]
            }),
        ))
    }

    /// Keep the top-left `h×w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, h0, w0) = self.value(x).dims4()?;
        if h > h0 || w > w0 {
            return Err(Error::Shape(format!("crop {h}x{w} from {h0}x{w0}")));
        }
        if (h, w) == (h0, w0) {
            return Ok(x);
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let base = (p * h0 + y) * w0;
                out.extend_from_slice(&xd[base..base + w]);
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * c * h0 * w0];
                for p in 0..n * c {
                    for y in 0..h {
                        let base = (p * h0 + y) * w0;
                        dx[base..base + w].copy_from_slice(&gd[(p * h + y) * w..(p * h + y + 1) * w]);
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h0, w0], dx).unwrap())]
            }),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if factor == 1 {
            return Ok(x);
        }
        let (h2, w2) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = xd[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dx[(p * h + y / factor) * w + xx / factor] += gd[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx).unwrap())]
            }),
        ))
    }

    /// Mean over the spatial axes, `N×C×H×W → N×C×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| xd[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![n, c, 1, 1], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(n * c * plane);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx).unwrap())]
            }),
        ))
    }

    /// `x[n,c,:,:] * s[n,c]` with `s` shaped `N×C×1×1`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).dims4()? != (n, c, 1, 1) {
            return Err(Error::Shape("channel scale shape".into()));
        }
        let plane = h * w;
        let xv = self.value_rc(x);
        let sv = self.value_rc(s);
        let mut out = xv.as_ref().clone();
        for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let f = sv.data()[p];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push_op(
            out,
            &[x, s],
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for (p, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let f = sv.data()[p];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    dx
                });
                let ds = needs[1].then(|| {
                    let d: Vec<f64> = (0..n * c)
                        .map(|p| {
                            let r = p * plane..(p + 1) * plane;
                            gd[r.clone()].iter().zip(&xv.data()[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    Tensor::new(vec![n, c, 1, 1], d).unwrap()
                });
                vec![dx, ds]
            }),
        ))
    }

    // ---- activations ----------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value_rc(x);
        let out = xv.map(|v| if v > 0.0 { v } else { slope * v });
        self.push_op(
            out,
            &[x],
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&xv, |gv, v| if v > 0.0 { gv } else { slope * gv }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(logistic);
        let y = out.clone();
        self.push_op(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(g.zip_map(&y, |gv, s| gv * s * (1.0 - s)))]),
        )
    }

    // ---- convolutions ---------------------------------------------------

    /// 2-D convolution. `w` is `Co×C×k×k`, `b` is `Co`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, k, k2) = self.value(w).dims4()?;
        if ci != c || k != k2 || self.value(b).len() != co {
            return Err(Error::Shape(format!(
                "conv2d input {:?} weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("kernel {k} does not fit {h}x{wd}")))?;
        let (ho, wo) = (geom.out_height, geom.out_width);
        let (xv, wv, bv) = (self.value_rc(x), self.value_rc(w), self.value_rc(b));
        let in_per = c * h * wd;
        let out_per = co * ho * wo;
        let mut out = vec![0.0; n * out_per];
        out.par_chunks_mut(out_per).enumerate().for_each(|(s, o)| {
            let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
            geom.im2col(&xv.data()[s * in_per..(s + 1) * in_per], &mut cols);
            for (oc, chunk) in o.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bv.data()[oc]);
            }
            gemm(
                Mat::new(wv.data(), co, geom.col_rows()),
                Mat::new(&cols, geom.col_rows(), geom.col_cols()),
                o,
                1.0,
            );
        });
        let out = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push_op(
            out,
            &[x, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let gs = &gd[s * out_per..(s + 1) * out_per];
                        let gmat = Mat::new(gs, co, ho * wo);
                        let dx = needs[0].then(|| {
                            let mut dcols = vec![0.0; geom.col_rows() * geom.col_cols()];
                            gemm(Mat::new(wv.data(), co, geom.col_rows()).t(), gmat, &mut dcols, 0.0);
                            let mut dx = vec![0.0; in_per];
                            geom.col2im(&dcols, &mut dx);
                            dx
                        });
                        let dw = needs[1].then(|| {
                            let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
                            geom.im2col(&xv.data()[s * in_per..(s + 1) * in_per], &mut cols);
                            let mut dw = vec![0.0; co * geom.col_rows()];
                            gemm(gmat, Mat::new(&cols, geom.col_rows(), geom.col_cols()).t(), &mut dw, 0.0);
                            dw
                        });
                        (dx, dw)
                    })
                    .collect();
                let dx = needs[0].then(|| {
                    let mut dx = Vec::with_capacity(n * in_per);
                    for (d, _) in &per_sample {
                        dx.extend_from_slice(d.as_ref().unwrap());
                    }
                    Tensor::new(vec![n, c, h, wd], dx).unwrap()
                });
                let dw = needs[1].then(|| {
                    let mut acc = vec![0.0; co * c * k * k];
                    for (_, d) in &per_sample {
                        for (a, v) in acc.iter_mut().zip(d.as_ref().unwrap()) {
                            *a += v;
                        }
                    }
                    Tensor::new(vec![co, c, k, k], acc).unwrap()
                });
                let db = needs[2].then(|| channel_sums(gd, n, co, ho * wo));
                vec![dx, dw, db]
            }),
        ))
    }

    /// Transposed 2-D convolution. `w` is `Ci×Co×k×k`, `b` is `Co`; output
    /// side is `(in-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (wci, co, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 || self.value(b).len() != co {
            return Err(Error::Shape(format!(
                "conv_transpose2d input {:?} weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let shape_err = || Error::Shape(format!("deconv geometry {h}x{wd} k{k} s{stride} p{pad}"));
        let ho = deconv_out_len(h, k, stride, pad).ok_or_else(shape_err)?;
        let wo = deconv_out_len(wd, k, stride, pad).ok_or_else(shape_err)?;
        // the adjoint convolution maps the output grid back onto the input grid
        let geom = ConvGeom::new(co, ho, wo, k, stride, pad).ok_or_else(shape_err)?;
        if (geom.out_height, geom.out_width) != (h, wd) {
            return Err(shape_err());
        }
        let (xv, wv, bv) = (self.value_rc(x), self.value_rc(w), self.value_rc(b));
        let in_per = ci * h * wd;
        let out_per = co * ho * wo;
        let mut out = vec![0.0; n * out_per];
        out.par_chunks_mut(out_per).enumerate().for_each(|(s, o)| {
            let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
            gemm(
                Mat::new(wv.data(), ci, geom.col_rows()).t(),
                Mat::new(&xv.data()[s * in_per..(s + 1) * in_per], ci, h * wd),
                &mut cols,
                0.0,
            );
            geom.col2im(&cols, o);
            for (oc, chunk) in o.chunks_mut(ho * wo).enumerate() {
                let bias = bv.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        });
        let out = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push_op(
            out,
            &[x, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let mut gcols = vec![0.0; geom.col_rows() * geom.col_cols()];
                        geom.im2col(&gd[s * out_per..(s + 1) * out_per], &mut gcols);
                        let gmat = Mat::new(&gcols, geom.col_rows(), geom.col_cols());
                        let dx = needs[0].then(|| {
                            let mut dx = vec![0.0; in_per];
                            gemm(Mat::new(wv.data(), ci, geom.col_rows()), gmat, &mut dx, 0.0);
                            dx
                        });
                        let dw = needs[1].then(|| {
                            let mut dw = vec![0.0; ci * geom.col_rows()];
                            gemm(
                                Mat::new(&xv.data()[s * in_per..(s + 1) * in_per], ci, h * wd),
                                gmat.t(),
                                &mut dw,
                                0.0,
                            );
                            dw
                        });
                        (dx, dw)
                    })
                    .collect();
                let dx = needs[0].then(|| {
                    let mut dx = Vec::with_capacity(n * in_per);
                    for (d, _) in &per_sample {
                        dx.extend_from_slice(d.as_ref().unwrap());
                    }
                    Tensor::new(vec![n, ci, h, wd], dx).unwrap()
                });
                let dw = needs[1].then(|| {
                    let mut acc = vec![0.0; ci * co * k * k];
                    for (_, d) in &per_sample {
                        for (a, v) in acc.iter_mut().zip(d.as_ref().unwrap()) {
                            *a += v;
                        }
                    }
                    Tensor::new(vec![ci, co, k, k], acc).unwrap()
                });
                let db = needs[2].then(|| channel_sums(gd, n, co, ho * wo));
                vec![dx, dw, db]
            }),
        ))
    }

    // ---- normalization --------------------------------------------------

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape("batch norm affine size".into()));
        }
        let plane = h * w;
        let m = (n * plane) as f64;
        let xv = self.value_rc(x);
        let xd = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for smp in 0..n {
                let base = (smp * c + ch) * plane;
                s += xd[base..base + plane].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for smp in 0..n {
                let base = (smp * c + ch) * plane;
                v += xd[base..base + plane].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value_rc(gamma);
        let bv = self.value_rc(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let unbiased = if m > 1.0 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for smp in 0..n {
                    for ch in 0..c {
                        let base = (smp * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for ch in 0..c {
                        let gam = gv.data()[ch];
                        // sums of dxhat and dxhat*xhat are gamma*dbeta and gamma*dgamma
                        let sum_d = gam * dbeta[ch];
                        let sum_dx = gam * dgamma[ch];
                        for smp in 0..n {
                            let base = (smp * c + ch) * plane;
                            for i in base..base + plane {
                                let dxhat = gd[i] * gam;
                                dx[i] = inv_std[ch] / m * (m * dxhat - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    }
                    Tensor::new(vec![n, c, h, w], dx).unwrap()
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::new(vec![c], dgamma.clone()).unwrap()),
                    needs[2].then(|| Tensor::new(vec![c], dbeta.clone()).unwrap()),
                ]
            }),
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batch norm running stats size".into()));
        }
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xv = self.value_rc(x);
        let gv = self.value_rc(gamma);
        let bv = self.value_rc(beta);
        let mut out = xv.as_ref().clone();
        for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = p % c;
            let (s, t) = (gv.data()[ch] * inv_std[ch], bv.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = s * (*v - mean[ch]) + t);
        }
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = g.clone();
                for (p, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let ch = p % c;
                    let base = p * plane;
                    for (j, v) in chunk.iter_mut().enumerate() {
                        let xhat = (xv.data()[base + j] - mean[ch]) * inv_std[ch];
                        dgamma[ch] += gd[base + j] * xhat;
                        dbeta[ch] += gd[base + j];
                        *v *= gv.data()[ch] * inv_std[ch];
                    }
                }
                vec![
                    needs[0].then_some(dx),
                    needs[1].then(|| Tensor::new(vec![c], dgamma).unwrap()),
                    needs[2].then(|| Tensor::new(vec![c], dbeta).unwrap()),
                ]
            }),
        ))
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize) -> Tensor {
    let mut acc = vec![0.0; c];
    for s in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *a += g[base..base + plane].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], acc).unwrap()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(out * probe))/d(input_i) against central differences for
    /// every input element.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ins: &[Tensor], probe: Option<&Tensor>| -> (f64, Tensor, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            let ov = g.value(out).clone();
            let probe = probe.cloned().unwrap_or_else(|| ov.map(|_| 0.0));
            let pv = g.constant(probe.clone());
            let prod = g.push_op(
                Tensor::scalar(ov.zip_map(&probe, |a, b| a * b).sum()),
                &[out, pv],
                Box::new(move |up, _| vec![Some(probe.scale(up.data()[0])), None]),
            );
            let s = g.value(prod).data()[0];
            let grads = g.backward(prod);
            (s, ov, vars.iter().map(|v| grads.get(*v).cloned()).collect())
        };
        let (_, ov, _) = eval(&inputs, None);
        let probe = rand_tensor(&mut rng, ov.shape());
        let (_, _, grads) = eval(&inputs, Some(&probe));
        let h = 1e-6;
        for (ii, inp) in inputs.iter().enumerate() {
            let an = grads[ii].as_ref().expect("gradient");
            for j in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[ii].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ii].data_mut()[j] -= h;
                let num = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
                let a = an.data()[j];
                assert!(
                    (a - num).abs() <= 1e-6 * (1.0 + a.abs().max(num.abs())),
                    "input {ii} elem {j}: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], 2, 1).unwrap());
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 4, 4]);
        let b = rand_tensor(&mut rng, &[2]);
        check(vec![x, w, b], |g, v| g.conv_transpose2d(v[0], v[1], v[2], 2, 1).unwrap());
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 2, 8, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 4, 4]);
        let y = rand_tensor(&mut rng, &[1, 3, 4, 3]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let zb = g.constant(Tensor::zeros(&[3]));
        let conv = g.conv2d(xv, wv, zb, 2, 1).unwrap();
        let lhs: f64 = g.value(conv).zip_map(&y, |a, b| a * b).sum();
        let yv = g.constant(y);
        let zb2 = g.constant(Tensor::zeros(&[2]));
        let back = g.conv_transpose2d(yv, wv, zb2, 2, 1).unwrap();
        let rhs: f64 = g.value(back).zip_map(&x, |a, b| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2, 3, 2]);
        let gam = rand_tensor(&mut rng, &[2]);
        let bet = rand_tensor(&mut rng, &[2]);
        check(vec![x.clone(), gam.clone(), bet.clone()], |g, v| {
            g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
        });
        check(vec![x, gam, bet], |g, v| {
            g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
                .unwrap()
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let s = rand_tensor(&mut rng, &[2, 2, 1, 1]);
        check(vec![a.clone(), b.clone()], |g, v| g.concat_channels(&[v[0], v[1]]).unwrap());
        check(vec![a.clone()], |g, v| g.pad_replicate(v[0], 2, 1).unwrap());
        check(vec![a.clone()], |g, v| g.crop(v[0], 2, 1).unwrap());
        check(vec![a.clone()], |g, v| g.upsample_nearest(v[0], 2).unwrap());
        check(vec![a.clone()], |g, v| g.global_avg_pool(v[0]).unwrap());
        check(vec![a.clone(), s], |g, v| g.scale_channels(v[0], v[1]).unwrap());
        check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
        check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
        check(vec![a.clone(), a.map(|x| x * 0.3)], |g, v| {
            g.weighted_sum(&[(v[0], 0.7), (v[1], -2.0)]).unwrap()
        });
        check(vec![a], |g, v| g.affine(v[0], 3.0, 1.0));
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let p = g.param(Tensor::full(&[1, 1, 2, 2], 2.0));
        let s = g.add(c, p).unwrap();
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
    }
}
