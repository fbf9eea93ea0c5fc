//! A small tape-based reverse-mode differentiation graph.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and `backward` is a single reverse sweep. Only the
//! operations the detector needs are provided.

use std::collections::HashMap;

use crate::geometry::{BilinearTaps, Point};
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `geom` describes the forward convolution whose adjoint this is: its
    /// input is our output.
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    UpsampleNearest(Var, usize),
    UpsampleBilinear2x(Var),
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    SamplePoints {
        feat: Var,
        points: Var,
        stride: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An evaluation tape. Values are computed eagerly as nodes are added.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A named trainable leaf. Binding the same name twice returns the
    /// first binding, so shared layers accumulate a single gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.variable(t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    /// Names and handles of every bound parameter.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight is (Cout, Cin, k, k)");
        assert_eq!(ws[1], cin, "conv weight expects {} input channels, got {cin}", ws[1]);
        let (cout, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let n = geom.col_cols();
        let mut out = vec![0.0; cout * n];
        {
            let xv = self.value(x).data();
            let unfolded;
            let cols: &[f64] = if geom.is_pointwise() {
                xv
            } else {
                unfolded = im2col(xv, &geom);
                &unfolded
            };
            gemm(cout, geom.col_rows(), n, self.value(w).data(), false, cols, false, &mut out, 0.0);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n);
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_vec(&[cout, geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, b, geom },
            needs,
        )
    }

    /// Transposed convolution; weight is `(Cin, Cout, k, k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "transposed conv weight is (Cin, Cout, k, k)");
        assert_eq!(ws[0], cin);
        let (cout, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad);
        assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let n = h * wd;
        let mut cols = vec![0.0; geom.col_rows() * n];
        gemm(
            geom.col_rows(),
            cin,
            n,
            self.value(w).data(),
            true,
            self.value(x).data(),
            false,
            &mut cols,
            0.0,
        );
        let mut out = col2im(&cols, &geom);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_vec(&[cout, oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::from_vec(v.shape(), out);
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Var {
        let mut t = self.value(x).clone();
        t.scale_inplace(f);
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, f), needs)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let t = crate::geometry::upsample_nearest(self.value(x), factor);
        let needs = self.needs(x);
        self.push(t, Op::UpsampleNearest(x, factor), needs)
    }

    /// 2x bilinear upsampling with half-pixel alignment and edge clamping.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let ty = bilinear2x_taps(h);
        let tx = bilinear2x_taps(w);
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for k in 0..c {
            let plane = &src[k * h * w..(k + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
                    let bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
                    out[(k * oh + oy) * ow + ox] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[c, oh, ow], out), Op::UpsampleBilinear2x(x), needs)
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let (c, ih, iw) = self.value(x).dims3();
        assert!(y0 + h <= ih && x0 + w <= iw, "crop window out of range");
        let t = crate::geometry::crop_tensor(self.value(x), y0, x0, h, w, c);
        let needs = self.needs(x);
        self.push(t, Op::Crop { x, y0, x0 }, needs)
    }

    /// Bilinear lookup of `(C, H, W)` features at `(M, 2)` image points
    /// (`x, y` per row), giving `(M, C)`.
    pub fn sample_points(&mut self, feat: Var, points: Var, stride: f64) -> Var {
        let (c, h, w) = self.value(feat).dims3();
        let (m, two) = self.value(points).dims2();
        assert_eq!(two, 2);
        let fv = self.value(feat).data();
        let pv = self.value(points).data();
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let taps = BilinearTaps::new(Point::new(pv[2 * i], pv[2 * i + 1]), stride, h, w);
            let row = &mut out[i * c..(i + 1) * c];
            for (ch, r) in row.iter_mut().enumerate() {
                let plane = &fv[ch * h * w..(ch + 1) * h * w];
                *r = (0..4).map(|t| taps.weights[t] * plane[taps.offsets[t]]).sum();
            }
        }
        let needs = self.needs(feat) || self.needs(points);
        self.push(
            Tensor::from_vec(&[m, c], out),
            Op::SamplePoints {
                feat,
                points,
                stride,
            },
            needs,
        )
    }

    /// `x (M, Din) * w^T + b` with `w` stored `(Dout, Din)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (m, din) = self.value(x).dims2();
        let (dout, wdin) = self.value(w).dims2();
        assert_eq!(din, wdin, "linear layer expects {wdin} inputs, got {din}");
        let mut out = vec![0.0; m * dout];
        gemm(m, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_vec(&[m, dout], out), Op::Linear { x, w, b }, needs)
    }

    /// Multiplies elementwise by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), mask.len());
        let out = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::from_vec(v.shape(), out);
        let needs = self.needs(x);
        self.push(t, Op::Dropout { x, mask }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&[m, total], out), Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&[rows, c], out), Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Reverse sweep from the given output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape mismatch");
            self.accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let cout = out.shape()[0];
                let n = geom.col_cols();
                let kk = geom.col_rows();
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    self.accumulate(grads, b, channel_sums(g.data(), cout, n));
                }
                let xv = self.value(x).data();
                if self.needs(w) {
                    let unfolded;
                    let cols: &[f64] = if geom.is_pointwise() {
                        xv
                    } else {
                        unfolded = im2col(xv, &geom);
                        &unfolded
                    };
                    let mut dw = vec![0.0; cout * kk];
                    gemm(cout, n, kk, g.data(), false, cols, true, &mut dw, 0.0);
                    self.accumulate(grads, w, Tensor::from_vec(self.value(w).shape(), dw));
                }
                if self.needs(x) {
                    let mut dcols = vec![0.0; kk * n];
                    gemm(kk, cout, n, self.value(w).data(), true, g.data(), false, &mut dcols, 0.0);
                    let dx = if geom.is_pointwise() {
                        dcols
                    } else {
                        col2im(&dcols, &geom)
                    };
                    self.accumulate(grads, x, Tensor::from_vec(self.value(x).shape(), dx));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let cout = out.shape()[0];
                let cin = self.value(x).shape()[0];
                let n = geom.col_cols();
                let kk = geom.col_rows();
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    self.accumulate(grads, b, channel_sums(g.data(), cout, geom.in_h * geom.in_w));
                }
                let gcols = im2col(g.data(), &geom);
                if self.needs(w) {
                    let mut dw = vec![0.0; cin * kk];
                    gemm(cin, n, kk, self.value(x).data(), false, &gcols, true, &mut dw, 0.0);
                    self.accumulate(grads, w, Tensor::from_vec(self.value(w).shape(), dw));
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; cin * n];
                    gemm(cin, kk, n, self.value(w).data(), false, &gcols, false, &mut dx, 0.0);
                    self.accumulate(grads, x, Tensor::from_vec(self.value(x).shape(), dx));
                }
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gg, &o)| if o > 0.0 { gg } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, f) => {
                let mut d = g.clone();
                d.scale_inplace(*f);
                self.accumulate(grads, *x, d);
            }
            Op::UpsampleNearest(x, factor) => {
                let (c, h, w) = self.value(*x).dims3();
                let (oh, ow) = (h * factor, w * factor);
                let mut d = vec![0.0; c * h * w];
                let gd = g.data();
                for k in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[(k * h + y / factor) * w + xx / factor] += gd[(k * oh + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::UpsampleBilinear2x(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let ty = bilinear2x_taps(h);
                let tx = bilinear2x_taps(w);
                let (oh, ow) = (2 * h, 2 * w);
                let gd = g.data();
                let mut d = vec![0.0; c * h * w];
                for k in 0..c {
                    let plane = &mut d[k * h * w..(k + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let go = gd[(k * oh + oy) * ow + ox];
                            plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * go;
                            plane[y0 * w + x1] += (1.0 - fy) * fx * go;
                            plane[y1 * w + x0] += fy * (1.0 - fx) * go;
                            plane[y1 * w + x1] += fy * fx * go;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::Crop { x, y0, x0 } => {
                let (c, h, w) = self.value(*x).dims3();
                let (_, ch, cw) = g.dims3();
                let mut d = vec![0.0; c * h * w];
                let gd = g.data();
                for k in 0..c {
                    for y in 0..ch {
                        let dst = (k * h + y0 + y) * w + x0;
                        d[dst..dst + cw].copy_from_slice(&gd[(k * ch + y) * cw..(k * ch + y + 1) * cw]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::SamplePoints {
                feat,
                points,
                stride,
            } => {
                let (c, h, w) = self.value(*feat).dims3();
                let fv = self.value(*feat).data();
                let pv = self.value(*points).data();
                let m = pv.len() / 2;
                let gd = g.data();
                let want_f = self.needs(*feat);
                let want_p = self.needs(*points);
                let mut df = if want_f { vec![0.0; c * h * w] } else { Vec::new() };
                let mut dp = vec![0.0; 2 * m];
                for i in 0..m {
                    let taps = BilinearTaps::new(Point::new(pv[2 * i], pv[2 * i + 1]), *stride, h, w);
                    let grow = &gd[i * c..(i + 1) * c];
                    for (ch, &go) in grow.iter().enumerate() {
                        let base = ch * h * w;
                        for t in 0..4 {
                            if want_f {
                                df[base + taps.offsets[t]] += taps.weights[t] * go;
                            }
                            if want_p {
                                let q = fv[base + taps.offsets[t]];
                                dp[2 * i] += taps.dw_dx[t] * q * go;
                                dp[2 * i + 1] += taps.dw_dy[t] * q * go;
                            }
                        }
                    }
                }
                if want_f {
                    self.accumulate(grads, *feat, Tensor::from_vec(&[c, h, w], df));
                }
                if want_p {
                    self.accumulate(grads, *points, Tensor::from_vec(&[m, 2], dp));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, din) = self.value(*x).dims2();
                let dout = self.value(*w).dims2().0;
                if self.needs(*b) {
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[dout], db));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, m, din, g.data(), true, self.value(*x).data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::from_vec(&[dout, din], dw));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * din];
                    gemm(m, dout, din, g.data(), false, self.value(*w).data(), false, &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::from_vec(&[m, din], dx));
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims2().1;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * pc);
                        for i in 0..m {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[m, pc], d));
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.dims2().1;
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).dims2().0;
                    if self.needs(p) {
                        let d = g.data()[row * c..(row + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(&[r, c], d));
                    }
                    row += r;
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in out.chunks_mut(plane).zip(bias) {
        for o in chunk {
            *o += b;
        }
    }
}

fn channel_sums(g: &[f64], channels: usize, plane: usize) -> Tensor {
    Tensor::from_vec(
        &[channels],
        g.chunks(plane).map(|c| c.iter().sum()).collect(),
    )
}

/// Per output index: `(i0, i1, frac)` for half-pixel 2x upsampling.
fn bilinear2x_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
