use rand::Rng;

use super::graph::{grad_slot, Node, Op};
use super::{Elem, Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

fn im2col<E: Elem>(input: &[E], g: &ConvGeom) -> Vec<E> {
    let n = g.positions();
    let mut cols = vec![E::zero(); g.patch() * n];
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &input[(c * g.height + iy as usize) * g.width..][..g.width];
                    let dst_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<E: Elem>(cols: &[E], g: &ConvGeom, out: &mut [E]) {
    let n = g.positions();
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let d = &mut out[base + ix as usize];
                            *d = *d + src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source index pairs and weights for one axis of a bilinear upsample
/// (half-pixel centres, edge clamped).
#[derive(Debug, Clone)]
pub(crate) struct UpsampleTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
    pub src_len: usize,
}

impl UpsampleTable {
    fn new(src_len: usize, factor: usize) -> Self {
        let out_len = src_len * factor;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut w_hi = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let l = (src.floor() as usize).min(src_len - 1);
            let h = (l + 1).min(src_len - 1);
            lo.push(l);
            hi.push(h);
            w_hi.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self {
            lo,
            hi,
            w_hi,
            src_len,
        }
    }
}

impl<E: Elem> Graph<E> {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad(*v))
    }

    /// Shape-preserving 2-D cross-correlation: input `C×H×W`, kernel
    /// `O×C×K×K` (K odd), bias `O`, padding `(K-1)/2`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let k = self.dims(kernel).get(2).copied().unwrap_or(0);
        if k % 2 == 0 || padding != (k.saturating_sub(1)) / 2 {
            return Err(Error::Dimension(format!(
                "conv2d needs odd K and padding (K-1)/2, got K={k} padding={padding}"
            )));
        }
        self.conv2d_strided(input, kernel, bias, 1)
    }

    /// Convolution with `padding = (K-1)/2` and the given stride. With
    /// stride 2 and even spatial dims the output is exactly half size.
    pub fn conv2d_strided(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (id, kd, bd) = (self.dims(input), self.dims(kernel), self.dims(bias));
        if id.len() != 3 || kd.len() != 4 || bd.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d expects C×H×W, O×C×K×K, O; got {id:?}, {kd:?}, {bd:?}"
            )));
        }
        if kd[1] != id[0] || kd[2] != kd[3] || bd[0] != kd[0] || kd[2] % 2 == 0 || stride == 0 {
            return Err(Error::Dimension(format!(
                "conv2d shape mismatch: input {id:?}, kernel {kd:?}, bias {bd:?}, stride {stride}"
            )));
        }
        let kernel_size = kd[2];
        let pad = (kernel_size - 1) / 2;
        let geom = ConvGeom {
            channels: id[0],
            height: id[1],
            width: id[2],
            out_channels: kd[0],
            kernel: kernel_size,
            stride,
            pad,
            out_height: (id[1] + 2 * pad - kernel_size) / stride + 1,
            out_width: (id[2] + 2 * pad - kernel_size) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let n = geom.positions();
        let patch = geom.patch();
        let mut out = vec![E::zero(); geom.out_channels * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            let b = self.value(bias)[o];
            row.iter_mut().for_each(|v| *v = b);
        }
        E::gemm(
            geom.out_channels,
            patch,
            n,
            E::one(),
            self.value(kernel),
            (patch as isize, 1),
            &cols,
            (n as isize, 1),
            E::one(),
            &mut out,
            (n as isize, 1),
        );
        let needs = self.any_grad(&[input, kernel, bias]);
        // cols are only needed for the kernel gradient
        let cols = if self.needs_grad(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            vec![geom.out_channels, geom.out_height, geom.out_width],
            out,
            needs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(E::zero())).collect();
        let needs = self.needs_grad(x);
        self.push(self.dims(x).to_vec(), out, needs, Op::Relu(x))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(self.dims(a).to_vec(), out, needs, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(self.dims(a).to_vec(), out, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: E) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let needs = self.needs_grad(x);
        self.push(self.dims(x).to_vec(), out, needs, Op::Scale(x, s))
    }

    /// Bilinear upsampling of `C×H×W` by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 3 || factor == 0 {
            return Err(Error::Dimension(format!(
                "upsample expects C×H×W and factor ≥ 1, got {d:?} ×{factor}"
            )));
        }
        let (c, h, w) = (d[0], d[1], d[2]);
        let rows = UpsampleTable::new(h, factor);
        let cols = UpsampleTable::new(w, factor);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x);
        let mut out = vec![E::zero(); c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, wy) = (rows.lo[oy], rows.hi[oy], rows.w_hi[oy]);
                for ox in 0..ow {
                    let (x0, x1, wx) = (cols.lo[ox], cols.hi[ox], cols.w_hi[ox]);
                    let top = plane[y0 * w + x0].widen() * (1.0 - wx) + plane[y0 * w + x1].widen() * wx;
                    let bot = plane[y1 * w + x0].widen() * (1.0 - wx) + plane[y1 * w + x1].widen() * wx;
                    out[(ch * oh + oy) * ow + ox] = E::lit(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(vec![c, oh, ow], out, needs, Op::Upsample { input: x, rows, cols }))
    }

    /// Mean over the spatial dims: `C×H×W → C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 3 {
            return Err(Error::Dimension(format!("global_avg_pool expects C×H×W, got {d:?}")));
        }
        let hw = d[1] * d[2];
        let out = self
            .value(x)
            .chunks(hw)
            .map(|p| E::lit(p.iter().map(|v| v.widen()).sum::<f64>() / hw as f64))
            .collect();
        let needs = self.needs_grad(x);
        Ok(self.push(vec![d[0]], out, needs, Op::GlobalAvgPool(x)))
    }

    /// `weight (O×C) · input (C) + bias (O)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (id, wd, bd) = (self.dims(input), self.dims(weight), self.dims(bias));
        let rows = match id.len() {
            1 => 1,
            2 => id[0],
            _ => 0,
        };
        if rows == 0 || wd.len() != 2 || bd.len() != 1 || wd[1] != id[id.len() - 1] || bd[0] != wd[0] {
            return Err(Error::Dimension(format!(
                "linear shape mismatch: input {id:?}, weight {wd:?}, bias {bd:?}"
            )));
        }
        let out_dims = if id.len() == 1 { vec![wd[0]] } else { vec![rows, wd[0]] };
        let (o, c) = (wd[0], wd[1]);
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let mut out = Vec::with_capacity(rows * o);
        for xr in x.chunks(c) {
            for r in 0..o {
                let dot: f64 = w[r * c..(r + 1) * c]
                    .iter()
                    .zip(xr)
                    .map(|(a, b)| a.widen() * b.widen())
                    .sum();
                out.push(E::lit(dot + b[r].widen()));
            }
        }
        let needs = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out_dims, out, needs, Op::Linear { input, weight, bias }))
    }

    /// Inverted channel dropout on `C×H×W`. In training mode each channel is
    /// zeroed with probability `rate` and survivors are scaled by
    /// `1/(1-rate)`; in eval mode (or rate 0) the input is returned as is.
    pub fn channel_dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let d = self.dims(x).to_vec();
        if d.len() != 3 {
            return Err(Error::Dimension(format!("channel_dropout expects C×H×W, got {d:?}")));
        }
        let keep = E::lit(1.0 / (1.0 - rate));
        let scale: Vec<E> = (0..d[0])
            .map(|_| if rng.gen::<f64>() < rate { E::zero() } else { keep })
            .collect();
        let hw = d[1] * d[2];
        let out = self
            .value(x)
            .chunks(hw)
            .zip(&scale)
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let needs = self.needs_grad(x);
        Ok(self.push(d, out, needs, Op::ChannelScale { input: x, scale }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v.widen()).sum();
        let needs = self.needs_grad(x);
        self.push(vec![1], vec![E::lit(s)], needs, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().map(|v| v.widen()).sum();
        let needs = self.needs_grad(x);
        self.push(vec![1], vec![E::lit(s / n)], needs, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let n = super::check_dims(dims)?;
        if n != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} → {dims:?}",
                self.dims(x)
            )));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(dims.to_vec(), out, needs, Op::Reshape(x)))
    }

    /// Push `g` (the gradient of `node`) into its inputs' gradient slots.
    pub(crate) fn propagate(&self, node: &Node<E>, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let n = geom.positions();
                let patch = geom.patch();
                if let Some(gb) = grad_slot(grads, nodes, *bias) {
                    for (o, row) in g.chunks(n).enumerate() {
                        let s: f64 = row.iter().map(|v| v.widen()).sum();
                        gb[o] = gb[o] + E::lit(s);
                    }
                }
                if let Some(gk) = grad_slot(grads, nodes, *kernel) {
                    E::gemm(
                        geom.out_channels,
                        n,
                        patch,
                        E::one(),
                        g,
                        (n as isize, 1),
                        cols,
                        (1, n as isize),
                        E::one(),
                        gk,
                        (patch as isize, 1),
                    );
                }
                if nodes[input.0].needs_grad {
                    let mut dcols = vec![E::zero(); patch * n];
                    E::gemm(
                        patch,
                        geom.out_channels,
                        n,
                        E::one(),
                        &nodes[kernel.0].value,
                        (1, patch as isize),
                        g,
                        (n as isize, 1),
                        E::zero(),
                        &mut dcols,
                        (n as isize, 1),
                    );
                    let gi = grad_slot(grads, nodes, *input).expect("input needs grad");
                    col2im_add(&dcols, geom, gi);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > E::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = grad_slot(grads, nodes, *v) {
                        gv.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, &gv), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * o;
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    for ((d, &gv), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *s);
                }
            }
            Op::Upsample { input, rows, cols } => {
                let d = &nodes[input.0].dims;
                let (h, w) = (d[1], d[2]);
                debug_assert_eq!(rows.src_len, h);
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                if let Some(gx) = grad_slot(grads, nodes, *input) {
                    for ch in 0..d[0] {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, wy) = (rows.lo[oy], rows.hi[oy], rows.w_hi[oy]);
                            for ox in 0..ow {
                                let (x0, x1, wx) = (cols.lo[ox], cols.hi[ox], cols.w_hi[ox]);
                                let gv = g[(ch * oh + oy) * ow + ox].widen();
                                let add = |p: &mut E, f: f64| *p = *p + E::lit(gv * f);
                                add(&mut plane[y0 * w + x0], (1.0 - wy) * (1.0 - wx));
                                add(&mut plane[y0 * w + x1], (1.0 - wy) * wx);
                                add(&mut plane[y1 * w + x0], wy * (1.0 - wx));
                                add(&mut plane[y1 * w + x1], wy * wx);
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let d = &nodes[x.0].dims;
                let hw = d[1] * d[2];
                let inv = E::lit(1.0 / hw as f64);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    for (plane, &gv) in gx.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|p| *p = *p + gv * inv);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let wd = &nodes[weight.0].dims;
                let (o, c) = (wd[0], wd[1]);
                let xv = &nodes[input.0].value;
                let wv = &nodes[weight.0].value;
                if let Some(gb) = grad_slot(grads, nodes, *bias) {
                    for gr in g.chunks(o) {
                        gb.iter_mut().zip(gr).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                if let Some(gw) = grad_slot(grads, nodes, *weight) {
                    for (xr, gr) in xv.chunks(c).zip(g.chunks(o)) {
                        for (row, &gv) in gw.chunks_mut(c).zip(gr) {
                            row.iter_mut().zip(xr).for_each(|(d, &x)| *d = *d + gv * x);
                        }
                    }
                }
                if let Some(gx) = grad_slot(grads, nodes, *input) {
                    for (gxr, gr) in gx.chunks_mut(c).zip(g.chunks(o)) {
                        for (j, d) in gxr.iter_mut().enumerate() {
                            let s: f64 = gr
                                .iter()
                                .enumerate()
                                .map(|(r, gv)| gv.widen() * wv[r * c + j].widen())
                                .sum();
                            *d = *d + E::lit(s);
                        }
                    }
                }
            }
            Op::ChannelScale { input, scale } => {
                let d = &nodes[input.0].dims;
                let hw = d[1] * d[2];
                if let Some(gx) = grad_slot(grads, nodes, *input) {
                    for ((plane, gp), &s) in gx.chunks_mut(hw).zip(g.chunks(hw)).zip(scale) {
                        plane.iter_mut().zip(gp).for_each(|(p, &v)| *p = *p + v * s);
                    }
                }
            }
            Op::CrossEntropy { logits, cache } => {
                if let Some(gl) = grad_slot(grads, nodes, *logits) {
                    cache.backward(g[0], gl);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                let inv = E::lit(1.0 / nodes[x.0].value.len() as f64);
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0] * inv);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
    }
}
