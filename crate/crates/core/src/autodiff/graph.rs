use std::sync::Arc;

use super::gemm::{gemm, MatRef};
use super::resample::{Kernel, ResamplePlan};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    Resample { x: Var, plan: Arc<ResamplePlan> },
    GlobalAvgPool { x: Var },
    ChannelMax { x: Var, argmax: Vec<usize> },
    ChannelAvg { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    Abs { x: Var },
    Scale { x: Var, k: f64 },
    AddScalar { x: Var },
    External { x: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of recorded operations. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no path connects it to the output.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("shape recorded"))
    }

    /// Gradient of `v`, zeros when disconnected.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn pad4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(Error::Shape(format!("rank > 4: {shape:?}")));
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

fn strides4(d: [usize; 4]) -> [usize; 4] {
    [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1]
}

/// Broadcast layout of a binary elementwise op.
struct Broadcast {
    out: [usize; 4],
    sa: [usize; 4],
    sb: [usize; 4],
    shape: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("rank mismatch {a:?} vs {b:?}")));
        }
        let (da, db) = (pad4(a)?, pad4(b)?);
        let mut out = [0; 4];
        for i in 0..4 {
            out[i] = match (da[i], db[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
            };
        }
        let (mut sa, mut sb) = (strides4(da), strides4(db));
        for i in 0..4 {
            if da[i] == 1 {
                sa[i] = 0;
            }
            if db[i] == 1 {
                sb[i] = 0;
            }
        }
        let shape = out[4 - a.len()..].to_vec();
        Ok(Self { out, sa, sb, shape })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [n0, n1, n2, n3] = self.out;
        let mut o = 0;
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let ba = i0 * self.sa[0] + i1 * self.sa[1] + i2 * self.sa[2];
                    let bb = i0 * self.sb[0] + i1 * self.sb[1] + i2 * self.sb[2];
                    for i3 in 0..n3 {
                        f(o, ba + i3 * self.sa[3], bb + i3 * self.sb[3]);
                        o += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients are tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// 2-D convolution, stride 1, `pad` zeros on every side.
    /// `x: [n, c, h, w]`, `w: [o, c, kh, kw]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [o, wc, kh, kw] = self.value(w).dims4()?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {wc}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape("conv2d: kernel larger than padded input".into()));
        }
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let geo = ConvGeometry { c, h, w: wd, kh, kw, pad, oh, ow };
        let mut out = vec![0.0; n * o * oh * ow];
        let mut col = vec![0.0; c * kh * kw * oh * ow];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..n {
            geo.im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &mut col);
            let dst = &mut out[bi * o * oh * ow..(bi + 1) * o * oh * ow];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bv[oc]);
                }
            }
            gemm(
                1.0,
                MatRef::row_major(wv, o, c * kh * kw),
                MatRef::row_major(&col, c * kh * kw, oh * ow),
                if b.is_some() { 1.0 } else { 0.0 },
                dst,
            );
        }
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Conv2d { x, w, b, pad }, &parents, "conv2d")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| if t > 0.0 { t } else { slope * t }).collect();
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::LeakyRelu { x, slope }, &[x], "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| sigmoid(t)).collect();
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::Sigmoid { x }, &[x], "sigmoid")
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bc.out.iter().product()];
        bc.for_each(|o, ia, ib| {
            out[o] = match kind {
                Binary::Add => av[ia] + bv[ib],
                Binary::Sub => av[ia] - bv[ib],
                Binary::Mul => av[ia] * bv[ib],
            }
        });
        let value = Tensor::new(&bc.shape, out)?;
        let (op, name) = match kind {
            Binary::Add => (Op::Add { a, b }, "add"),
            Binary::Sub => (Op::Sub { a, b }, "sub"),
            Binary::Mul => (Op::Mul { a, b }, "mul"),
        };
        self.push(value, op, &[a, b], name)
    }

    /// Elementwise sum with size-1 broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    /// Elementwise product with size-1 broadcasting, e.g. `[n,c,h,w] ⊙ [n,c,1,1]`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut c_total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            c_total += pc;
        }
        let mut out = Vec::with_capacity(n * c_total * h * w);
        for bi in 0..n {
            for &p in parts {
                let [_, pc, _, _] = self.value(p).dims4()?;
                let block = pc * h * w;
                out.extend_from_slice(&self.value(p).data()[bi * block..(bi + 1) * block]);
            }
        }
        let value = Tensor::new(&[n, c_total, h, w], out)?;
        self.push(value, Op::Concat { parts: parts.to_vec() }, parts, "concat")
    }

    /// Resamples every plane of `x: [n, c, h, w]` to `out_h × out_w`.
    pub fn resample(&mut self, x: Var, kernel: Kernel, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("resample to empty size".into()));
        }
        let plan = Arc::new(ResamplePlan::new(kernel, h, w, out_h, out_w));
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for (i, dst) in out.chunks_mut(out_h * out_w).enumerate() {
            plan.apply(&src[i * h * w..(i + 1) * h * w], dst);
        }
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        self.push(value, Op::Resample { x, plan }, &[x], "resample")
    }

    /// Bilinear resampling by `scale` (output dims rounded up).
    pub fn bilinear_resample(&mut self, x: Var, scale: f64) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        let (oh, ow) = scaled_dims(h, w, scale)?;
        self.resample(x, Kernel::Bilinear, oh, ow)
    }

    /// Catmull-Rom bicubic downsampling by an integer `factor`.
    pub fn bicubic_downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::Shape("downsample factor 0".into()));
        }
        self.resample(x, Kernel::Bicubic, h.div_ceil(factor), w.div_ceil(factor))
    }

    /// `[n, c, h, w] → [n, c, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], data)?;
        self.push(value, Op::GlobalAvgPool { x }, &[x], "global_avg_pool")
    }

    /// `[n, c, h, w] → [n, 1, h, w]` maximum over channels.
    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * hw];
        let mut argmax = vec![0; n * hw];
        for bi in 0..n {
            for ch in 0..c {
                let plane = &xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    if v > out[bi * hw + p] {
                        out[bi * hw + p] = v;
                        argmax[bi * hw + p] = (bi * c + ch) * hw + p;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, 1, h, w], out)?;
        self.push(value, Op::ChannelMax { x, argmax }, &[x], "channel_max_pool")
    }

    /// `[n, c, h, w] → [n, 1, h, w]` mean over channels.
    pub fn channel_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for bi in 0..n {
            for ch in 0..c {
                let plane = &xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for (o, v) in out[bi * hw..(bi + 1) * hw].iter_mut().zip(plane) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        let value = Tensor::new(&[n, 1, h, w], out)?;
        self.push(value, Op::ChannelAvg { x }, &[x], "channel_avg_pool")
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x], "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x], "sum")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|t| t.abs()).collect())?;
        self.push(value, Op::Abs { x }, &[x], "abs")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|t| t * k).collect())?;
        self.push(value, Op::Scale { x, k }, &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|t| t + k).collect())?;
        self.push(value, Op::AddScalar { x }, &[x], "add_scalar")
    }

    /// Records a scalar computed outside the graph from `x`, together with
    /// its gradient with respect to `x`.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "external gradient has {} entries for a tensor of {}",
                grad.len(),
                self.value(x).len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("external gradient".into()));
        }
        self.push(Tensor::scalar(value), Op::External { x, grad }, &[x], "external")
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let size = |v: Var| self.nodes[v.0].value.len();
        // Accumulation buffer of a parent, created zeroed on first use.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; size(v)])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let [n, c, h, wd] = self.value(*x).dims4()?;
                let [o, _, kh, kw] = self.value(*w).dims4()?;
                let [_, _, oh, ow] = node.value.dims4()?;
                let geo = ConvGeometry { c, h, w: wd, kh, kw, pad: *pad, oh, ow };
                let ckk = c * kh * kw;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut col = vec![0.0; ckk * oh * ow];
                let mut dcol = vec![0.0; ckk * oh * ow];
                for bi in 0..n {
                    let gout = &g[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                    if let Some(b) = b.filter(|b| wants(*b)) {
                        let gb = acc!(b);
                        for (oc, chunk) in gout.chunks(oh * ow).enumerate() {
                            gb[oc] += chunk.iter().sum::<f64>();
                        }
                    }
                    if wants(*w) {
                        geo.im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &mut col);
                        let gw = acc!(*w);
                        gemm(
                            1.0,
                            MatRef::row_major(gout, o, oh * ow),
                            MatRef::row_major(&col, ckk, oh * ow).t(),
                            1.0,
                            gw,
                        );
                    }
                    if wants(*x) {
                        gemm(
                            1.0,
                            MatRef::row_major(wv, o, ckk).t(),
                            MatRef::row_major(gout, o, oh * ow),
                            0.0,
                            &mut dcol,
                        );
                        let gx = acc!(*x);
                        geo.col2im_add(&dcol, &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let gx = acc!(*x);
                for ((gx, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *gx += if xi > 0.0 { gi } else { slope * gi };
                }
            }
            Op::Sigmoid { x } => {
                let xv = self.value(*x).data();
                let gx = acc!(*x);
                for ((gx, &gi), &t) in gx.iter_mut().zip(g).zip(xv) {
                    *gx += gi * sigmoid_slope(t);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b))?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (da, db): (fn(f64, f64) -> f64, fn(f64, f64) -> f64) = match node.op {
                    Op::Add { .. } => (|_, _| 1.0, |_, _| 1.0),
                    Op::Sub { .. } => (|_, _| 1.0, |_, _| -1.0),
                    _ => (|_, b| b, |a, _| a),
                };
                if wants(*a) {
                    let ga = acc!(*a);
                    bc.for_each(|o, ia, ib| ga[ia] += g[o] * da(av[ia], bv[ib]));
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    bc.for_each(|o, ia, ib| gb[ib] += g[o] * db(av[ia], bv[ib]));
                }
            }
            Op::Concat { parts } => {
                let [n, c_total, h, w] = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims4()?[1];
                    if wants(p) {
                        let gp = acc!(p);
                        for bi in 0..n {
                            let src = &g[(bi * c_total + offset) * hw..(bi * c_total + offset + pc) * hw];
                            for (d, s) in gp[bi * pc * hw..(bi + 1) * pc * hw].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Resample { x, plan } => {
                let (ih, iw) = plan.in_dims();
                let (oh, ow) = plan.out_dims();
                let gx = acc!(*x);
                for (i, gout) in g.chunks(oh * ow).enumerate() {
                    plan.apply_transpose(gout, &mut gx[i * ih * iw..(i + 1) * ih * iw]);
                }
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = self.value(*x).dims4()?;
                let hw = h * w;
                let gx = acc!(*x);
                for (plane, &gi) in gx.chunks_mut(hw).zip(g) {
                    plane.iter_mut().for_each(|v| *v += gi / hw as f64);
                }
            }
            Op::ChannelMax { x, argmax } => {
                let gx = acc!(*x);
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
            Op::ChannelAvg { x } => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let hw = h * w;
                let gx = acc!(*x);
                for bi in 0..n {
                    for ch in 0..c {
                        let plane = &mut gx[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                        for (d, s) in plane.iter_mut().zip(&g[bi * hw..(bi + 1) * hw]) {
                            *d += s / c as f64;
                        }
                    }
                }
            }
            Op::Mean { x } => {
                let k = g[0] / size(*x) as f64;
                acc!(*x).iter_mut().for_each(|v| *v += k);
            }
            Op::Sum { x } => {
                acc!(*x).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                let gx = acc!(*x);
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *d += gi;
                    } else if xi < 0.0 {
                        *d -= gi;
                    }
                }
            }
            Op::Scale { x, k } => {
                for (d, &gi) in acc!(*x).iter_mut().zip(g) {
                    *d += k * gi;
                }
            }
            Op::AddScalar { x } => {
                for (d, &gi) in acc!(*x).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::External { x, grad } => {
                for (d, &e) in acc!(*x).iter_mut().zip(grad) {
                    *d += g[0] * e;
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// σ'(t) as e/(1+e)² with e = exp(−|t|), which stays nonzero where
/// σ(t)(1 − σ(t)) rounds to zero.
fn sigmoid_slope(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

fn scaled_dims(h: usize, w: usize, scale: f64) -> Result<(usize, usize)> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Shape(format!("bad resample scale {scale}")));
    }
    let f = |d: usize| ((d as f64 * scale).ceil() as usize).max(1);
    Ok((f(h), f(w)))
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Rows indexed by (channel, ky, kx), columns by output pixel.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let npix = self.oh * self.ow;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * npix;
                    let dst = &mut col[row..row + npix];
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], x: &mut [f64]) {
        let npix = self.oh * self.ow;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * npix;
                    let src = &col[row..row + npix];
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = ox as isize + kx as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
