//! Differentiable primitives. Every op validates shapes up front and
//! returns a dimension error naming the offending axes.

use super::gemm::gemm;
use super::graph::{BackwardOp, Graph, VarId};
use super::{shape_err, Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Statistics source for batch normalization.
#[derive(Clone, Debug)]
pub enum BnMode<'a> {
    /// Per-channel batch statistics; needs at least two samples.
    Train,
    /// Frozen running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed in train mode, for the running-average update.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased (n-1) variance.
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * self.mean[c];
            running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * self.var[c];
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// (batch, channels, spatial product) view of a tensor with rank >= 2.
fn nc_rest(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(shape_err(op, format!("expected [N, C, ...], got {s:?}")));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

// ---------------------------------------------------------------- conv2d

struct Conv2dGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy < 0
                                || ix < 0
                                || iy as usize >= self.h
                                || ix as usize >= self.w
                            {
                                0.0
                            } else {
                                x[(ci * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBack {
    geom: Conv2dGeom,
}

impl BackwardOp for Conv2dBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let g = &self.geom;
        let (x, kernel) = (inputs[0], inputs[1]);
        let patch = g.patch();
        let p = g.positions();
        let in_stride = g.cin * g.h * g.w;
        let out_stride = g.cout * p;
        let mut dx = Tensor::zeros(x.shape());
        let mut dk = Tensor::zeros(kernel.shape());
        let mut db = Tensor::zeros(&[g.cout]);
        let mut cols = vec![0.0; patch * p];
        let mut dcols = vec![0.0; patch * p];
        for n in 0..g.n {
            let dy = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
            g.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            // dK += dY · colsᵀ
            gemm(g.cout, p, patch, dy, false, &cols, true, 1.0, dk.data_mut());
            // dcols = Kᵀ · dY
            gemm(patch, g.cout, p, kernel.data(), true, dy, false, 0.0, &mut dcols);
            g.col2im(&dcols, &mut dx.data_mut()[n * in_stride..(n + 1) * in_stride]);
            for co in 0..g.cout {
                db.data_mut()[co] += dy[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        vec![dx, dk, db]
    }
}

// ------------------------------------------------------------ batch norm

struct BnTrainBack {
    inv_std: Vec<f64>,
}

impl BackwardOp for BnTrainBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor> {
        let (n, c, rest) = nc_rest("batch_norm", inputs[0]).expect("checked in forward");
        let m = (n * rest) as f64;
        let dy = grad_out.data();
        let xhat = output.data();
        let mut dx = Tensor::zeros(inputs[0].shape());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * rest;
                for i in base..base + rest {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * xhat[i];
                }
            }
            let k = self.inv_std[ch] / m;
            for b in 0..n {
                let base = (b * c + ch) * rest;
                for i in base..base + rest {
                    dx.data_mut()[i] = k * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                }
            }
        }
        vec![dx]
    }
}

struct BnEvalBack {
    inv_std: Vec<f64>,
}

impl BackwardOp for BnEvalBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let (_, c, rest) = nc_rest("batch_norm", inputs[0]).expect("checked in forward");
        let mut dx = grad_out.clone();
        for (i, v) in dx.data_mut().iter_mut().enumerate() {
            *v *= self.inv_std[(i / rest) % c];
        }
        vec![dx]
    }
}

// ------------------------------------------------- per-channel modulation

/// y[n,c,..] = x[n,c,..]·scale[c or n,c] + shift[c or n,c]
struct ChannelAffineBack {
    per_sample: bool,
}

impl BackwardOp for ChannelAffineBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let (x, scale) = (inputs[0], inputs[1]);
        let (n, c, rest) = nc_rest("channel_affine", x).expect("checked in forward");
        let mut dx = Tensor::zeros(x.shape());
        let mut dscale = Tensor::zeros(scale.shape());
        let mut dshift = Tensor::zeros(scale.shape());
        for b in 0..n {
            for ch in 0..c {
                let k = if self.per_sample { b * c + ch } else { ch };
                let s = scale.data()[k];
                let base = (b * c + ch) * rest;
                let (mut ds, mut db) = (0.0, 0.0);
                for i in base..base + rest {
                    let dy = grad_out.data()[i];
                    dx.data_mut()[i] = dy * s;
                    ds += dy * x.data()[i];
                    db += dy;
                }
                dscale.data_mut()[k] += ds;
                dshift.data_mut()[k] += db;
            }
        }
        vec![dx, dscale, dshift]
    }
}

// ----------------------------------------------------------------- dense

struct DenseBack;

impl BackwardOp for DenseBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, din) = (x.shape()[0], x.shape()[1]);
        let dout = w.shape()[0];
        let dy = grad_out.data();
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, dout, din, dy, false, w.data(), false, 0.0, dx.data_mut());
        let mut dw = Tensor::zeros(w.shape());
        gemm(dout, n, din, dy, true, x.data(), false, 0.0, dw.data_mut());
        let mut db = Tensor::zeros(&[dout]);
        for row in dy.chunks(dout) {
            for (acc, v) in db.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        vec![dx, dw, db]
    }
}

// ----------------------------------------------------------- elementwise

struct ReluBack;

impl BackwardOp for ReluBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let mut dx = grad_out.clone();
        for (d, &x) in dx.data_mut().iter_mut().zip(inputs[0].data()) {
            if x <= 0.0 {
                *d = 0.0;
            }
        }
        vec![dx]
    }
}

struct TanhBack;

impl BackwardOp for TanhBack {
    fn backward(&self, grad_out: &Tensor, _inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor> {
        let mut dx = grad_out.clone();
        for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
            *d *= 1.0 - y * y;
        }
        vec![dx]
    }
}

struct AddBack;

impl BackwardOp for AddBack {
    fn backward(&self, grad_out: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        vec![grad_out.clone(), grad_out.clone()]
    }
}

struct SubBack;

impl BackwardOp for SubBack {
    fn backward(&self, grad_out: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        vec![grad_out.clone(), grad_out.map(|v| -v)]
    }
}

struct MulBack;

impl BackwardOp for MulBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let mut da = grad_out.clone();
        let mut db = grad_out.clone();
        for i in 0..da.numel() {
            da.data_mut()[i] *= inputs[1].data()[i];
            db.data_mut()[i] *= inputs[0].data()[i];
        }
        vec![da, db]
    }
}

struct ScaleBack(f64);

impl BackwardOp for ScaleBack {
    fn backward(&self, grad_out: &Tensor, _inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        vec![grad_out.map(|v| v * self.0)]
    }
}

// --------------------------------------------------------------- softmax

struct SoftmaxBack;

impl BackwardOp for SoftmaxBack {
    fn backward(&self, grad_out: &Tensor, _inputs: &[&Tensor], output: &Tensor) -> Vec<Tensor> {
        let k = *output.shape().last().expect("rank >= 1");
        let mut dx = Tensor::zeros(output.shape());
        for ((dxr, yr), dyr) in dx
            .data_mut()
            .chunks_mut(k)
            .zip(output.data().chunks(k))
            .zip(grad_out.data().chunks(k))
        {
            let dot: f64 = yr.iter().zip(dyr).map(|(y, d)| y * d).sum();
            for i in 0..k {
                dxr[i] = yr[i] * (dyr[i] - dot);
            }
        }
        vec![dx]
    }
}

// -------------------------------------------------------------- max pool

struct MaxPoolBack {
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPoolBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (o, &src) in self.argmax.iter().enumerate() {
            dx.data_mut()[src] += grad_out.data()[o];
        }
        vec![dx]
    }
}

// ------------------------------------------------------- shape plumbing

struct ConcatBack {
    outer: usize,
    inner_sizes: Vec<usize>,
}

impl BackwardOp for ConcatBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let total: usize = self.inner_sizes.iter().sum();
        let mut grads: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for o in 0..self.outer {
            let mut off = o * total;
            for (g, &sz) in grads.iter_mut().zip(&self.inner_sizes) {
                g.data_mut()[o * sz..(o + 1) * sz].copy_from_slice(&grad_out.data()[off..off + sz]);
                off += sz;
            }
        }
        grads
    }
}

/// [N, D] -> [N, D, h, w]
struct ReplicateSpatialBack {
    positions: usize,
}

impl BackwardOp for ReplicateSpatialBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (d, block) in dx.data_mut().iter_mut().zip(grad_out.data().chunks(self.positions)) {
            *d = block.iter().sum();
        }
        vec![dx]
    }
}

/// [D...] -> [n, D...]
struct RepeatRowsBack;

impl BackwardOp for RepeatRowsBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let width = dx.numel();
        for row in grad_out.data().chunks(width) {
            for (a, b) in dx.data_mut().iter_mut().zip(row) {
                *a += b;
            }
        }
        vec![dx]
    }
}

struct SumBack {
    scale: f64,
}

impl BackwardOp for SumBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        vec![Tensor::full(inputs[0].shape(), grad_out.data()[0] * self.scale)]
    }
}

struct GlobalAvgPoolBack {
    positions: usize,
}

impl BackwardOp for GlobalAvgPoolBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let inv = 1.0 / self.positions as f64;
        for (block, &g) in dx.data_mut().chunks_mut(self.positions).zip(grad_out.data()) {
            block.fill(g * inv);
        }
        vec![dx]
    }
}

struct ReshapeBack;

impl BackwardOp for ReshapeBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        vec![Tensor::new(inputs[0].shape().to_vec(), grad_out.data().to_vec()).expect("same numel")]
    }
}

/// out[n,c] = Σ_p weights[n,p]·features[n,c,p]
struct WeightedSpatialSumBack;

impl BackwardOp for WeightedSpatialSumBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let (f, a) = (inputs[0], inputs[1]);
        let (n, c, p) = (f.shape()[0], f.shape()[1], a.shape()[1]);
        let mut df = Tensor::zeros(f.shape());
        let mut da = Tensor::zeros(a.shape());
        for b in 0..n {
            for ch in 0..c {
                let g = grad_out.data()[b * c + ch];
                let base = (b * c + ch) * p;
                for q in 0..p {
                    df.data_mut()[base + q] = g * a.data()[b * p + q];
                    da.data_mut()[b * p + q] += g * f.data()[base + q];
                }
            }
        }
        vec![df, da]
    }
}

impl Graph {
    /// 2-D cross-correlation over `[N, Cin, H, W]` with a `[Cout, Cin, kh, kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        const OP: &str = "conv2d";
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err(OP, format!("input {xs:?} and kernel {ks:?} must both be rank 4")));
        }
        if stride == 0 {
            return Err(shape_err(OP, "stride must be positive"));
        }
        if xs[1] != ks[1] {
            return Err(shape_err(
                OP,
                format!("input channels (axis 1) {} != kernel in-channels (axis 1) {}", xs[1], ks[1]),
            ));
        }
        if bs != [ks[0]] {
            return Err(shape_err(OP, format!("bias {bs:?} must be [{}] (kernel axis 0)", ks[0])));
        }
        let (h, w) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ks[2] > h || ks[3] > w {
            return Err(shape_err(
                OP,
                format!("kernel height/width (axes 2, 3) {}x{} exceed padded input {h}x{w}", ks[2], ks[3]),
            ));
        }
        let geom = Conv2dGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh: (h - ks[2]) / stride + 1,
            ow: (w - ks[3]) / stride + 1,
            stride,
            pad: padding,
        };
        let (patch, p) = (geom.patch(), geom.positions());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; geom.n * geom.cout * p];
        let mut cols = vec![0.0; patch * p];
        let in_stride = geom.cin * geom.h * geom.w;
        for n in 0..geom.n {
            geom.im2col(&x[n * in_stride..(n + 1) * in_stride], &mut cols);
            let dst = &mut out[n * geom.cout * p..(n + 1) * geom.cout * p];
            for co in 0..geom.cout {
                dst[co * p..(co + 1) * p].fill(b[co]);
            }
            gemm(geom.cout, patch, p, k, false, &cols, false, 1.0, dst);
        }
        let value = Tensor::new(vec![geom.n, geom.cout, geom.oh, geom.ow], out)?;
        self.push_op(OP, value, &[input, kernel, bias], Box::new(Conv2dBack { geom }))
    }

    /// Normalizes each channel of `[N, C, ...]` without the affine step.
    pub fn bn_normalize(&mut self, x: VarId, mode: BnMode<'_>) -> Result<(VarId, Option<BnStats>)> {
        const OP: &str = "batch_norm";
        let (n, c, rest) = nc_rest(OP, self.value(x))?;
        let data = self.value(x).data();
        match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(TensorError::BatchSize { op: OP, n });
                }
                let m = (n * rest) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * rest;
                        s += data[base..base + rest].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * rest;
                        ss += data[base..base + rest].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut out = data.to_vec();
                for (i, v) in out.iter_mut().enumerate() {
                    let ch = (i / rest) % c;
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
                let stats = BnStats {
                    mean,
                    var: var.iter().map(|v| v * m / (m - 1.0)).collect(),
                };
                let value = Tensor::new(self.shape(x).to_vec(), out)?;
                let id = self.push_op(OP, value, &[x], Box::new(BnTrainBack { inv_std }))?;
                Ok((id, Some(stats)))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        OP,
                        format!("running stats have {} / {} entries, channel axis 1 has {c}", mean.len(), var.len()),
                    ));
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut out = data.to_vec();
                for (i, v) in out.iter_mut().enumerate() {
                    let ch = (i / rest) % c;
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
                let value = Tensor::new(self.shape(x).to_vec(), out)?;
                let id = self.push_op(OP, value, &[x], Box::new(BnEvalBack { inv_std }))?;
                Ok((id, None))
            }
        }
    }

    /// Full batch norm: normalization followed by the per-channel affine.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mode: BnMode<'_>,
    ) -> Result<(VarId, Option<BnStats>)> {
        let (xhat, stats) = self.bn_normalize(x, mode)?;
        Ok((self.channel_affine(xhat, gamma, beta)?, stats))
    }

    /// y[n,c,..] = x·scale[c] + shift[c]
    pub fn channel_affine(&mut self, x: VarId, scale: VarId, shift: VarId) -> Result<VarId> {
        self.channel_scale_shift("channel_affine", x, scale, shift, false)
    }

    /// y[n,c,..] = x·scale[n,c] + shift[n,c], a per-sample modulation.
    pub fn channel_modulate(&mut self, x: VarId, scale: VarId, shift: VarId) -> Result<VarId> {
        self.channel_scale_shift("channel_modulate", x, scale, shift, true)
    }

    fn channel_scale_shift(
        &mut self,
        op: &'static str,
        x: VarId,
        scale: VarId,
        shift: VarId,
        per_sample: bool,
    ) -> Result<VarId> {
        let (n, c, rest) = nc_rest(op, self.value(x))?;
        let want: Vec<usize> = if per_sample { vec![n, c] } else { vec![c] };
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.shape(v) != want.as_slice() {
                return Err(shape_err(op, format!("{name} {:?} must be {want:?}", self.shape(v))));
            }
        }
        let s = self.value(scale).data();
        let b = self.value(shift).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let k = if per_sample { i / rest } else { (i / rest) % c };
            *v = *v * s[k] + b[k];
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push_op(op, value, &[x, scale, shift], Box::new(ChannelAffineBack { per_sample }))
    }

    /// y = x·Wᵀ + b for x `[N, Din]`, W `[Dout, Din]`, b `[Dout]`.
    pub fn dense(&mut self, x: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        const OP: &str = "dense_affine";
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 {
            return Err(shape_err(OP, format!("input {xs:?} and weight {ws:?} must be rank 2")));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                OP,
                format!("input axis 1 ({}) != weight axis 1 ({})", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(shape_err(OP, format!("bias {bs:?} must be [{}] (weight axis 0)", ws[0])));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(n, din, dout, self.value(x).data(), false, self.value(weight).data(), true, 1.0, &mut out);
        let value = Tensor::new(vec![n, dout], out)?;
        self.push_op(OP, value, &[x, weight, bias], Box::new(DenseBack))
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push_op("relu", value, &[x], Box::new(ReluBack))
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        let value = self.value(x).map(f64::tanh);
        self.push_op("tanh", value, &[x], Box::new(TanhBack))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x += y;
        }
        self.push_op("add", value, &[a, b], Box::new(AddBack))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        self.push_op("sub", value, &[a, b], Box::new(SubBack))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push_op("mul", value, &[a, b], Box::new(MulBack))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> Result<VarId> {
        let value = self.value(x).map(|v| v * factor);
        self.push_op("scale", value, &[x], Box::new(ScaleBack(factor)))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&mut self, x: VarId) -> Result<VarId> {
        let k = *self
            .shape(x)
            .last()
            .ok_or_else(|| shape_err("softmax", "rank-0 input"))?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push_op("softmax", value, &[x], Box::new(SoftmaxBack))
    }

    /// Max pooling over `[N, C, H, W]` with a square window; ties resolve to
    /// the first position in row-major window order.
    pub fn max_pool2d(&mut self, x: VarId, window: usize, stride: usize) -> Result<VarId> {
        const OP: &str = "max_pool2d";
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err(OP, format!("expected [N, C, H, W], got {s:?}")));
        }
        if window == 0 || stride == 0 || window > s[2] || window > s[3] {
            return Err(shape_err(
                OP,
                format!("window {window} / stride {stride} invalid for height/width (axes 2, 3) {}x{}", s[2], s[3]),
            ));
        }
        let (oh, ow) = ((s[2] - window) / stride + 1, (s[3] - window) / stride + 1);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * s[3] + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * s[3] + ox * stride + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push_op(OP, value, &[x], Box::new(MaxPoolBack { argmax }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        const OP: &str = "concat";
        let first = parts.first().ok_or_else(|| shape_err(OP, "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(OP, format!("axis {axis} out of range for {base:?}")));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err(OP, format!("{s:?} incompatible with {base:?} off axis {axis}")));
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let inner_sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * tail).collect();
        let mut out = Vec::with_capacity(outer * extent * tail);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&inner_sizes) {
                out.extend_from_slice(&self.value(p).data()[o * sz..(o + 1) * sz]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let value = Tensor::new(shape, out)?;
        self.push_op(OP, value, parts, Box::new(ConcatBack { outer, inner_sizes }))
    }

    /// `[N, D]` -> `[N, D, h, w]`, copying each value to every position.
    pub fn replicate_spatial(&mut self, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("replicate_spatial", format!("expected [N, D], got {s:?}")));
        }
        let positions = h * w;
        let mut out = Vec::with_capacity(s[0] * s[1] * positions);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, positions));
        }
        let value = Tensor::new(vec![s[0], s[1], h, w], out)?;
        self.push_op("replicate_spatial", value, &[x], Box::new(ReplicateSpatialBack { positions }))
    }

    /// `[D...]` -> `[n, D...]`
    pub fn repeat_rows(&mut self, x: VarId, n: usize) -> Result<VarId> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let row = self.value(x).data();
        let mut out = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            out.extend_from_slice(row);
        }
        let value = Tensor::new(shape, out)?;
        self.push_op("repeat_rows", value, &[x], Box::new(RepeatRowsBack))
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push_op("sum", value, &[x], Box::new(SumBack { scale: 1.0 }))
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n);
        self.push_op("mean", value, &[x], Box::new(SumBack { scale: 1.0 / n }))
    }

    /// `[N, C, ...]` -> `[N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let (n, c, rest) = nc_rest("global_avg_pool", self.value(x))?;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(rest)
            .map(|b| b.iter().sum::<f64>() / rest as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push_op("global_avg_pool", value, &[x], Box::new(GlobalAvgPoolBack { positions: rest }))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let value = self.value(x).reshape(shape)?;
        self.push_op("reshape", value, &[x], Box::new(ReshapeBack))
    }

    /// `features [N, C, H, W]` weighted by `weights [N, H·W]`, summed over
    /// positions into `[N, C]`.
    pub fn weighted_spatial_sum(&mut self, features: VarId, weights: VarId) -> Result<VarId> {
        const OP: &str = "weighted_spatial_sum";
        let (n, c, p) = nc_rest(OP, self.value(features))?;
        if self.shape(weights) != [n, p] {
            return Err(shape_err(
                OP,
                format!("weights {:?} must be [{n}, {p}] (batch, positions)", self.shape(weights)),
            ));
        }
        let f = self.value(features).data();
        let a = self.value(weights).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * p;
                out[b * c + ch] = (0..p).map(|q| a[b * p + q] * f[base + q]).sum();
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push_op(OP, value, &[features, weights], Box::new(WeightedSpatialSumBack))
    }
}
