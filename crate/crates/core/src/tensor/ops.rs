use rand::Rng;

use super::tape::{accumulate, Tape, Var};
use super::{strides, ParamId, Result, Tensor, TensorError, IGNORE_INDEX};

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<i64>, count: usize },
    Bce { logits: Var, targets: Vec<i64>, count: usize },
    Mse { pred: Var, target: Tensor },
    Dropout { x: Var, mask: Vec<f64> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::Scale { x, .. }
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Narrow { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Dropout { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } | Op::Bce { logits, .. } => vec![*logits],
            Op::Mse { pred, .. } => vec![*pred],
        }
    }

    pub(crate) fn backward(
        &self,
        tape: &Tape,
        out: &Tensor,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let needs = |v: &Var| tape.nodes[v.0].requires_grad;
        let val = |v: &Var| &tape.nodes[v.0].value;
        match self {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                let (av, bv) = (val(a).data(), val(b).data());
                if needs(a) {
                    let mut da = vec![0.0; av.len()];
                    for t in 0..*batch {
                        let boff = if *shared_rhs { 0 } else { t * k * n };
                        let bm = &bv[boff..boff + k * n];
                        let dc = &dy[t * m * n..(t + 1) * m * n];
                        let da_t = &mut da[t * m * k..(t + 1) * m * k];
                        for i in 0..*m {
                            for p in 0..*k {
                                let row = &bm[p * n..(p + 1) * n];
                                let dci = &dc[i * n..(i + 1) * n];
                                da_t[i * k + p] = dci.iter().zip(row).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if needs(b) {
                    let mut db = vec![0.0; bv.len()];
                    for t in 0..*batch {
                        let boff = if *shared_rhs { 0 } else { t * k * n };
                        let am = &av[t * m * k..(t + 1) * m * k];
                        let dc = &dy[t * m * n..(t + 1) * m * n];
                        let db_t = &mut db[boff..boff + k * n];
                        for i in 0..*m {
                            for p in 0..*k {
                                let aip = am[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let dst = &mut db_t[p * n..(p + 1) * n];
                                for (d, g) in dst.iter_mut().zip(&dc[i * n..(i + 1) * n]) {
                                    *d += aip * g;
                                }
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Permute { x, perm } => {
                if needs(x) {
                    let map = permute_map(val(x).shape(), perm);
                    let mut dx = vec![0.0; dy.len()];
                    for (o, &i) in map.iter().enumerate() {
                        dx[i] = dy[o];
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    accumulate(grads, *x, dy.to_vec());
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(self, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if needs(a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if needs(b) {
                    let map = broadcast_map(val(a).shape(), val(b).shape()).expect("checked in forward");
                    let mut db = vec![0.0; val(b).numel()];
                    for (o, &j) in map.iter().enumerate() {
                        db[j] += sign * dy[o];
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(a).data(), val(b).data());
                if needs(a) {
                    accumulate(grads, *a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if needs(b) {
                    accumulate(grads, *b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale { x, factor } => {
                if needs(x) {
                    accumulate(grads, *x, dy.iter().map(|g| g * factor).collect());
                }
            }
            Op::Gelu(x) => {
                if needs(x) {
                    let dx = val(x).data().iter().zip(dy).map(|(&v, g)| g * gelu_grad(v)).collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                if needs(x) {
                    let cols = *out.shape().last().unwrap_or(&1);
                    let y = out.data();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols.max(1) {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = y[s.clone()].iter().zip(&dy[s.clone()]).map(|(p, g)| p * g).sum();
                        for i in s {
                            dx[i] = y[i] * (dy[i] - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = val(x).data();
                let g = val(gain).data();
                let d = g.len();
                let rows = xv.len() / d;
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let dyr = &dy[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * rstd[r];
                        dxhat[i] = dyr[i] * g[i];
                        dg[i] += dyr[i] * xhat[i];
                        db[i] += dyr[i];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dx[r * d + i] = rstd[r] * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                }
                if needs(x) {
                    accumulate(grads, *x, dx);
                }
                if needs(gain) {
                    accumulate(grads, *gain, dg);
                }
                if needs(bias) {
                    accumulate(grads, *bias, db);
                }
            }
            Op::Embedding { table, ids } => {
                if needs(table) {
                    let d = val(table).shape()[1];
                    let mut dt = vec![0.0; val(table).numel()];
                    for (pos, &id) in ids.iter().enumerate() {
                        for (dst, g) in dt[id * d..(id + 1) * d].iter_mut().zip(&dy[pos * d..(pos + 1) * d]) {
                            *dst += g;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Narrow { x, axis, start } => {
                if needs(x) {
                    let shape = val(x).shape();
                    let len = out.shape()[*axis];
                    let (outer, inner) = outer_inner(shape, *axis);
                    let full = shape[*axis];
                    let mut dx = vec![0.0; val(x).numel()];
                    for o in 0..outer {
                        let src = &dy[o * len * inner..(o + 1) * len * inner];
                        let dst_start = (o * full + start) * inner;
                        dx[dst_start..dst_start + len * inner].copy_from_slice(src);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    accumulate(grads, *x, vec![dy[0]; val(x).numel()]);
                }
            }
            Op::Mean(x) => {
                if needs(x) {
                    let n = val(x).numel();
                    accumulate(grads, *x, vec![dy[0] / n as f64; n]);
                }
            }
            Op::CrossEntropy { logits, targets, count } => {
                if needs(logits) && *count > 0 {
                    let lv = val(logits);
                    let classes = lv.shape()[1];
                    let mut dl = vec![0.0; lv.numel()];
                    let scale = dy[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let row = &lv.data()[r * classes..(r + 1) * classes];
                        let probs = softmax_row(row);
                        for (c, p) in probs.into_iter().enumerate() {
                            let onehot = if c as i64 == t { 1.0 } else { 0.0 };
                            dl[r * classes + c] = scale * (p - onehot);
                        }
                    }
                    accumulate(grads, *logits, dl);
                }
            }
            Op::Bce { logits, targets, count } => {
                if needs(logits) && *count > 0 {
                    let scale = dy[0] / *count as f64;
                    let dl = val(logits)
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| if t == IGNORE_INDEX { 0.0 } else { scale * (sigmoid(x) - t as f64) })
                        .collect();
                    accumulate(grads, *logits, dl);
                }
            }
            Op::Mse { pred, target } => {
                if needs(pred) {
                    let n = target.numel().max(1) as f64;
                    let dp = val(pred)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| dy[0] * 2.0 * (p - t) / n)
                        .collect();
                    accumulate(grads, *pred, dp);
                }
            }
            Op::Dropout { x, mask } => {
                if needs(x) {
                    accumulate(grads, *x, dy.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// For each flat index of `out_shape`, the flat index of the broadcast
/// operand. Broadcasting is right-aligned; operand dims must be 1 or equal.
fn broadcast_map(out_shape: &[usize], shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() > out_shape.len() {
        return Err(shape_err("broadcast", format!("{:?} into {:?}", shape, out_shape)));
    }
    let offset = out_shape.len() - shape.len();
    let src_strides = strides(shape);
    let mut eff = vec![0usize; out_shape.len()];
    for (i, &d) in shape.iter().enumerate() {
        let od = out_shape[offset + i];
        if d == od {
            eff[offset + i] = src_strides[i];
        } else if d != 1 {
            return Err(shape_err("broadcast", format!("{:?} into {:?}", shape, out_shape)));
        }
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for axis in (0..out_shape.len()).rev() {
            idx[axis] += 1;
            src += eff[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    Ok(map)
}

/// For each flat output index, the flat input index.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for axis in (0..out_shape.len()).rev() {
            idx[axis] += 1;
            src += eff[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    map
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

impl Tape {
    /// `a[.., m, k] × b[.., k, n]`. `b` either shares `a`'s leading dims or
    /// is a plain matrix applied to every leading index.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ash, bsh)));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let lead = &ash[..ash.len() - 2];
        let shared_rhs = bsh.len() == 2;
        if k != k2 || (!shared_rhs && lead != &bsh[..bsh.len() - 2]) {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ash, bsh)));
        }
        let batch: usize = lead.iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut c = vec![0.0; batch * m * n];
        for t in 0..batch {
            let boff = if shared_rhs { 0 } else { t * k * n };
            let am = &av[t * m * k..(t + 1) * m * k];
            let bm = &bv[boff..boff + k * n];
            let cm = &mut c[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                let crow = &mut cm[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = am[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (dst, bpj) in crow.iter_mut().zip(&bm[p * n..(p + 1) * n]) {
                        *dst += aip * bpj;
                    }
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, c)?;
        self.push(value, Op::MatMul { a, b, batch, m, k, n, shared_rhs }, "matmul")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{:?} by {:?}", shape, perm)));
        }
        let map = permute_map(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(shape_err("transpose", format!("rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Elementwise `a + b`, with `b` broadcast into `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av.iter().zip(&map).map(|(x, &j)| x + bv[j]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add { a, b }, "add")
    }

    /// Elementwise `a - b`, with `b` broadcast into `a`'s shape.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av.iter().zip(&map).map(|(x, &j)| x - bv[j]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Sub { a, b }, "sub")
    }

    /// Elementwise product of equal-shape operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Scale { x, factor }, "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Gelu(x), "gelu")
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err("softmax", "rank 0".into()))?;
        let data: Vec<f64> = if cols == 0 {
            vec![]
        } else {
            self.value(x).data().chunks(cols).flat_map(softmax_row).collect()
        };
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Softmax(x), "softmax")
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", shape, self.shape(gain), self.shape(bias)),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                out[r * d + i] = (row[i] - mean) * rs * g[i] + b[i];
            }
            rstd.push(rs);
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::LayerNorm { x, gain, bias, rstd }, "layer_norm")
    }

    /// Gathers rows of `table[V, d]`; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", format!("table {:?}, {} ids for {:?}", tshape, ids.len(), lead)));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::TargetOutOfRange { target: bad as i64, classes: vocab });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("{:?} axis {} [{}, {})", shape, axis, start, start + len)));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Narrow { x, axis, start }, "narrow")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let value = Tensor::scalar(self.value(x).sum() / n as f64);
        self.push(value, Op::Mean(x), "mean")
    }

    /// Mean negative log-likelihood of `targets` under `logits[N, V]`,
    /// skipping rows whose target is `ignore_index`. Returns exactly 0 with
    /// zero gradient when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("cross_entropy", format!("logits {:?}, {} targets", shape, targets.len())));
        }
        let classes = shape[1];
        let targets: Vec<i64> = targets.iter().map(|&t| if t == ignore_index { IGNORE_INDEX } else { t }).collect();
        let lv = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t < 0 || t as usize >= classes {
                return Err(TensorError::TargetOutOfRange { target: t, classes });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            total += log_sum_exp(row) - row[t as usize];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, count }, "cross_entropy")
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 targets,
    /// in the overflow-free `max(x,0) - x·y + ln(1 + e^{-|x|})` form.
    pub fn binary_cross_entropy_with_logits(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        let n = self.value(logits).numel();
        if n != targets.len() {
            return Err(shape_err("binary_cross_entropy", format!("{} logits, {} targets", n, targets.len())));
        }
        let targets: Vec<i64> = targets.iter().map(|&t| if t == ignore_index { IGNORE_INDEX } else { t }).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for (&x, &t) in self.value(logits).data().iter().zip(&targets) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t != 0 && t != 1 {
                return Err(TensorError::TargetOutOfRange { target: t, classes: 2 });
            }
            total += x.max(0.0) - x * t as f64 + (-x.abs()).exp().ln_1p();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Tensor::scalar(loss), Op::Bce { logits, targets, count }, "binary_cross_entropy")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).numel() != target.numel() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let n = target.numel();
        let total: f64 = self.value(pred).data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.clone() }, "mse")
    }

    /// Inverted dropout. Identity when `p == 0` or the tape is in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask }, "dropout")
    }
}
