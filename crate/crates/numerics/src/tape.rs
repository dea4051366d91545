//! Reverse-mode differentiation over a dynamically recorded operation list.
//!
//! Activations are laid out as matrices `[rows, channels]`; spatial ops treat
//! the rows of a matrix as a row-major `h x w` grid.

use crate::error::{NumericsError, Result};
use crate::real::{gemm, MatView, MatViewMut, Real};
use crate::tensor::{attention_forward, attention_shapes, softmax_rows_in_place, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Calls `f(out_pixel, tap, src_pixel)` for every in-bounds tap of a 3x3
/// neighbourhood on an `h x w` grid; tap `ky*3 + kx` is offset `(ky-1, kx-1)`.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for ky in 0..3 {
                let sy = y + ky;
                if sy == 0 || sy > h {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x + kx;
                    if sx == 0 || sx > w {
                        continue;
                    }
                    f(y * w + x, ky * 3 + kx, (sy - 1) * w + sx - 1);
                }
            }
        }
    }
}

/// Sentinel in gather maps that produces a zero.
const ZERO: usize = usize::MAX;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    SoftmaxRows(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Gather { x: Var, map: Vec<usize> },
    AvgPool2 { x: Var, h: usize, w: usize },
    Im2Col { x: Var, h: usize, w: usize },
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, var: Var) -> Result<(usize, usize)> {
        self.value(var).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a `[c]` (or `[1, c]`) row vector to every row of an `[n, c]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims2(x)?;
        if self.value(row).numel() != c {
            return Err(NumericsError::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// Normalizes each row of `[n, c]` to zero mean and unit variance, then
    /// applies the per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(NumericsError::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new([n, c], out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2(x)?;
        let mut out = self.value(x).clone();
        softmax_rows_in_place(out.data_mut(), c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    fn gather(&mut self, x: Var, map: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = map.iter().map(|&i| if i == ZERO { T::zero() } else { src[i] }).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gather { x, map }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let map = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather(x, map, vec![c, r])
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Contract(format!("embedding index {bad} out of range for {v} rows")));
        }
        let map = indices.iter().flat_map(|&i| (0..d).map(move |j| i * d + j)).collect();
        self.gather(table, map, vec![indices.len(), d])
    }

    fn grid_dims(&self, x: Var, h: usize, w: usize, op: &'static str) -> Result<usize> {
        let (n, c) = self.dims2(x)?;
        if n != h * w {
            return Err(NumericsError::shape(op, self.shape(x), &[h, w]));
        }
        Ok(c)
    }

    /// 3x3 zero-padded neighbourhood unfold: `[h*w, c] -> [h*w, 9*c]`, column
    /// block `ky*3 + kx` holding the pixel at offset `(ky-1, kx-1)`.
    pub fn im2col3x3(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.grid_dims(x, h, w, "im2col3x3")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); h * w * 9 * c];
        for_each_tap(h, w, |o, k, s| {
            let dst = (o * 9 + k) * c;
            out[dst..dst + c].copy_from_slice(&src[s * c..(s + 1) * c]);
        });
        let out = Tensor::new([h * w, 9 * c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Im2Col { x, h, w }, rg))
    }

    /// 2x2 mean pooling of an `h x w` grid.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.grid_dims(x, h, w, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NumericsError::Contract(format!("avg_pool2 needs even grid, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let o = (y * ow + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += src[s + ch] * quarter;
                    }
                }
            }
        }
        let out = Tensor::new([oh * ow, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::AvgPool2 { x, h, w }, rg))
    }

    /// Nearest-neighbour 2x upsampling of an `h x w` grid.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.grid_dims(x, h, w, "upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut map = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((y / 2) * w + xx / 2) * c;
                map.extend(s..s + c);
            }
        }
        self.gather(x, map, vec![oh * ow, c])
    }

    /// Space-to-depth: `[h*w, c] -> [(h/r)*(w/r), r*r*c]`, channel block
    /// `dy*r + dx` holding the sub-pixel at `(dy, dx)`.
    pub fn pixel_unshuffle(&mut self, x: Var, h: usize, w: usize, r: usize) -> Result<Var> {
        let c = self.grid_dims(x, h, w, "pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(NumericsError::Contract(format!("pixel_unshuffle: {r} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / r, w / r);
        let mut map = Vec::with_capacity(h * w * c);
        for y in 0..oh {
            for xx in 0..ow {
                for dy in 0..r {
                    for dx in 0..r {
                        let s = ((y * r + dy) * w + xx * r + dx) * c;
                        map.extend(s..s + c);
                    }
                }
            }
        }
        self.gather(x, map, vec![oh * ow, r * r * c])
    }

    /// Inverse of [`pixel_unshuffle`](Self::pixel_unshuffle); `h`, `w` are the
    /// dimensions of the coarse input grid.
    pub fn pixel_shuffle(&mut self, x: Var, h: usize, w: usize, r: usize) -> Result<Var> {
        let cc = self.grid_dims(x, h, w, "pixel_shuffle")?;
        if r == 0 || cc % (r * r) != 0 {
            return Err(NumericsError::Contract(format!("pixel_shuffle: {cc} channels not divisible by {r}^2")));
        }
        let c = cc / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut map = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((y / r) * w + xx / r) * cc + ((y % r) * r + xx % r) * c;
                map.extend(s..s + c);
            }
        }
        self.gather(x, map, vec![oh * ow, c])
    }

    /// `[n, a] ++ [n, b] -> [n, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.dims2(a)?;
        let (nb, cb) = self.dims2(b)?;
        if n != nb {
            return Err(NumericsError::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::new([n, ca + cb], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean squared difference between two same-shape values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        MatView::dense(gd, m, n),
                        MatView::dense(self.value(*b).data(), k, n).t(),
                        T::zero(),
                        MatViewMut::dense(&mut da, m, k),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        MatView::dense(self.value(*a).data(), m, k).t(),
                        MatView::dense(gd, m, n),
                        T::zero(),
                        MatViewMut::dense(&mut db, k, n),
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_slice(grads, *a, gd, T::one());
                self.accumulate_slice(grads, *b, gd, T::one());
            }
            Op::Sub(a, b) => {
                self.accumulate_slice(grads, *a, gd, T::one());
                self.accumulate_slice(grads, *b, gd, -T::one());
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => self.accumulate_slice(grads, *a, gd, *s),
            Op::AddRow(x, row) => {
                self.accumulate_slice(grads, *x, gd, T::one());
                if self.requires_grad(*row) {
                    let c = self.value(*row).numel();
                    let mut dr = vec![T::zero(); c];
                    for chunk in gd.chunks(c) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).numel();
                let n = rstd.len();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut dx = vec![T::zero(); n * c];
                    for i in 0..n {
                        let gr = &gd[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            dx[i * c + j] = rstd[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (gr, xh) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xh[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![T::zero(); c];
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.dims2().unwrap().1;
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gd, grads);
            }
            Op::Gather { x, map } => {
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (&src, &g) in map.iter().zip(gd) {
                        if src != ZERO {
                            dx[src] += g;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool2 { x, h, w } => {
                let c = self.value(*x).dims2().unwrap().1;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..oh {
                    for xx in 0..ow {
                        let o = (y * ow + xx) * c;
                        for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = ((2 * y + dy) * w + 2 * xx + ddx) * c;
                            for ch in 0..c {
                                dx[s + ch] += gd[o + ch] * quarter;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Im2Col { x, h, w } => {
                let c = self.value(*x).dims2().unwrap().1;
                let mut dx = vec![T::zero(); h * w * c];
                for_each_tap(*h, *w, |o, k, s| {
                    let g = &gd[(o * 9 + k) * c..(o * 9 + k + 1) * c];
                    for (d, &v) in dx[s * c..(s + 1) * c].iter_mut().zip(g) {
                        *d += v;
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = self.value(*a).dims2().unwrap();
                let cb = self.value(*b).dims2().unwrap().1;
                let w = ca + cb;
                if self.requires_grad(*a) {
                    let da = (0..n).flat_map(|i| gd[i * w..i * w + ca].iter().copied()).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = (0..n).flat_map(|i| gd[i * w + ca..(i + 1) * w].iter().copied()).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0] / T::of(n as f64); n]);
            }
            Op::Reshape(x) => self.accumulate_slice(grads, *x, gd, T::one()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let s = attention_shapes(qv, kv, vv, heads).expect("shapes validated in forward");
        let (n, m, d, dv) = (s.n, s.m, s.d, s.dv);
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (need_q, need_k, need_v) = (self.requires_grad(q), self.requires_grad(k), self.requires_grad(v));
        let mut dq = vec![T::zero(); if need_q { n * d } else { 0 }];
        let mut dk = vec![T::zero(); if need_k { m * d } else { 0 }];
        let mut dvv = vec![T::zero(); if need_v { m * dv } else { 0 }];
        let mut dp = vec![T::zero(); n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let g_h = MatView::dense(gd, n, dv).cols(h * dvh, dvh);
            if need_v {
                gemm(
                    T::one(),
                    MatView::dense(p, n, m).t(),
                    g_h,
                    T::zero(),
                    MatViewMut::dense(&mut dvv, m, dv).cols(h * dvh, dvh),
                );
            }
            if !(need_q || need_k) {
                continue;
            }
            gemm(
                T::one(),
                g_h,
                MatView::dense(vv.data(), m, dv).cols(h * dvh, dvh).t(),
                T::zero(),
                MatViewMut::dense(&mut dp, n, m),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√d scale.
            for (dr, pr) in dp.chunks_mut(m).zip(p.chunks(m)) {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for j in 0..m {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            if need_q {
                gemm(
                    T::one(),
                    MatView::dense(&dp, n, m),
                    MatView::dense(kv.data(), m, d).cols(h * dh, dh),
                    T::zero(),
                    MatViewMut::dense(&mut dq, n, d).cols(h * dh, dh),
                );
            }
            if need_k {
                gemm(
                    T::one(),
                    MatView::dense(&dp, n, m).t(),
                    MatView::dense(qv.data(), n, d).cols(h * dh, dh),
                    T::zero(),
                    MatViewMut::dense(&mut dk, m, d).cols(h * dh, dh),
                );
            }
        }
        if need_q {
            self.accumulate(grads, q, dq);
        }
        if need_k {
            self.accumulate(grads, k, dk);
        }
        if need_v {
            self.accumulate(grads, v, dvv);
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, delta: Vec<T>) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.shape(var).to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape matches value"));
            }
        }
    }

    fn accumulate_slice(&self, grads: &mut [Option<Tensor<T>>], var: Var, delta: &[T], factor: T) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, &d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d * factor;
                }
            }
            slot @ None => {
                let shape = self.shape(var).to_vec();
                let data = delta.iter().map(|&d| d * factor).collect();
                *slot = Some(Tensor::new(shape, data).expect("gradient shape matches value"));
            }
        }
    }
}
