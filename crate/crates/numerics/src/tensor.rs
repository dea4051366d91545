use crate::error::{NumericsError, Result};
use crate::real::{gemm, MatView, MatViewMut, Real};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::Contract(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NumericsError::Contract(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(NumericsError::shape(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::of(x.as_f64())).collect() }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> T {
        T::of(self.data.iter().map(|x| x.as_f64()).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatView::dense(a.data(), m, k),
        MatView::dense(b.data(), k, n),
        T::zero(),
        MatViewMut::dense(&mut out, m, n),
    );
    Tensor::new([m, n], out)
}

/// Softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NumericsError::Contract(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..n).map(|j| data[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                data[idx(j)] /= total;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_rows_in_place<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub(crate) struct AttentionShapes {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub dv: usize,
    pub heads: usize,
}

pub(crate) fn attention_shapes<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<AttentionShapes> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if d != dk {
        return Err(NumericsError::shape("attention (query/key width)", q.shape(), k.shape()));
    }
    if m != mv {
        return Err(NumericsError::shape("attention (key/value length)", k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(NumericsError::Contract(format!(
            "attention: {heads} heads do not divide widths {d} and {dv}"
        )));
    }
    Ok(AttentionShapes { n, m, d, dv, heads })
}

/// Multi-head scaled dot-product attention; returns the output and the
/// per-head probability matrices laid out as `[heads, n, m]`.
pub(crate) fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let AttentionShapes { n, m, d, dv, heads } = attention_shapes(q, k, v, heads)?;
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * n * m];
    let mut out = vec![T::zero(); n * dv];
    for h in 0..heads {
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        gemm(
            scale,
            MatView::dense(q.data(), n, d).cols(h * dh, dh),
            MatView::dense(k.data(), m, d).cols(h * dh, dh).t(),
            T::zero(),
            MatViewMut::dense(p, n, m),
        );
        softmax_rows_in_place(p, m);
        gemm(
            T::one(),
            MatView::dense(p, n, m),
            MatView::dense(v.data(), m, dv).cols(h * dvh, dvh),
            T::zero(),
            MatViewMut::dense(&mut out, n, dv).cols(h * dvh, dvh),
        );
    }
    Ok((Tensor::new([n, dv], out)?, probs))
}

/// `softmax(q kᵀ / √d) v` for a single head.
pub fn attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    multi_head_attention(q, k, v, 1)
}

/// Attention with the query/key and value widths split evenly into `heads`.
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    attention_forward(q, k, v, heads).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn softmax_uniform_and_exact() {
        let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn attention_single_key() {
        let out = attention(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[5.0, 5.0]))
            .unwrap();
        assert_eq!(out.data(), &[5.0, 5.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let k = t(&[3, 2], &[0.3, -1.0, 0.3, -1.0, 0.3, -1.0]);
        let v = t(&[3, 1], &[1.0, 2.0, 6.0]);
        let out = attention(&t(&[1, 2], &[4.0, 7.0]), &k, &v).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_sharp_query() {
        let out = attention(
            &t(&[1, 2], &[10.0, 0.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        // Hand evaluation: a = 10/sqrt(2); w0 = 1 / (1 + exp(-a)).
        let a = 10.0 / 2f64.sqrt();
        let w0 = 1.0 / (1.0 + (-a).exp());
        assert!((out.data()[0] - w0).abs() < 1e-12);
        assert!((out.data()[1] - (1.0 - w0)).abs() < 1e-12);
        assert!((out.data()[0] - 0.99915).abs() < 1e-5);
    }

    #[test]
    fn attention_shape_errors() {
        let q = t(&[1, 2], &[1.0, 0.0]);
        let k = t(&[1, 3], &[1.0, 0.0, 0.0]);
        let err = attention(&q, &k, &k).unwrap_err();
        assert!(matches!(err, NumericsError::Shape { .. }));
        assert!(err.to_string().contains("[1, 2]"));
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        assert!(matmul(&b, &b).is_err());
    }
}
