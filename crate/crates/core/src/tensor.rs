//! Dense row-major `f64` tensors and the differentiable primitives the
//! adapter stack is composed from.
//!
//! Backward passes are explicit functions: each `*_backward` takes the
//! forward inputs (or outputs) and the upstream gradient and returns the
//! input gradients. Parameter tensors accumulate into their own `grad`
//! buffer via [`Tensor::accumulate_grad`].

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows of a rank-2 tensor (or the leading dimension otherwise).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn expect_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_rank2(a, "matmul")?;
    let (k2, n) = expect_rank2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Returns `(dL/da, dL/db)` given `dL/dc`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = expect_rank2(a, "matmul_backward")?;
    let (_, n) = expect_rank2(b, "matmul_backward")?;
    if grad_out.shape() != [m, n] {
        return Err(Error::shape("matmul_backward", grad_out.shape(), &[m, n]));
    }
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let g = &grad_out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data[p * n..(p + 1) * n];
            ga[i * k + p] = dot(g, brow);
            let av = a.data[i * k + p];
            for (gbv, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g) {
                *gbv += av * gv;
            }
        }
    }
    Ok((Tensor::new(&[m, k], ga)?, Tensor::new(&[k, n], gb)?))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-batched affine map `y = x · wᵀ + bias` with `x: N×d`, `w: o×d`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (nrows, d) = expect_rank2(x, "linear")?;
    let (o, d2) = expect_rank2(w, "linear")?;
    if d != d2 {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::shape("linear bias", b.shape(), &[o]));
        }
    }
    let mut out = vec![0.0; nrows * o];
    for i in 0..nrows {
        let xr = &x.data[i * d..(i + 1) * d];
        for j in 0..o {
            let mut acc = dot(xr, &w.data[j * d..(j + 1) * d]);
            if let Some(b) = bias {
                acc += b.data[j];
            }
            out[i * o + j] = acc;
        }
    }
    Tensor::new(&[nrows, o], out)
}

/// Gradients of [`linear`]: `(dx, dw, dbias)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (nrows, d) = (x.rows(), x.cols());
    let o = w.rows();
    let mut gx = vec![0.0; nrows * d];
    let mut gw = vec![0.0; o * d];
    let mut gb = vec![0.0; o];
    for i in 0..nrows {
        let xr = &x.data[i * d..(i + 1) * d];
        let gr = &grad_out.data[i * o..(i + 1) * o];
        let gxr = &mut gx[i * d..(i + 1) * d];
        for (j, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[j] += g;
            let wr = &w.data[j * d..(j + 1) * d];
            let gwr = &mut gw[j * d..(j + 1) * d];
            for p in 0..d {
                gxr[p] += g * wr[p];
                gwr[p] += g * xr[p];
            }
        }
    }
    (
        Tensor::from_vec_unchecked(&[nrows, d], gx),
        Tensor::from_vec_unchecked(&[o, d], gw),
        Tensor::from_vec_unchecked(&[o], gb),
    )
}

impl Tensor {
    pub(crate) fn from_vec_unchecked(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape("softmax axis", shape, &[axis]));
    }
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

/// Softmax along `axis`, shifted by the running maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                out[idx(j)] /= sum;
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(x.shape(), out))
}

/// Vector-Jacobian product of softmax, from its output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(y.shape(), axis)?;
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let s: f64 = (0..n).map(|j| y.data[idx(j)] * grad_out.data[idx(j)]).sum();
            for j in 0..n {
                gx[idx(j)] = y.data[idx(j)] * (grad_out.data[idx(j)] - s);
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(y.shape(), gx))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_vec_unchecked(x.shape(), x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let g = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec_unchecked(x.shape(), g)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_vec_unchecked(x.shape(), x.data.iter().map(|&v| sigmoid_scalar(v)).collect())
}

/// Backward of sigmoid from its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let g = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&p, &g)| g * p * (1.0 - p))
        .collect();
    Tensor::from_vec_unchecked(y.shape(), g)
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    probe.grad = None;
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation at coordinate {i}: f(+)={up}, f(-)={down}"
            )));
        }
        g[i] = (up - down) / (2.0 * eps);
    }
    Ok(Tensor::from_vec_unchecked(x.shape(), g))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let v = t(&[3, 1], &[1.5, -2.0, 7.0]);
        assert_eq!(matmul(&Tensor::identity(3), &v).unwrap().data(), v.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut rng = RngStream::new(1, 0);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let c = matmul(&Tensor::zeros(&[2, 5]), &b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 1])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = 12345.0;
        let y = softmax(&t(&[2], &[c, c + 1000.0]), 0).unwrap();
        assert!(y.is_finite());
        assert!(y.data()[0] < 1e-300 && (y.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_logs() {
        let x = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let y = softmax(&x, 0).unwrap();
        for (v, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_axis0() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, -1.0]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((y.at(0, 1) + y.at(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_sigmoid_values() {
        let r = relu(&t(&[2], &[-1.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) == 1.0);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &t(&[2], &[1.0, 2.0]), 1e-5)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 3.0, &t(&[3], &[1.0, 2.0, 3.0]), 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|x| x.data()[0] * x.data()[1], &t(&[2], &[3.0, 5.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 5.0).abs() < 1e-6 && (g.data()[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_nonfinite() {
        let r = finite_diff_grad(|x| 1.0 / x.data()[0], &t(&[1], &[0.0]), 1e-5);
        assert!(r.is_ok()); // ±1/eps is finite
        let r = finite_diff_grad(|x| (x.data()[0]).ln(), &t(&[1], &[0.0]), 1e-5);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }
}
