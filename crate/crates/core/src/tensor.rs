//! Dense kernels with hand-derived gradients.
//!
//! Vectors are plain `[f64]` slices. Matrices and third-order tensors are
//! row-major; slice `i` of a [`Tensor3`] is a `d1 x d2` matrix.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value at input {index} during gradient check")]
    NonFinite { index: usize },
}

fn mismatch(op: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> TensorError {
    TensorError::Shape { op, expected: expected.to_string(), found: found.to_string() }
}

fn check_len(op: &'static str, what: &str, v: &[f64], n: usize) -> Result<(), TensorError> {
    if v.len() != n {
        return Err(mismatch(op, format!("{what}[{n}]"), format!("{what}[{}]", v.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(mismatch("mat", format!("{} entries", rows * cols), format!("{} entries", data.len())));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, TensorError> {
        if v.len() != self.cols {
            return Err(mismatch("matvec", format!("{}x{} · [{}]", self.rows, self.cols, self.cols), format!("[{}]", v.len())));
        }
        Ok(self.data.chunks_exact(self.cols.max(1)).take(self.rows).map(|row| dot(row, v)).collect())
    }

    /// `selfᵀ · v`
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>, TensorError> {
        if v.len() != self.rows {
            return Err(mismatch("matvec_t", format!("[{}]", self.rows), format!("[{}]", v.len())));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr != 0.0 {
                axpy(&mut out, vr, self.row(r));
            }
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!((a.len(), b.len()), (self.rows, self.cols));
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != 0.0 {
                let cols = self.cols;
                axpy(&mut self.data[r * cols..(r + 1) * cols], s, b);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d1: usize,
    d2: usize,
    slices: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, slices: usize) -> Self {
        Tensor3 { d1, d2, slices, data: vec![0.0; d1 * d2 * slices] }
    }

    pub fn from_vec(d1: usize, d2: usize, slices: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != d1 * d2 * slices {
            return Err(mismatch(
                "tensor3",
                format!("{} entries", d1 * d2 * slices),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Tensor3 { d1, d2, slices, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.d1, self.d2, self.slices)
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, slice: usize, r: usize, c: usize) -> f64 {
        self.data[(slice * self.d1 + r) * self.d2 + c]
    }

    pub fn set(&mut self, slice: usize, r: usize, c: usize, v: f64) {
        self.data[(slice * self.d1 + r) * self.d2 + c] = v;
    }

    fn slice(&self, i: usize) -> &[f64] {
        let n = self.d1 * self.d2;
        &self.data[i * n..(i + 1) * n]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Elementwise nonlinearity. Derivatives are expressed through the output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    /// Derivative at the pre-activation whose image is `out`.
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// `z_i = xᵀ W[i] y`
pub fn bilinear(x: &[f64], w: &Tensor3, y: &[f64]) -> Result<Vec<f64>, TensorError> {
    if x.len() != w.d1 || y.len() != w.d2 {
        return Err(mismatch(
            "bilinear",
            format!("x[{}], y[{}] for W {}x{}x{}", w.d1, w.d2, w.d1, w.d2, w.slices),
            format!("x[{}], y[{}]", x.len(), y.len()),
        ));
    }
    Ok((0..w.slices)
        .map(|i| {
            w.slice(i)
                .chunks_exact(w.d2.max(1))
                .zip(x)
                .map(|(row, &xa)| if xa == 0.0 { 0.0 } else { xa * dot(row, y) })
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrads {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Tensor3,
}

pub fn bilinear_backward(x: &[f64], w: &Tensor3, y: &[f64], upstream: &[f64]) -> Result<BilinearGrads, TensorError> {
    let mut g = BilinearGrads { x: vec![0.0; w.d1], y: vec![0.0; w.d2], w: Tensor3::zeros(w.d1, w.d2, w.slices) };
    bilinear_backward_into(x, w, y, upstream, &mut g.x, &mut g.y, &mut g.w)?;
    Ok(g)
}

/// Accumulating form of [`bilinear_backward`].
pub fn bilinear_backward_into(
    x: &[f64],
    w: &Tensor3,
    y: &[f64],
    upstream: &[f64],
    dx: &mut [f64],
    dy: &mut [f64],
    dw: &mut Tensor3,
) -> Result<(), TensorError> {
    if x.len() != w.d1 || y.len() != w.d2 {
        return Err(mismatch("bilinear_backward", format!("x[{}], y[{}]", w.d1, w.d2), format!("x[{}], y[{}]", x.len(), y.len())));
    }
    check_len("bilinear_backward", "upstream", upstream, w.slices)?;
    let (d1, d2) = (w.d1, w.d2);
    for (i, &gi) in upstream.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let slice = w.slice(i);
        for a in 0..d1 {
            let row = &slice[a * d2..(a + 1) * d2];
            dx[a] += gi * dot(row, y);
            axpy(dy, gi * x[a], row);
            let base = (i * d1 + a) * d2;
            axpy(&mut dw.data[base..base + d2], gi * x[a], y);
        }
    }
    Ok(())
}

/// Weights of the pair-scoring layer `U·f(xᵀWy + V[x;y] + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLayer {
    /// `d_out x k`
    pub u: Mat,
    /// `d x d x k`
    pub w: Tensor3,
    /// `k x 2d`
    pub v: Mat,
    /// `k`
    pub b: Vec<f64>,
}

impl PairLayer {
    pub fn zeros(d: usize, k: usize, d_out: usize) -> Self {
        PairLayer { u: Mat::zeros(d_out, k), w: Tensor3::zeros(d, d, k), v: Mat::zeros(k, 2 * d), b: vec![0.0; k] }
    }

    fn check(&self, op: &'static str, x: &[f64], y: &[f64]) -> Result<(), TensorError> {
        let (d1, d2, k) = self.w.shape();
        let d = x.len();
        if d1 != d || d2 != d || y.len() != d {
            return Err(mismatch(op, format!("x[{d1}], y[{d2}]"), format!("x[{d}], y[{}]", y.len())));
        }
        if self.v.shape() != (k, 2 * d) || self.u.cols() != k || self.b.len() != k {
            return Err(mismatch(
                op,
                format!("V {k}x{}, U _x{k}, b[{k}]", 2 * d),
                format!("V {}x{}, U _x{}, b[{}]", self.v.rows(), self.v.cols(), self.u.cols(), self.b.len()),
            ));
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64], y: &[f64], f: Activation) -> Vec<f64> {
        let d = x.len();
        let mut a = bilinear(x, &self.w, y).expect("shape checked");
        for (i, ai) in a.iter_mut().enumerate() {
            let row = self.v.row(i);
            *ai += dot(&row[..d], x) + dot(&row[d..], y) + self.b[i];
            *ai = f.apply(*ai);
        }
        a
    }
}

pub fn rntn_layer(x: &[f64], y: &[f64], weights: &PairLayer, f: Activation) -> Result<Vec<f64>, TensorError> {
    weights.check("rntn_layer", x, y)?;
    weights.u.matvec(&weights.hidden(x, y, f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLayerGrads {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub weights: PairLayer,
}

pub fn rntn_layer_backward(
    x: &[f64],
    y: &[f64],
    weights: &PairLayer,
    f: Activation,
    upstream: &[f64],
) -> Result<PairLayerGrads, TensorError> {
    let (d, _, k) = weights.w.shape();
    let mut g = PairLayerGrads { x: vec![0.0; d], y: vec![0.0; d], weights: PairLayer::zeros(d, k, weights.u.rows()) };
    rntn_layer_backward_into(x, y, weights, f, upstream, &mut g)?;
    Ok(g)
}

/// Accumulating form of [`rntn_layer_backward`].
pub fn rntn_layer_backward_into(
    x: &[f64],
    y: &[f64],
    weights: &PairLayer,
    f: Activation,
    upstream: &[f64],
    g: &mut PairLayerGrads,
) -> Result<(), TensorError> {
    weights.check("rntn_layer_backward", x, y)?;
    check_len("rntn_layer_backward", "upstream", upstream, weights.u.rows())?;
    let d = x.len();
    let h = weights.hidden(x, y, f);
    g.weights.u.add_outer(1.0, upstream, &h);
    let mut da = weights.u.matvec_t(upstream)?;
    for (dai, hi) in da.iter_mut().zip(&h) {
        *dai *= f.derivative_from_output(*hi);
    }
    axpy(&mut g.weights.b, 1.0, &da);
    for (i, &dai) in da.iter().enumerate() {
        if dai == 0.0 {
            continue;
        }
        let row = weights.v.row(i);
        axpy(&mut g.x, dai, &row[..d]);
        axpy(&mut g.y, dai, &row[d..]);
        let cols = 2 * d;
        let grow = &mut g.weights.v.data_mut()[i * cols..(i + 1) * cols];
        axpy(&mut grow[..d], dai, x);
        axpy(&mut grow[d..], dai, y);
    }
    bilinear_backward_into(x, &weights.w, y, &da, &mut g.x, &mut g.y, &mut g.weights.w)
}

/// Weights of the residual update layer `x + U·f(xᵀWy + V·y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLayer {
    /// `d x k`
    pub u: Mat,
    /// `d x d x k`
    pub w: Tensor3,
    /// `k x d`
    pub v: Mat,
}

impl UpdateLayer {
    pub fn zeros(d: usize, k: usize) -> Self {
        UpdateLayer { u: Mat::zeros(d, k), w: Tensor3::zeros(d, d, k), v: Mat::zeros(k, d) }
    }

    fn check(&self, op: &'static str, x: &[f64], y: &[f64]) -> Result<(), TensorError> {
        let (d1, d2, k) = self.w.shape();
        let d = x.len();
        if d1 != d || d2 != d || y.len() != d {
            return Err(mismatch(op, format!("x[{d1}], y[{d2}]"), format!("x[{d}], y[{}]", y.len())));
        }
        if self.v.shape() != (k, d) || self.u.shape() != (d, k) {
            return Err(mismatch(
                op,
                format!("V {k}x{d}, U {d}x{k}"),
                format!("V {}x{}, U {}x{}", self.v.rows(), self.v.cols(), self.u.rows(), self.u.cols()),
            ));
        }
        Ok(())
    }

    fn hidden(&self, x: &[f64], y: &[f64], f: Activation) -> Vec<f64> {
        let mut a = bilinear(x, &self.w, y).expect("shape checked");
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = f.apply(*ai + dot(self.v.row(i), y));
        }
        a
    }
}

pub fn rtn_update(x: &[f64], y: &[f64], weights: &UpdateLayer, f: Activation) -> Result<Vec<f64>, TensorError> {
    weights.check("rtn_update", x, y)?;
    let mut out = weights.u.matvec(&weights.hidden(x, y, f))?;
    for (o, xi) in out.iter_mut().zip(x) {
        *o += xi;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLayerGrads {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub weights: UpdateLayer,
}

pub fn rtn_update_backward(
    x: &[f64],
    y: &[f64],
    weights: &UpdateLayer,
    f: Activation,
    upstream: &[f64],
) -> Result<UpdateLayerGrads, TensorError> {
    let (d, _, k) = weights.w.shape();
    let mut g = UpdateLayerGrads { x: vec![0.0; d], y: vec![0.0; d], weights: UpdateLayer::zeros(d, k) };
    rtn_update_backward_into(x, y, weights, f, upstream, &mut g.x, &mut g.y, &mut g.weights)?;
    Ok(g)
}

/// Accumulating form of [`rtn_update_backward`]; weight gradients go to
/// `dweights` so that several applications of one weight set can share it.
#[allow(clippy::too_many_arguments)]
pub fn rtn_update_backward_into(
    x: &[f64],
    y: &[f64],
    weights: &UpdateLayer,
    f: Activation,
    upstream: &[f64],
    dx: &mut [f64],
    dy: &mut [f64],
    dweights: &mut UpdateLayer,
) -> Result<(), TensorError> {
    weights.check("rtn_update_backward", x, y)?;
    check_len("rtn_update_backward", "upstream", upstream, x.len())?;
    // residual path
    axpy(dx, 1.0, upstream);
    let h = weights.hidden(x, y, f);
    dweights.u.add_outer(1.0, upstream, &h);
    let mut da = weights.u.matvec_t(upstream)?;
    for (dai, hi) in da.iter_mut().zip(&h) {
        *dai *= f.derivative_from_output(*hi);
    }
    dweights.v.add_outer(1.0, &da, y);
    let vt = weights.v.matvec_t(&da)?;
    axpy(dy, 1.0, &vt);
    bilinear_backward_into(x, &weights.w, y, &da, dx, dy, &mut dweights.w)
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// `-log softmax(logits)[target]`, computed without forming the probabilities.
pub fn softmax_xent(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Gradient of `upstream · softmax_xent(logits, target)` with respect to the logits.
pub fn softmax_xent_backward(logits: &[f64], target: usize, upstream: f64) -> Result<Vec<f64>, TensorError> {
    if target >= logits.len() {
        return Err(mismatch("softmax_xent_backward", format!("target < {}", logits.len()), target));
    }
    let mut g = softmax(logits);
    g[target] -= 1.0;
    for gi in &mut g {
        *gi *= upstream;
    }
    Ok(g)
}

/// Index of the largest entry; the earliest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference check of a scalar function against its analytic
/// gradient. Returns the largest `|a - n| / max(1, |a|, |n|)` over inputs.
pub fn grad_check<F>(mut f: F, inputs: &[f64], analytic: &[f64], eps: f64) -> Result<f64, TensorError>
where
    F: FnMut(&[f64]) -> f64,
{
    check_len("grad_check", "analytic", analytic, inputs.len())?;
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        probe[i] = inputs[i] + eps;
        let plus = f(&probe);
        probe[i] = inputs[i] - eps;
        let minus = f(&probe);
        probe[i] = inputs[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_t3(rng: &mut ChaCha8Rng, d1: usize, d2: usize, k: usize) -> Tensor3 {
        Tensor3::from_vec(d1, d2, k, rand_vec(rng, d1 * d2 * k)).unwrap()
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, rand_vec(rng, r * c)).unwrap()
    }

    // indexed loops on purpose: this is the reference formula
    #[allow(clippy::needless_range_loop)]
    fn naive_bilinear(x: &[f64], w: &Tensor3, y: &[f64]) -> Vec<f64> {
        let (d1, d2, k) = w.shape();
        let mut z = vec![0.0; k];
        for (i, zi) in z.iter_mut().enumerate() {
            for a in 0..d1 {
                for b in 0..d2 {
                    *zi += x[a] * w.get(i, a, b) * y[b];
                }
            }
        }
        z
    }

    #[test]
    fn bilinear_examples() {
        let w = Tensor3::from_vec(1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(bilinear(&[2.0], &w, &[3.0]).unwrap(), vec![6.0]);
        let w = Tensor3::zeros(3, 3, 4);
        assert_eq!(bilinear(&[1.0, 2.0, 3.0], &w, &[4.0, 5.0, 6.0]).unwrap(), vec![0.0; 4]);
        let err = bilinear(&[1.0], &w, &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("x[3], y[3]") && err.to_string().contains("x[1]"), "{err}");
    }

    proptest! {
        #[test]
        fn bilinear_matches_triple_loop(d1 in 1usize..=8, d2 in 1usize..=8, k in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_vec(&mut rng, d1);
            let y = rand_vec(&mut rng, d2);
            let w = rand_t3(&mut rng, d1, d2, k);
            let fast = bilinear(&x, &w, &y).unwrap();
            for (a, b) in fast.iter().zip(naive_bilinear(&x, &w, &y)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn update_delta_ignores_x_without_tensor(d in 1usize..=8, k in 1usize..=6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = UpdateLayer { u: rand_mat(&mut rng, d, k), w: Tensor3::zeros(d, d, k), v: rand_mat(&mut rng, k, d) };
            let y = rand_vec(&mut rng, d);
            let x1 = rand_vec(&mut rng, d);
            let x2 = rand_vec(&mut rng, d);
            let o1 = rtn_update(&x1, &y, &layer, Activation::Tanh).unwrap();
            let o2 = rtn_update(&x2, &y, &layer, Activation::Tanh).unwrap();
            for i in 0..d {
                prop_assert!(((o1[i] - x1[i]) - (o2[i] - x2[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let (p, q) = (softmax(&v), softmax(&shifted));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(argmax(&p), argmax(&v));
        }
    }

    #[test]
    fn rntn_layer_examples() {
        let w = PairLayer::zeros(3, 2, 3);
        assert_eq!(rntn_layer(&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0], &w, Activation::Tanh).unwrap(), vec![0.0; 3]);
        let mut w = PairLayer::zeros(2, 2, 2);
        w.u = Mat::identity(2);
        assert_eq!(rntn_layer(&[1.0, -2.0], &[0.5, 3.0], &w, Activation::Tanh).unwrap(), vec![0.0; 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, k) = (3, 2);
        let w = PairLayer { u: rand_mat(&mut rng, 4, k), w: rand_t3(&mut rng, d, d, k), v: rand_mat(&mut rng, k, 2 * d), b: rand_vec(&mut rng, k) };
        let x = rand_vec(&mut rng, d);
        let y = rand_vec(&mut rng, d);
        let mut xy = x.clone();
        xy.extend(&y);
        let z = naive_bilinear(&x, &w.w, &y);
        let vxy = w.v.matvec(&xy).unwrap();
        let h: Vec<f64> = (0..k).map(|i| (z[i] + vxy[i] + w.b[i]).tanh()).collect();
        let expected = w.u.matvec(&h).unwrap();
        let got = rntn_layer(&x, &y, &w, Activation::Tanh).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rntn_layer(&x, &[1.0], &w, Activation::Tanh).is_err());
    }

    #[test]
    fn rtn_update_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, k) = (4, 3);
        let mut w = UpdateLayer { u: Mat::zeros(d, k), w: rand_t3(&mut rng, d, d, k), v: rand_mat(&mut rng, k, d) };
        let x = rand_vec(&mut rng, d);
        let y = rand_vec(&mut rng, d);
        assert_eq!(rtn_update(&x, &y, &w, Activation::Tanh).unwrap(), x);
        w.u = rand_mat(&mut rng, d, k);
        assert_eq!(rtn_update(&x, &[0.0; 4], &w, Activation::Tanh).unwrap(), x);

        let z = naive_bilinear(&x, &w.w, &y);
        let vy = w.v.matvec(&y).unwrap();
        let h: Vec<f64> = (0..k).map(|i| (z[i] + vy[i]).tanh()).collect();
        let uh = w.u.matvec(&h).unwrap();
        let got = rtn_update(&x, &y, &w, Activation::Tanh).unwrap();
        for i in 0..d {
            assert!((got[i] - (x[i] + uh[i])).abs() < 1e-12);
        }
        assert!(rtn_update(&x, &y, &UpdateLayer::zeros(d, k + 1), Activation::Tanh).is_ok());
        assert!(rtn_update(&x, &y, &UpdateLayer::zeros(d + 1, k), Activation::Tanh).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for pi in p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0] > 0.999 && p.iter().all(|x| x.is_finite()));
        assert!((softmax_xent(&[0.0, 0.0, 0.0], 1) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, k) = (3, 2);
        let layer = UpdateLayer { u: rand_mat(&mut rng, d, k), w: rand_t3(&mut rng, d, d, k), v: rand_mat(&mut rng, k, d) };
        let x = rand_vec(&mut rng, d);
        let y = rand_vec(&mut rng, d);
        let g = rtn_update_backward(&x, &y, &layer, Activation::Tanh, &[0.0; 3]).unwrap();
        assert_eq!(g, UpdateLayerGrads { x: vec![0.0; d], y: vec![0.0; d], weights: UpdateLayer::zeros(d, k) });
        let gs = softmax_xent_backward(&[0.3, -1.0, 2.0], 2, 0.0).unwrap();
        assert!(gs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_jacobian_is_identity_with_zero_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, k) = (4, 2);
        let layer = UpdateLayer { u: Mat::zeros(d, k), w: rand_t3(&mut rng, d, d, k), v: rand_mat(&mut rng, k, d) };
        let x = rand_vec(&mut rng, d);
        let y = rand_vec(&mut rng, d);
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            let g = rtn_update_backward(&x, &y, &layer, Activation::Tanh, &e).unwrap();
            assert_eq!(g.x, e);
            assert!(g.y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn grad_check_identity_and_nonfinite() {
        let err = grad_check(|v| v[0] + 2.0 * v[1], &[0.3, -0.7], &[1.0, 2.0], 1e-5).unwrap();
        assert!(err < 1e-10);
        assert_eq!(grad_check(|v| (v[0]).ln(), &[0.0], &[1.0], 1e-5), Err(TensorError::NonFinite { index: 0 }));
    }

    // Each check packs (x, y, weights) into one flat vector and contracts the
    // layer output with a fixed random upstream to get a scalar.
    fn check_update(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=4);
        let layer = UpdateLayer { u: rand_mat(&mut rng, d, k), w: rand_t3(&mut rng, d, d, k), v: rand_mat(&mut rng, k, d) };
        let x = rand_vec(&mut rng, d);
        let y = rand_vec(&mut rng, d);
        let up = rand_vec(&mut rng, d);
        let unpack = |p: &[f64]| {
            let (x, rest) = p.split_at(d);
            let (y, rest) = rest.split_at(d);
            let (u, rest) = rest.split_at(d * k);
            let (w, v) = rest.split_at(d * d * k);
            (
                x.to_vec(),
                y.to_vec(),
                UpdateLayer {
                    u: Mat::from_vec(d, k, u.to_vec()).unwrap(),
                    w: Tensor3::from_vec(d, d, k, w.to_vec()).unwrap(),
                    v: Mat::from_vec(k, d, v.to_vec()).unwrap(),
                },
            )
        };
        let packed: Vec<f64> =
            [&x[..], &y, layer.u.data(), layer.w.data(), layer.v.data()].concat();
        let g = rtn_update_backward(&x, &y, &layer, Activation::Tanh, &up).unwrap();
        let analytic = [&g.x[..], &g.y, g.weights.u.data(), g.weights.w.data(), g.weights.v.data()].concat();
        grad_check(
            |p| {
                let (x, y, l) = unpack(p);
                dot(&rtn_update(&x, &y, &l, Activation::Tanh).unwrap(), &up)
            },
            &packed,
            &analytic,
            1e-5,
        )
        .unwrap()
    }

    fn check_pair(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=4);
        let d_out = rng.random_range(1..=5);
        let layer = PairLayer {
            u: rand_mat(&mut rng, d_out, k),
            w: rand_t3(&mut rng, d, d, k),
            v: rand_mat(&mut rng, k, 2 * d),
            b: rand_vec(&mut rng, k),
        };
        let x = rand_vec(&mut rng, d);
        let y = rand_vec(&mut rng, d);
        let up = rand_vec(&mut rng, d_out);
        let unpack = |p: &[f64]| {
            let (x, rest) = p.split_at(d);
            let (y, rest) = rest.split_at(d);
            let (u, rest) = rest.split_at(d_out * k);
            let (w, rest) = rest.split_at(d * d * k);
            let (v, b) = rest.split_at(k * 2 * d);
            (
                x.to_vec(),
                y.to_vec(),
                PairLayer {
                    u: Mat::from_vec(d_out, k, u.to_vec()).unwrap(),
                    w: Tensor3::from_vec(d, d, k, w.to_vec()).unwrap(),
                    v: Mat::from_vec(k, 2 * d, v.to_vec()).unwrap(),
                    b: b.to_vec(),
                },
            )
        };
        let packed: Vec<f64> = [&x[..], &y, layer.u.data(), layer.w.data(), layer.v.data(), &layer.b].concat();
        let g = rntn_layer_backward(&x, &y, &layer, Activation::Tanh, &up).unwrap();
        let w = &g.weights;
        let analytic = [&g.x[..], &g.y, w.u.data(), w.w.data(), w.v.data(), &w.b].concat();
        grad_check(
            |p| {
                let (x, y, l) = unpack(p);
                dot(&rntn_layer(&x, &y, &l, Activation::Tanh).unwrap(), &up)
            },
            &packed,
            &analytic,
            1e-5,
        )
        .unwrap()
    }

    fn check_bilinear(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d1, d2, k) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let w = rand_t3(&mut rng, d1, d2, k);
        let x = rand_vec(&mut rng, d1);
        let y = rand_vec(&mut rng, d2);
        let up = rand_vec(&mut rng, k);
        let packed = [&x[..], &y, w.data()].concat();
        let g = bilinear_backward(&x, &w, &y, &up).unwrap();
        let analytic = [&g.x[..], &g.y, g.w.data()].concat();
        grad_check(
            |p| {
                let (x, rest) = p.split_at(d1);
                let (y, w) = rest.split_at(d2);
                let w = Tensor3::from_vec(d1, d2, k, w.to_vec()).unwrap();
                dot(&bilinear(x, &w, y).unwrap(), &up)
            },
            &packed,
            &analytic,
            1e-5,
        )
        .unwrap()
    }

    fn check_xent(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=6);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target = rng.random_range(0..n);
        let up = rng.random_range(0.1..2.0);
        let g = softmax_xent_backward(&logits, target, up).unwrap();
        grad_check(|p| up * softmax_xent(p, target), &logits, &g, 1e-5).unwrap()
    }

    #[test]
    fn all_backward_ops_pass_finite_differences() {
        for seed in 0..24 {
            for (name, err) in [
                ("bilinear", check_bilinear(seed)),
                ("rntn_layer", check_pair(seed)),
                ("rtn_update", check_update(seed)),
                ("softmax_xent", check_xent(seed)),
            ] {
                assert!(err < 1e-6, "{name} seed {seed}: {err:e}");
            }
        }
    }
}
