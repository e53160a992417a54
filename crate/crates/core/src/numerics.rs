//! Dense f64 linear algebra, activations and their hand-written backward passes.
//!
//! Every forward op here has a matching `*_backward` that *accumulates* into
//! caller-owned gradient buffers, so a whole network's gradient can be built by
//! walking its ops in reverse without intermediate allocation.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense real vector.
/// Initial bias of ReLU hidden units.
pub const RELU_BIAS_INIT: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape { op: "Matrix::from_vec", left: (rows, cols), right: (data.len(), 1) });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { coordinate: i });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn concat(parts: &[&[f64]]) -> Vector {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        out.extend_from_slice(p);
    }
    Vector(out)
}

fn check_affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<()> {
    if w.cols != x.len() {
        return Err(Error::Shape { op: "affine", left: w.shape(), right: (x.len(), 1) });
    }
    if w.rows != b.len() {
        return Err(Error::Shape { op: "affine", left: w.shape(), right: (b.len(), 1) });
    }
    Ok(())
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vector> {
    check_affine(w, x, b)?;
    Ok((0..w.rows).map(|i| dot(w.row(i), x) + b[i]).collect())
}

/// `W x` without bias.
pub fn matvec(w: &Matrix, x: &[f64]) -> Result<Vector> {
    if w.cols != x.len() {
        return Err(Error::Shape { op: "matvec", left: w.shape(), right: (x.len(), 1) });
    }
    Ok((0..w.rows).map(|i| dot(w.row(i), x)).collect())
}

/// Backward of `y = W x (+ b)` given `dy`.
///
/// Accumulates `dW += dy xᵀ`, `db += dy` (if given) and `dx += Wᵀ dy` (if given).
pub fn affine_backward(
    w: &Matrix,
    x: &[f64],
    dy: &[f64],
    dw: &mut Matrix,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    debug_assert_eq!(dw.shape(), w.shape());
    debug_assert_eq!(dy.len(), w.rows);
    for (i, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(g, x, dw.row_mut(i));
        }
    }
    if let Some(db) = db {
        axpy(1.0, dy, db);
    }
    if let Some(dx) = dx {
        for (i, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(i), dx);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => relu(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn activate(kind: Activation, x: &[f64]) -> Vector {
    x.iter().map(|&v| kind.apply(v)).collect()
}

/// `dx = dy ⊙ act'(x)` from the forward output `y`.
pub fn activate_backward(kind: Activation, y: &[f64], dy: &[f64]) -> Vector {
    y.iter().zip(dy).map(|(&yi, &g)| g * kind.derivative_from_output(yi)).collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(e: &[f64]) -> Result<Vector> {
    if e.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|v| v / sum).collect())
}

/// Given softmax output `w` and upstream `dw`, returns `de`.
pub fn softmax_backward(w: &[f64], dw: &[f64]) -> Vector {
    let s = dot(w, dw);
    w.iter().zip(dw).map(|(&wi, &gi)| wi * (gi - s)).collect()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(Vector(grad))
}

/// Relative error used by every gradient check in this crate.
///
/// Magnitudes below `floor` are compared absolutely so that entries which
/// are zero on both sides do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // scalar triple-loop oracle: y_i = sum_k W[i][k] x[k] + b[i]
    fn affine_oracle(w: &Matrix, x: &[f64], b: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; w.rows()];
        for i in 0..w.rows() {
            let mut acc = 0.0;
            for k in 0..w.cols() {
                acc += w.get(i, k) * x[k];
            }
            y[i] = acc + b[i];
        }
        y
    }

    #[test]
    fn affine_identity_and_zero() {
        let y = affine(&Matrix::identity(2), &[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(&*y, &[3.0, 4.0]);
        let y = affine(&Matrix::zeros(2, 5), &[9.0, -1.0, 2.0, 7.0, 0.5], &[1.0, 2.0]).unwrap();
        assert_eq!(&*y, &[1.0, 2.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(r, c) in &[(4, 3), (1, 1), (17, 5), (64, 64)] {
            let w = random_matrix(&mut rng, r, c);
            let x = random_vec(&mut rng, c);
            let b = random_vec(&mut rng, r);
            let got = affine(&w, &x, &b).unwrap();
            for (g, e) in got.iter().zip(affine_oracle(&w, &x, &b)) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let err = affine(&Matrix::zeros(2, 3), &[1.0, 2.0], &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(2, 1)"), "{msg}");
        assert!(affine(&Matrix::zeros(2, 3), &[1.0; 3], &[0.0]).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(activate(Activation::Sigmoid, &[0.0])[0], 0.5);
        assert_eq!(activate(Activation::Tanh, &[0.0])[0], 0.0);
        assert_eq!(activate(Activation::Relu, &[-1.0])[0], 0.0);
        assert!((sigmoid(10.0) - 0.9999546).abs() < 1e-7);
        for x in [-1e308, -800.0, 800.0, 1e308] {
            let s = sigmoid(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn softmax_cases() {
        let w = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in w.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let e = [0.3, -1.2, 2.5];
        let a = softmax(&e).unwrap();
        let b = softmax(&e.map(|v| v + 100.0)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(softmax(&[]).is_err());
        let big = softmax(&[1000.0, 999.0]).unwrap();
        assert!(big.is_finite());
    }

    #[test]
    fn finite_diff_cases() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_vec(&mut rng, 6);
        let g = finite_diff_grad(|x| x.iter().map(|&v| sigmoid(v)).sum(), &x, 1e-5).unwrap();
        for (gi, &xi) in g.iter().zip(&x) {
            let s = sigmoid(xi);
            assert!((gi - s * (1.0 - s)).abs() < 1e-7);
        }

        let err = finite_diff_grad(|x| if x[1] > 2.0 { f64::NAN } else { 0.0 }, &[0.0, 2.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { coordinate: 1 }));
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, c) = (5, 4);
        let w = random_matrix(&mut rng, r, c);
        let x = random_vec(&mut rng, c);
        let b = random_vec(&mut rng, r);
        let proj = random_vec(&mut rng, r);
        // scalar objective: proj · act(Wx + b)
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
            let loss = |w: &Matrix, x: &[f64], b: &[f64]| dot(&proj, &activate(act, &affine(w, x, b).unwrap()));
            let y = activate(act, &affine(&w, &x, &b).unwrap());
            let dpre = activate_backward(act, &y, &proj);
            let mut dw = Matrix::zeros(r, c);
            let mut db = vec![0.0; r];
            let mut dx = vec![0.0; c];
            affine_backward(&w, &x, &dpre, &mut dw, Some(&mut db), Some(&mut dx));

            let num_w = finite_diff_grad(
                |flat| loss(&Matrix::from_vec(r, c, flat.to_vec()).unwrap(), &x, &b),
                w.as_slice(),
                1e-5,
            )
            .unwrap();
            let num_x = finite_diff_grad(|xv| loss(&w, xv, &b), &x, 1e-5).unwrap();
            let num_b = finite_diff_grad(|bv| loss(&w, &x, bv), &b, 1e-5).unwrap();
            for (a, n) in dw.as_slice().iter().zip(num_w.iter()).chain(dx.iter().zip(num_x.iter())).chain(db.iter().zip(num_b.iter())) {
                assert!(relative_error(*a, *n, 1e-7) < 1e-4, "{act:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = random_vec(&mut rng, 5);
        let proj = random_vec(&mut rng, 5);
        let w = softmax(&e).unwrap();
        let de = softmax_backward(&w, &proj);
        let num = finite_diff_grad(|e| dot(&proj, &softmax(e).unwrap()), &e, 1e-5).unwrap();
        for (a, n) in de.iter().zip(num.iter()) {
            assert!(relative_error(*a, *n, 1e-7) < 1e-4);
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(e in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let w = softmax(&e).unwrap();
            let s: f64 = w.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            proptest::prop_assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
