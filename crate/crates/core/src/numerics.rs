//! Dense numeric kernels shared by every attention formulation.
//!
//! Everything here is a pure function of its inputs. Reductions run in a
//! fixed loop order so results are bitwise reproducible between runs.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::error::{arg_err, shape_err, Result};

/// Element type used by the engine. Implemented for `f32` and `f64`.
pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Rectangular identity: ones on the main diagonal.
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `x · M` for a row vector `x` of length `rows`; result has length `cols`.
    pub fn vecmat(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return shape_err(format!(
                "vecmat: vector length {} vs matrix rows {}",
                x.len(),
                self.rows
            ));
        }
        let mut out = vec![T::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o = *o + xr * m;
            }
        }
        Ok(out)
    }

    /// `M · x` for a column vector `x` of length `cols`; result has length `rows`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return shape_err(format!(
                "matvec: vector length {} vs matrix cols {}",
                x.len(),
                self.cols
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }
}

/// Standard matrix product with a fixed i-k-j loop order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return shape_err(format!("matmul: {}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o = *o + aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Dot product in index order. Callers guarantee equal lengths.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Softmax probabilities together with the log-sum-exp of the raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRow<T> {
    pub probs: Vec<T>,
    pub lse: T,
}

/// Max-stabilised softmax that also returns the log of the denominator.
pub fn softmax_lse<T: Scalar>(scores: &[T]) -> Result<SoftmaxRow<T>> {
    if scores.is_empty() {
        return arg_err("softmax over an empty score vector");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return arg_err("softmax scores must be finite");
    }
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    let lse = m + sum.ln();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    Ok(SoftmaxRow { probs, lse })
}

/// Softmax where only the first `visible` scores take part; the rest get
/// exactly zero probability. `visible == None` means no mask.
pub fn softmax_masked<T: Scalar>(scores: &[T], visible: Option<usize>) -> Result<SoftmaxRow<T>> {
    let n = visible.unwrap_or(scores.len()).min(scores.len());
    let mut row = softmax_lse(&scores[..n])?;
    row.probs.resize(scores.len(), T::zero());
    Ok(row)
}

pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() {
        return shape_err(format!(
            "rmsnorm: input length {} vs gain length {}",
            x.len(),
            gain.len()
        ));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let n = T::from_usize(x.len()).expect("length fits");
    let mean_sq = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / n;
    let denom = (mean_sq + eps).sqrt();
    if denom == T::zero() {
        // eps == 0 and x == 0
        return Ok(vec![T::zero(); x.len()]);
    }
    Ok(x.iter().zip(gain).map(|(&v, &g)| v * g / denom).collect())
}

/// Rotary embedding on consecutive pairs `(x[2j], x[2j+1])`, rotated by
/// `position * base^(-2j/len)`.
pub fn rope<T: Scalar>(x: &[T], position: usize, base: T) -> Result<Vec<T>> {
    if !x.len().is_multiple_of(2) {
        return shape_err(format!("rope needs an even length, got {}", x.len()));
    }
    if !(base > T::zero()) {
        return arg_err("rope base must be positive");
    }
    let len = T::from_usize(x.len()).expect("length fits");
    let pos = T::from_usize(position).expect("position fits");
    let two = T::one() + T::one();
    let mut out = Vec::with_capacity(x.len());
    for (j, pair) in x.chunks_exact(2).enumerate() {
        let exponent = -(two * T::from_usize(j).expect("index fits")) / len;
        let theta = pos * base.powf(exponent);
        let (sin, cos) = theta.sin_cos();
        out.push(pair[0] * cos - pair[1] * sin);
        out.push(pair[0] * sin + pair[1] * cos);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b.cols()]; a.rows()];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                for k in 0..a.cols() {
                    *cell += a.get(i, k) * b.get(k, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2, 2), &a).unwrap(), a);

        let r = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let c = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((got.get(i, j) - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::Shape(_))));
        assert!(Matrix::<f64>::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn vecmat_and_matvec_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 4, 6);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xm = matmul(&Matrix::new(1, 4, x.clone()).unwrap(), &m).unwrap();
        assert_eq!(m.vecmat(&x).unwrap(), xm.data());
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let my = matmul(&m, &Matrix::new(6, 1, y.clone()).unwrap()).unwrap();
        for (a, b) in m.matvec(&y).unwrap().iter().zip(my.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(m.vecmat(&y).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn softmax_examples() {
        let r = softmax_lse(&[0.0f64, 0.0]).unwrap();
        assert_eq!(r.probs, vec![0.5, 0.5]);
        assert!((r.lse - 2f64.ln()).abs() < 1e-15);
        assert!((r.lse - 0.693147).abs() < 1e-6);

        for s in [-3.5f64, 0.0, 42.0, 1e6] {
            let r = softmax_lse(&[s]).unwrap();
            assert_eq!(r.probs, vec![1.0]);
            assert_eq!(r.lse, s);
        }

        let r = softmax_lse(&[1000.0f64, 1000.0]).unwrap();
        assert_eq!(r.probs, vec![0.5, 0.5]);
        assert!((r.lse - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_lse::<f64>(&[]), Err(crate::Error::Argument(_))));
        assert!(softmax_lse(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn masked_positions_get_zero_probability() {
        let r = softmax_masked(&[5.0f64, 1.0, 100.0, 7.0], Some(2)).unwrap();
        assert_eq!(r.probs[2], 0.0);
        assert_eq!(r.probs[3], 0.0);
        assert!((r.probs[0] + r.probs[1] - 1.0).abs() < 1e-15);
        let full = softmax_lse(&[5.0f64, 1.0]).unwrap();
        assert_eq!(r.lse, full.lse);
    }

    #[test]
    fn rmsnorm_examples() {
        let c = 2.5f64;
        let y = rmsnorm(&[c, c, c], &[1.0; 3], 1e-300).unwrap();
        for v in y {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!(rmsnorm(&[0.0f64; 4], &[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);

        // rms = sqrt((9 + 16) / 2) = sqrt(12.5)
        let y = rmsnorm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.848528).abs() < 1e-6);
        assert!((y[1] - 1.131371).abs() < 1e-6);
        assert!((y[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-15);

        assert!(rmsnorm(&[1.0f64, 2.0], &[1.0], 1e-6).is_err());
    }

    #[test]
    fn rope_examples() {
        let x = [0.3f64, -1.2, 4.0, 0.5];
        assert_eq!(rope(&x, 0, 10000.0).unwrap(), x.to_vec());

        // first pair always has theta = position
        let y = rope(&[1.0f64, 0.0], 1, 10000.0).unwrap();
        assert!((y[0] - 0.540302).abs() < 1e-6);
        assert!((y[1] - 0.841471).abs() < 1e-6);

        assert!(matches!(
            rope(&[1.0f64, 2.0, 3.0], 1, 10000.0),
            Err(crate::Error::Shape(_))
        ));
    }

    fn norm(x: &[f64]) -> f64 {
        dot(x, x).sqrt()
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            scores in prop::collection::vec(-50.0f64..50.0, 1..16),
            c in -100.0f64..100.0,
        ) {
            let a = softmax_lse(&scores).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let b = softmax_lse(&shifted).unwrap();
            for (p, q) in a.probs.iter().zip(&b.probs) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
            prop_assert!((b.lse - a.lse - c).abs() <= 1e-12 * (1.0 + b.lse.abs()));
            let sum: f64 = a.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for (p, s) in a.probs.iter().zip(&scores) {
                prop_assert!((p - (s - a.lse).exp()).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_argmax_invariant_to_positive_scale(
            scores in prop::collection::vec(-10.0f64..10.0, 2..16),
            scale in 0.01f64..20.0,
        ) {
            let argmax = |p: &[f64]| {
                p.iter().enumerate().fold(0, |best, (i, v)| if *v > p[best] { i } else { best })
            };
            let a = softmax_lse(&scores).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            let b = softmax_lse(&scaled).unwrap();
            prop_assert_eq!(argmax(&a.probs), argmax(&b.probs));
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n, k, l) = (
                rng.random_range(1..6),
                rng.random_range(1..6),
                rng.random_range(1..6),
                rng.random_range(1..6),
            );
            let a = random_matrix(&mut rng, m, n);
            let b = random_matrix(&mut rng, n, k);
            let c = random_matrix(&mut rng, k, l);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn rope_is_an_isometry(
            half in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
            pos in 0usize..100_000,
        ) {
            let x: Vec<f64> = half.iter().flat_map(|&(a, b)| [a, b]).collect();
            let y = rope(&x, pos, 10000.0).unwrap();
            let nx = norm(&x);
            prop_assert!((norm(&y) - nx).abs() <= 1e-6 * nx.max(1e-12));
        }

        #[test]
        fn rope_dot_depends_on_relative_position(
            half in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..8),
            p in 0usize..500,
            q in 0usize..500,
            shift in 0usize..500,
        ) {
            let a: Vec<f64> = half.iter().flat_map(|&(x, y, _, _)| [x, y]).collect();
            let b: Vec<f64> = half.iter().flat_map(|&(_, _, x, y)| [x, y]).collect();
            let d1 = dot(&rope(&a, p, 10000.0).unwrap(), &rope(&b, q, 10000.0).unwrap());
            let d2 = dot(
                &rope(&a, p + shift, 10000.0).unwrap(),
                &rope(&b, q + shift, 10000.0).unwrap(),
            );
            let scale = norm(&a) * norm(&b);
            prop_assert!((d1 - d2).abs() <= 1e-6 * scale.max(1e-12));
        }

        #[test]
        fn rmsnorm_output_has_unit_rms(x in prop::collection::vec(0.1f64..10.0, 1..32)) {
            let gain = vec![1.0; x.len()];
            let y = rmsnorm(&x, &gain, 1e-300).unwrap();
            let rms = (dot(&y, &y) / y.len() as f64).sqrt();
            prop_assert!((rms - 1.0).abs() <= 1e-6);
        }
    }
}
