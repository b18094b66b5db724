//! Residual encoding layer with a learnable codebook and per-codeword
//! smoothing factors.
//!
//! Forward, for descriptors `x_i` and codewords `c_k`:
//!
//! ```text
//! r_ik  = x_i - c_k
//! a_ik  = exp(-s_k |r_ik|^2 + phi_i) / sum_j exp(-s_j |r_ij|^2 + phi_i)
//! phi_i = min_k s_k |r_ik|^2
//! e_k   = sum_i a_ik r_ik
//! E     = [e_1 / |e_1|, ..., e_K / |e_K|]
//! ```
//!
//! The shift `phi_i` cancels in the ratio, so it changes nothing except that
//! the largest exponent in every row is exactly zero.
//!
//! Backward treats each row of assignments as a softmax over the scores
//! `z_ik = -s_k |r_ik|^2`. With `G_k = dL/de_k` and `q_ik = G_k . r_ik`:
//!
//! ```text
//! dL/dz_ik  = a_ik (q_ik - sum_j a_ij q_ij)
//! dL/dr_ik  = a_ik G_k - 2 s_k (dL/dz_ik) r_ik
//! dL/dx_i   = sum_k dL/dr_ik
//! dL/dc_k   = -sum_i dL/dr_ik
//! dL/ds_k   = -sum_i (dL/dz_ik) |r_ik|^2
//! ```
//!
//! Note that `s_k` enters the denominator of every assignment in row `i`, so
//! `dL/ds_k` collects contributions from all codeword blocks, not only `e_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Blocks whose pre-normalization L2 norm falls below this are emitted as zeros.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// `K` codewords of dimension `D` plus one smoothing factor per codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codewords: Matrix,
    smoothing: Vec<f64>,
}

impl Codebook {
    pub fn new(codewords: Matrix, smoothing: Vec<f64>) -> Result<Self> {
        if codewords.rows() == 0 || codewords.cols() == 0 {
            return Err(Error::shape("codebook needs K >= 1 and D >= 1"));
        }
        if smoothing.len() != codewords.rows() {
            return Err(Error::shape(format!(
                "codebook has {} codewords but {} smoothing factors",
                codewords.rows(),
                smoothing.len()
            )));
        }
        if !codewords.is_finite() || smoothing.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Codebook {
            codewords,
            smoothing,
        })
    }

    /// Uniform smoothing `beta` for every codeword, i.e. plain soft assignment.
    pub fn with_uniform_smoothing(codewords: Matrix, beta: f64) -> Result<Self> {
        let k = codewords.rows();
        Self::new(codewords, vec![beta; k])
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.codewords.rows()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codewords(&self) -> &Matrix {
        &self.codewords
    }

    pub fn smoothing(&self) -> &[f64] {
        &self.smoothing
    }

    pub fn codewords_mut(&mut self) -> &mut Matrix {
        &mut self.codewords
    }

    pub fn smoothing_mut(&mut self) -> &mut [f64] {
        &mut self.smoothing
    }

    pub fn parts_mut(&mut self) -> (&mut Matrix, &mut [f64]) {
        (&mut self.codewords, &mut self.smoothing)
    }

    /// Smoothing factors are unconstrained; training may push some below
    /// zero. Assignments stay well defined, this just reports how many.
    pub fn negative_smoothing_count(&self) -> usize {
        self.smoothing.iter().filter(|&&s| s < 0.0).count()
    }
}

/// `N` descriptors of dimension `D`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch {
    descriptors: Matrix,
}

impl DescriptorBatch {
    pub fn new(descriptors: Matrix) -> Result<Self> {
        if descriptors.rows() == 0 || descriptors.cols() == 0 {
            return Err(Error::shape(format!(
                "descriptor batch needs N >= 1 and D >= 1, got {}x{}",
                descriptors.rows(),
                descriptors.cols()
            )));
        }
        Ok(DescriptorBatch { descriptors })
    }

    pub fn from_rows(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Matrix::from_vec(n, d, data)?)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.descriptors.rows()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn descriptors(&self) -> &Matrix {
        &self.descriptors
    }

    pub fn descriptors_mut(&mut self) -> &mut Matrix {
        &mut self.descriptors
    }

    pub fn into_matrix(self) -> Matrix {
        self.descriptors
    }

    /// Same descriptors in a different order: row `i` of the result is row
    /// `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n() {
            return Err(Error::shape("permutation length differs from N"));
        }
        let mut data = Vec::with_capacity(self.n() * self.d());
        for &i in order {
            if i >= self.n() {
                return Err(Error::invalid(format!("permutation index {i} out of range")));
            }
            data.extend_from_slice(self.descriptors.row(i));
        }
        Self::from_rows(self.n(), self.d(), data)
    }
}

/// Output of [`soft_assign`]: residuals, scores and the assignment matrix.
#[derive(Debug, Clone)]
pub struct SoftAssignment {
    n: usize,
    k: usize,
    d: usize,
    /// `r_ik` laid out as `[i][k][d]`.
    residuals: Vec<f64>,
    /// `|r_ik|^2`, N×K.
    sq_norms: Matrix,
    /// `phi_i`.
    shifts: Vec<f64>,
    /// `a_ik`, N×K.
    assignments: Matrix,
}

impl SoftAssignment {
    pub fn assignments(&self) -> &Matrix {
        &self.assignments
    }

    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    pub fn sq_norms(&self) -> &Matrix {
        &self.sq_norms
    }

    #[inline]
    pub fn residual(&self, i: usize, k: usize) -> &[f64] {
        &self.residuals[(i * self.k + k) * self.d..][..self.d]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.k, self.d)
    }
}

/// Everything [`encode_backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub assign: SoftAssignment,
    /// Aggregated residuals before normalization, K×D.
    pub raw: Matrix,
    /// L2 norm of each raw block.
    pub norms: Vec<f64>,
}

/// Concatenated, per-block normalized aggregate of length `K·D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingVector {
    k: usize,
    d: usize,
    values: Vec<f64>,
}

impl EncodingVector {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..][..self.d]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone)]
pub struct EncodeGrads {
    /// N×D
    pub x: Matrix,
    /// K×D
    pub codewords: Matrix,
    pub smoothing: Vec<f64>,
}

fn check_inputs(batch: &DescriptorBatch, book: &Codebook) -> Result<()> {
    if batch.d() != book.d() {
        return Err(Error::shape(format!(
            "descriptors have D={} but codebook has D={}",
            batch.d(),
            book.d()
        )));
    }
    if let Some(pos) = batch.descriptors().data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "descriptor {} (component {})",
            pos / batch.d(),
            pos % batch.d()
        )));
    }
    Ok(())
}

pub fn soft_assign(batch: &DescriptorBatch, book: &Codebook) -> Result<SoftAssignment> {
    check_inputs(batch, book)?;
    let (n, k, d) = (batch.n(), book.k(), book.d());
    let x = batch.descriptors();
    let c = book.codewords();
    let s = book.smoothing();

    let mut residuals = vec![0.0; n * k * d];
    let mut sq_norms = Matrix::zeros(n, k);
    let mut shifts = vec![0.0; n];
    let mut assignments = Matrix::zeros(n, k);

    for i in 0..n {
        let xi = x.row(i);
        for kk in 0..k {
            let r = &mut residuals[(i * k + kk) * d..][..d];
            let mut sq = 0.0;
            for ((rv, &xv), &cv) in r.iter_mut().zip(xi).zip(c.row(kk)) {
                *rv = xv - cv;
                sq += *rv * *rv;
            }
            sq_norms.set(i, kk, sq);
        }

        // lowest k wins ties
        let mut phi = f64::INFINITY;
        for kk in 0..k {
            let score = s[kk] * sq_norms.get(i, kk);
            if score < phi {
                phi = score;
            }
        }
        shifts[i] = phi;

        let row = assignments.row_mut(i);
        let mut total = 0.0;
        for kk in 0..k {
            let f = (-s[kk] * sq_norms.get(i, kk) + phi).exp();
            row[kk] = f;
            total += f;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    Ok(SoftAssignment {
        n,
        k,
        d,
        residuals,
        sq_norms,
        shifts,
        assignments,
    })
}

/// `e_k = sum_i a_ik r_ik`, summed in ascending `i`.
pub fn aggregate(assign: &SoftAssignment) -> Matrix {
    let (n, k, d) = assign.dims();
    let mut raw = Matrix::zeros(k, d);
    for i in 0..n {
        for kk in 0..k {
            let a = assign.assignments.get(i, kk);
            let r = assign.residual(i, kk);
            for (e, &rv) in raw.row_mut(kk).iter_mut().zip(r) {
                *e += a * rv;
            }
        }
    }
    raw
}

pub fn block_norms(raw: &Matrix) -> Vec<f64> {
    (0..raw.rows())
        .map(|k| raw.row(k).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Scales each codeword block to unit L2 norm.
pub fn normalize(raw: &Matrix) -> EncodingVector {
    let norms = block_norms(raw);
    let mut values = Vec::with_capacity(raw.rows() * raw.cols());
    for (k, &norm) in norms.iter().enumerate() {
        if norm < ZERO_NORM_EPS {
            values.extend(std::iter::repeat_n(0.0, raw.cols()));
        } else {
            values.extend(raw.row(k).iter().map(|v| v / norm));
        }
    }
    EncodingVector {
        k: raw.rows(),
        d: raw.cols(),
        values,
    }
}

pub fn encode_forward(
    batch: &DescriptorBatch,
    book: &Codebook,
) -> Result<(EncodingVector, EncodeCache)> {
    let assign = soft_assign(batch, book)?;
    let raw = aggregate(&assign);
    let norms = block_norms(&raw);
    let enc = normalize(&raw);
    Ok((enc, EncodeCache { assign, raw, norms }))
}

pub fn encode_backward(
    grad_encoding: &[f64],
    batch: &DescriptorBatch,
    book: &Codebook,
    cache: &EncodeCache,
) -> Result<EncodeGrads> {
    let (n, k, d) = cache.assign.dims();
    if batch.n() != n || batch.d() != d || book.k() != k || book.d() != d {
        return Err(Error::shape(format!(
            "encode cache is for N={n}, K={k}, D={d}; got batch {}x{} and codebook {}x{}",
            batch.n(),
            batch.d(),
            book.k(),
            book.d()
        )));
    }
    if grad_encoding.len() != k * d {
        return Err(Error::shape(format!(
            "encoding gradient has {} entries, expected K·D = {}",
            grad_encoding.len(),
            k * d
        )));
    }

    // Through the per-block normalization: dL/de = (g - y (y.g)) / |e|.
    let mut grad_raw = Matrix::zeros(k, d);
    for kk in 0..k {
        let norm = cache.norms[kk];
        if norm < ZERO_NORM_EPS {
            continue;
        }
        let e = cache.raw.row(kk);
        let g = &grad_encoding[kk * d..][..d];
        let y_dot_g: f64 = e.iter().zip(g).map(|(ev, gv)| ev * gv).sum::<f64>() / norm;
        for ((out, &ev), &gv) in grad_raw.row_mut(kk).iter_mut().zip(e).zip(g) {
            *out = (gv - ev / norm * y_dot_g) / norm;
        }
    }

    let s = book.smoothing();
    let a = cache.assign.assignments();
    let mut grad_x = Matrix::zeros(n, d);
    let mut grad_c = Matrix::zeros(k, d);
    let mut grad_s = vec![0.0; k];
    let mut q = vec![0.0; k];
    let mut dr = vec![0.0; d];

    for i in 0..n {
        let mut q_bar = 0.0;
        for kk in 0..k {
            let r = cache.assign.residual(i, kk);
            q[kk] = grad_raw.row(kk).iter().zip(r).map(|(g, rv)| g * rv).sum();
            q_bar += a.get(i, kk) * q[kk];
        }
        for kk in 0..k {
            let a_ik = a.get(i, kk);
            let dz = a_ik * (q[kk] - q_bar);
            let r = cache.assign.residual(i, kk);
            let two_s_dz = 2.0 * s[kk] * dz;
            for ((out, &g), &rv) in dr.iter_mut().zip(grad_raw.row(kk)).zip(r) {
                *out = a_ik * g - two_s_dz * rv;
            }
            for (gx, &v) in grad_x.row_mut(i).iter_mut().zip(&dr) {
                *gx += v;
            }
            for (gc, &v) in grad_c.row_mut(kk).iter_mut().zip(&dr) {
                *gc -= v;
            }
            grad_s[kk] -= dz * cache.assign.sq_norms().get(i, kk);
        }
    }

    Ok(EncodeGrads {
        x: grad_x,
        codewords: grad_c,
        smoothing: grad_s,
    })
}

/// Codewords uniform in `[-1/sqrt(K), 1/sqrt(K)]`, smoothing uniform in `(0, 1]`.
pub fn init_codebook(k: usize, d: usize, seed: u64) -> Result<Codebook> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_codebook_with(k, d, &mut rng)
}

pub fn init_codebook_with<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Codebook> {
    if k == 0 || d == 0 {
        return Err(Error::invalid(format!("codebook needs K >= 1 and D >= 1, got {k}x{d}")));
    }
    let bound = 1.0 / (k as f64).sqrt();
    let codewords: Vec<f64> = (0..k * d)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    // 1 - U[0,1) lies in (0, 1]
    let smoothing: Vec<f64> = (0..k).map(|_| 1.0 - rng.random::<f64>()).collect();
    Codebook::new(Matrix::from_vec(k, d, codewords)?, smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, d: usize, data: &[f64]) -> DescriptorBatch {
        DescriptorBatch::from_rows(n, d, data.to_vec()).unwrap()
    }

    fn book(k: usize, d: usize, c: &[f64], s: &[f64]) -> Codebook {
        Codebook::new(Matrix::from_vec(k, d, c.to_vec()).unwrap(), s.to_vec()).unwrap()
    }

    #[test]
    fn single_codeword_assigns_everything() {
        let b = batch(3, 2, &[1.0, 2.0, -3.0, 0.5, 9.0, 9.0]);
        let cb = book(1, 2, &[0.1, 0.2], &[0.7]);
        let sa = soft_assign(&b, &cb).unwrap();
        assert!(sa.assignments().data().iter().all(|&a| a == 1.0));

        let raw = aggregate(&sa);
        let expected = [1.0 - 3.0 + 9.0 - 3.0 * 0.1, 2.0 + 0.5 + 9.0 - 3.0 * 0.2];
        for (r, e) in raw.data().iter().zip(expected) {
            assert!((r - e).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_descriptor_splits_evenly() {
        let b = batch(1, 2, &[0.0, 0.0]);
        let cb = book(2, 2, &[1.0, 0.0, 0.0, -1.0], &[0.4, 0.4]);
        let a = soft_assign(&b, &cb).unwrap();
        assert!((a.assignments().get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.assignments().get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shift_is_min_score_lowest_k_on_ties() {
        let b = batch(1, 1, &[1.0]);
        let cb = book(3, 1, &[0.0, 2.0, 5.0], &[1.0, 1.0, 0.1]);
        let a = soft_assign(&b, &cb).unwrap();
        assert_eq!(a.shifts()[0], 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let b = batch(2, 3, &[0.0; 6]);
        let cb = book(2, 2, &[0.0; 4], &[1.0, 1.0]);
        assert!(matches!(soft_assign(&b, &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_descriptor_rejected() {
        let b = batch(2, 1, &[0.0, f64::NAN]);
        let cb = book(1, 1, &[0.0], &[1.0]);
        assert!(matches!(soft_assign(&b, &cb), Err(Error::NonFinite(_))));
    }

    #[test]
    fn huge_scores_stay_finite() {
        let b = batch(2, 1, &[100.0, -100.0]);
        let cb = book(2, 1, &[0.0, 1.0], &[1.0, 1.0]);
        let a = soft_assign(&b, &cb).unwrap();
        assert!(a.assignments().is_finite());
        for i in 0..2 {
            let sum: f64 = a.assignments().row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_blocks() {
        let raw = Matrix::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let e = normalize(&raw);
        assert_eq!(e.values(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn tiny_block_is_zeroed() {
        let raw = Matrix::from_vec(1, 2, vec![1e-13, 0.0]).unwrap();
        assert_eq!(normalize(&raw).values(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_zero_grad_is_zero() {
        let b = batch(3, 2, &[0.3, -0.1, 1.2, 0.4, -0.8, 0.9]);
        let cb = book(2, 2, &[0.1, 0.0, -0.2, 0.3], &[0.5, 0.9]);
        let (_, cache) = encode_forward(&b, &cb).unwrap();
        let g = encode_backward(&[0.0; 4], &b, &cb, &cache).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.codewords.data().iter().all(|&v| v == 0.0));
        assert!(g.smoothing.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_cache() {
        let b = batch(3, 2, &[0.3, -0.1, 1.2, 0.4, -0.8, 0.9]);
        let cb = book(2, 2, &[0.1, 0.0, -0.2, 0.3], &[0.5, 0.9]);
        let (_, cache) = encode_forward(&b, &cb).unwrap();
        let other = batch(2, 2, &[0.0; 4]);
        assert!(encode_backward(&[0.0; 4], &other, &cb, &cache).is_err());
        assert!(encode_backward(&[0.0; 3], &b, &cb, &cache).is_err());
    }

    #[test]
    fn negative_smoothing_is_counted_and_tolerated() {
        let b = batch(2, 1, &[0.5, -1.5]);
        let cb = book(2, 1, &[0.0, 1.0], &[-0.3, 0.8]);
        assert_eq!(cb.negative_smoothing_count(), 1);
        let (e, _) = encode_forward(&b, &cb).unwrap();
        assert!(e.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a = init_codebook(4, 3, 11).unwrap();
        let b = init_codebook(4, 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.codewords().data().iter().all(|v| v.abs() <= 0.5));
        assert!(a.smoothing().iter().all(|&s| s > 0.0 && s <= 1.0));

        let one = init_codebook(1, 1, 0).unwrap();
        assert!(one.codewords().get(0, 0).abs() <= 1.0);
        assert!(init_codebook(0, 3, 0).is_err());
    }
}
