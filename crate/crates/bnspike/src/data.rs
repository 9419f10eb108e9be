//! Datasets, the Sigma-geometry they induce, whitening and the synthetic
//! generators.
//!
//! Features are stored as columns (`x` is d x n). The signed feature matrix
//! `xtilde = x * diag(y)` is what every loss evaluation sees, and
//! `sigma = xtilde xtilde^T / n`, `mu = xtilde 1 / n`.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BnError, Result};

/// Eigenvalues of Sigma on span(X) below this are treated as singular.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// Version tag written into dataset JSON files.
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    xtilde: DMatrix<f64>,
    sigma: DMatrix<f64>,
    mu: DVector<f64>,
}

impl Dataset {
    /// Builds a dataset from a d x n feature matrix (samples as columns) and
    /// n labels in {+1, -1}.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (d, n) = x.shape();
        if n == 0 || d == 0 {
            return Err(BnError::Precondition("dataset must be nonempty".into()));
        }
        if y.len() != n {
            return Err(BnError::DimensionMismatch {
                what: "labels",
                expected: n,
                got: y.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BnError::NonFinite("features"));
        }
        for (i, &v) in y.iter().enumerate() {
            if v != 1.0 && v != -1.0 {
                return Err(BnError::InvalidLabel { index: i, value: v });
            }
        }
        let mut xtilde = x.clone();
        for (j, mut col) in xtilde.column_iter_mut().enumerate() {
            col *= y[j];
        }
        let nf = n as f64;
        let sigma = (&xtilde * xtilde.transpose()) / nf;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let mu = xtilde.column_sum() / nf;
        Ok(Dataset {
            x,
            y,
            xtilde,
            sigma,
            mu,
        })
    }

    /// Builds a dataset from samples given as rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: &[f64]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(BnError::Precondition("dataset must be nonempty".into()));
        }
        let d = rows[0].len();
        for r in rows {
            if r.len() != d {
                return Err(BnError::DimensionMismatch {
                    what: "feature row",
                    expected: d,
                    got: r.len(),
                });
            }
        }
        let x = DMatrix::from_fn(d, n, |i, j| rows[j][i]);
        Dataset::new(x, DVector::from_column_slice(labels))
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn xtilde(&self) -> &DMatrix<f64> {
        &self.xtilde
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn n(&self) -> usize {
        self.x.ncols()
    }
    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    /// Signed feature vector y_i x_i.
    pub fn signed_sample(&self, i: usize) -> DVector<f64> {
        self.xtilde.column(i).into_owned()
    }

    fn check_dim(&self, v: &DVector<f64>, what: &'static str) -> Result<()> {
        if v.len() != self.d() {
            return Err(BnError::DimensionMismatch {
                what,
                expected: self.d(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Same samples with every feature multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Dataset> {
        Dataset::new(&self.x * k, self.y.clone())
    }

    /// SHA-256 over the little-endian bytes of (d, n, features, labels).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d() as u64).to_le_bytes());
        h.update((self.n() as u64).to_le_bytes());
        for v in self.x.iter() {
            h.update(v.to_le_bytes());
        }
        for v in self.y.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Sigma inner product a^T Sigma b, evaluated as (X~^T a)^T (X~^T b) / n so
/// that the induced norm is nonnegative by construction.
pub fn sigma_inner(a: &DVector<f64>, b: &DVector<f64>, ds: &Dataset) -> Result<f64> {
    ds.check_dim(a, "sigma_inner lhs")?;
    ds.check_dim(b, "sigma_inner rhs")?;
    let pa = ds.xtilde.tr_mul(a);
    let pb = ds.xtilde.tr_mul(b);
    Ok(pa.dot(&pb) / ds.n() as f64)
}

pub fn sigma_norm(a: &DVector<f64>, ds: &Dataset) -> Result<f64> {
    ds.check_dim(a, "sigma_norm")?;
    Ok(ds.xtilde.tr_mul(a).norm() / (ds.n() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// d x r orthonormal basis of span(X).
    pub span_basis: DMatrix<f64>,
    /// Eigenvalues of Sigma restricted to span(X), ascending.
    pub eigenvalues: DVector<f64>,
    /// d x r eigenvectors matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectrumBounds {
    pub fn rank(&self) -> usize {
        self.span_basis.ncols()
    }

    pub fn condition_number(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }

    /// Orthogonal projector onto span(X).
    pub fn projector(&self) -> DMatrix<f64> {
        &self.span_basis * self.span_basis.transpose()
    }
}

/// Orthonormal basis of the column span of `m`, from a thin SVD with the
/// usual max(rows, cols) * eps relative rank cut.
pub(crate) fn column_span(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    let svd = m.clone().svd(true, false);
    let u = svd.u.ok_or(BnError::Convergence {
        what: "svd",
        residual: f64::NAN,
    })?;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(BnError::Precondition("feature matrix is zero".into()));
    }
    let cut = smax * rows.max(cols) as f64 * f64::EPSILON;
    let mut idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cut)
        .collect();
    idx.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    Ok(DMatrix::from_fn(rows, idx.len(), |i, k| u[(i, idx[k])]))
}

pub fn spectrum_bounds(ds: &Dataset) -> Result<SpectrumBounds> {
    let basis = column_span(&ds.xtilde)?;
    let restricted = basis.tr_mul(&(&ds.sigma * &basis));
    let restricted = (&restricted + restricted.transpose()) * 0.5;
    let eig = restricted.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let r = order.len();
    let eigenvalues = DVector::from_fn(r, |k, _| eig.eigenvalues[order[k]]);
    let q = DMatrix::from_fn(r, r, |i, k| eig.eigenvectors[(i, order[k])]);
    let eigenvectors = &basis * q;
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(BnError::NonFinite("spectrum"));
    }
    Ok(SpectrumBounds {
        lambda_min: eigenvalues[0],
        lambda_max: eigenvalues[r - 1],
        span_basis: basis,
        eigenvalues,
        eigenvectors,
    })
}

fn whiten_once(ds: &Dataset) -> Result<(Dataset, f64)> {
    let sb = spectrum_bounds(ds)?;
    if sb.lambda_min <= EIGEN_CLAMP {
        return Err(BnError::Singular {
            eigenvalue: sb.lambda_min,
            clamp: EIGEN_CLAMP,
        });
    }
    let b = &sb.eigenvectors;
    let scale = DMatrix::from_diagonal(&sb.eigenvalues.map(|l| l.sqrt().recip()));
    let d = ds.d();
    let t = b * scale * b.transpose() + (DMatrix::identity(d, d) - b * b.transpose());
    let dev = sb
        .eigenvalues
        .iter()
        .map(|l| (l - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((Dataset::new(t * &ds.x, ds.y.clone())?, dev))
}

/// Applies Sigma^{-1/2} on span(X) and the identity on its complement.
///
/// A single eigen-decomposition of an ill-conditioned Sigma leaves the result
/// whitened only to about eps * kappa, so the transform is re-applied (now to
/// a well-conditioned matrix) until the restricted spectrum sits at 1.
pub fn whiten(ds: &Dataset) -> Result<Dataset> {
    let (mut cur, _) = whiten_once(ds)?;
    for _ in 0..4 {
        let sb = spectrum_bounds(&cur)?;
        let dev = sb
            .eigenvalues
            .iter()
            .map(|l| (l - 1.0).abs())
            .fold(0.0, f64::max);
        if dev < 1e-13 {
            break;
        }
        cur = whiten_once(&cur)?.0;
    }
    Ok(cur)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Column-major fill order is part of the determinism contract.
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of R's diagonal folded into Q.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, m, m);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col *= -1.0;
        }
    }
    q
}

fn sign_label(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Parameters of the Hilbert-slice generator. The slice offsets, rotation
/// switch and noise scale are free choices and are recorded with each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HilbertParams {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub noise_std: f64,
    #[serde(default = "default_true")]
    pub rotate: bool,
    #[serde(default)]
    pub row_offset: usize,
    #[serde(default)]
    pub col_offset: usize,
}

fn default_true() -> bool {
    true
}

impl HilbertParams {
    pub fn new(n: usize, d: usize, seed: u64, noise_std: f64) -> Self {
        HilbertParams {
            n,
            d,
            seed,
            noise_std,
            rotate: true,
            row_offset: 0,
            col_offset: 0,
        }
    }
}

/// Slice of the Hilbert matrix H_ij = 1/(i+j-1), optionally rotated on both
/// sides, plus Gaussian noise; labels are set to sign<x_i, v> for a seeded
/// random v, so the result is linearly separable.
pub fn gen_hilbert_dataset(p: &HilbertParams) -> Result<Dataset> {
    if p.n == 0 || p.d == 0 {
        return Err(BnError::Precondition("n and d must be positive".into()));
    }
    if p.n > p.d {
        return Err(BnError::Precondition(format!(
            "Hilbert generator needs n <= d, got n = {}, d = {}",
            p.n, p.d
        )));
    }
    if !(p.noise_std >= 0.0) {
        return Err(BnError::Precondition(
            "noise_std must be nonnegative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let h = DMatrix::from_fn(p.n, p.d, |i, j| {
        1.0 / ((p.row_offset + i + 1) + (p.col_offset + j + 1) - 1) as f64
    });
    let a = if p.rotate {
        let ql = random_orthogonal(&mut rng, p.n);
        let qr = random_orthogonal(&mut rng, p.d);
        ql * h * qr
    } else {
        h
    };
    let mut x = a.transpose();
    if p.noise_std > 0.0 {
        x += gaussian_matrix(&mut rng, p.d, p.n) * p.noise_std;
    }
    let v = gaussian_vector(&mut rng, p.d);
    let y = DVector::from_fn(p.n, |i, _| sign_label(x.column(i).dot(&v)));
    Dataset::new(x, y)
}

/// Standard Gaussian features with labels sign<x_i, v>.
pub fn gen_gaussian_dataset(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(BnError::Precondition("n and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_matrix(&mut rng, d, n);
    let v = gaussian_vector(&mut rng, d);
    let y = DVector::from_fn(n, |i, _| sign_label(x.column(i).dot(&v)));
    Dataset::new(x, y)
}

/// Minimum-norm solution of X~^T w = 1 (least squares through the Gram
/// matrix; X~ must have full column rank).
pub fn min_norm_interpolant(ds: &Dataset) -> Result<DVector<f64>> {
    let xt = ds.xtilde();
    let gram = xt.tr_mul(xt);
    let ones = DVector::from_element(ds.n(), 1.0);
    let chol = gram
        .cholesky()
        .ok_or_else(|| BnError::Precondition("signed samples are linearly dependent".into()))?;
    Ok(xt * chol.solve(&ones))
}

/// Every sample on the max-margin boundary: x~_i = gamma u + z_i with z_i
/// orthogonal to a unit u and sum_i c_i z_i = 0 for positive c_i. Then the
/// SVM solution is u / gamma with strictly positive dual coefficients
/// proportional to c.
pub fn gen_active_margin_dataset(n: usize, d: usize, gamma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n >= d {
        return Err(BnError::Precondition(format!(
            "active-margin generator needs 0 < n < d, got n = {n}, d = {d}"
        )));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(BnError::Precondition("gamma must be positive".into()));
    }
    const RETRIES: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Uniform::new(0.5, 1.5);
    let mut last = String::new();
    for _ in 0..RETRIES {
        let mut u = gaussian_vector(&mut rng, d);
        u /= u.norm();
        let c: Vec<f64> = (0..n).map(|_| weights.sample(&mut rng)).collect();
        let mut z = gaussian_matrix(&mut rng, d, n) / (d as f64).sqrt();
        for mut col in z.column_iter_mut() {
            let p = col.dot(&u);
            col.axpy(-p, &u, 1.0);
        }
        let csum: f64 = c.iter().sum();
        let mut center = DVector::zeros(d);
        for j in 0..n {
            center.axpy(c[j] / csum, &z.column(j), 1.0);
        }
        for mut col in z.column_iter_mut() {
            col -= &center;
        }
        let mut x = z;
        for mut col in x.column_iter_mut() {
            col.axpy(gamma, &u, 1.0);
        }
        // Random labels; features are un-folded so that y_i x_i is the
        // constructed signed sample.
        let y = DVector::from_fn(n, |_, _| {
            if rand::Rng::gen_bool(&mut rng, 0.5) {
                1.0
            } else {
                -1.0
            }
        });
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col *= y[j];
        }
        let ds = Dataset::new(x, y)?;
        match check_active_margin(&ds, gamma) {
            Ok(()) => return Ok(ds),
            Err(reason) => last = reason,
        }
    }
    Err(BnError::GenerationFailed {
        retries: RETRIES,
        reason: last,
    })
}

fn check_active_margin(ds: &Dataset, gamma: f64) -> std::result::Result<(), String> {
    let sb = spectrum_bounds(ds).map_err(|e| e.to_string())?;
    if sb.rank() != ds.n() || sb.lambda_min <= EIGEN_CLAMP {
        return Err(format!(
            "rank {} / lambda_min {:e}",
            sb.rank(),
            sb.lambda_min
        ));
    }
    let w = min_norm_interpolant(ds).map_err(|e| e.to_string())?;
    let margins = ds.xtilde().tr_mul(&w);
    let worst = margins.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    if worst >= 1e-8 {
        return Err(format!("margin residual {worst:e}"));
    }
    if (w.norm() - 1.0 / gamma).abs() >= 1e-8 * (1.0 / gamma).max(1.0) {
        return Err(format!("norm {} vs {}", w.norm(), 1.0 / gamma));
    }
    let gram = ds.xtilde().tr_mul(ds.xtilde());
    let beta = gram
        .cholesky()
        .ok_or("gram not positive definite")?
        .solve(&DVector::from_element(ds.n(), 1.0));
    if beta.iter().any(|b| *b <= 0.0) {
        return Err("nonpositive dual coefficient".into());
    }
    Ok(())
}

/// Deterministic, well-conditioned active-margin instance: the signed samples
/// are gamma u plus the vertices of a regular simplex of radius `spread` in
/// the orthogonal complement of u.
pub fn gen_simplex_margin_dataset(n: usize, d: usize, gamma: f64, spread: f64) -> Result<Dataset> {
    if n < 2 || n >= d {
        return Err(BnError::Precondition(format!(
            "simplex generator needs 2 <= n < d, got n = {n}, d = {d}"
        )));
    }
    // Centred standard basis e_1..e_n (coordinates 1..=n) has zero sum and
    // spans an (n-1)-dim subspace orthogonal to u = e_0.
    let nf = n as f64;
    let radius = ((nf - 1.0) / nf).sqrt();
    let x = DMatrix::from_fn(d, n, |i, j| {
        if i == 0 {
            gamma
        } else if i <= n {
            let v = if i - 1 == j {
                1.0 - 1.0 / nf
            } else {
                -1.0 / nf
            };
            v * spread / radius
        } else {
            0.0
        }
    });
    Dataset::new(x, DVector::from_element(n, 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    schema_version: u32,
    n: usize,
    d: usize,
    /// n rows of d features, one sample per row.
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

pub fn dataset_to_json(ds: &Dataset, metadata: Option<serde_json::Value>) -> String {
    let file = DatasetFile {
        schema_version: DATASET_SCHEMA_VERSION,
        n: ds.n(),
        d: ds.d(),
        features: (0..ds.n())
            .map(|j| ds.x().column(j).iter().cloned().collect())
            .collect(),
        labels: ds.y().iter().cloned().collect(),
        metadata,
    };
    serde_json::to_string_pretty(&file).expect("dataset serializes")
}

pub fn dataset_from_json(text: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| BnError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.schema_version != DATASET_SCHEMA_VERSION {
        return Err(BnError::Parse {
            line: 1,
            message: format!("unsupported schema_version {}", file.schema_version),
        });
    }
    if file.features.len() != file.n {
        return Err(BnError::DimensionMismatch {
            what: "feature rows",
            expected: file.n,
            got: file.features.len(),
        });
    }
    let ds = Dataset::from_rows(&file.features, &file.labels)?;
    if ds.d() != file.d {
        return Err(BnError::DimensionMismatch {
            what: "feature dimension",
            expected: file.d,
            got: ds.d(),
        });
    }
    Ok(ds)
}

/// One sample per row, label in the last column. A non-numeric first row is
/// taken as a header.
pub fn dataset_from_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 1;
        let rec = rec.map_err(|e| BnError::Parse {
            line,
            message: e.to_string(),
        })?;
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|s| s.parse::<f64>()).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if k == 0 => continue,
            Err(e) => {
                return Err(BnError::Parse {
                    line,
                    message: e.to_string(),
                })
            }
        };
        if vals.len() < 2 {
            return Err(BnError::Parse {
                line,
                message: "need at least one feature and a label".into(),
            });
        }
        let (feat, lab) = vals.split_at(vals.len() - 1);
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != feat.len() {
                return Err(BnError::Parse {
                    line,
                    message: format!("expected {} features, got {}", first.len(), feat.len()),
                });
            }
        }
        rows.push(feat.to_vec());
        labels.push(lab[0]);
    }
    Dataset::from_rows(&rows, &labels)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => dataset_from_csv(text.as_bytes()),
        _ => dataset_from_json(&text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_ds(n: usize, d: usize, seed: u64) -> Dataset {
        gen_gaussian_dataset(n, d, seed).unwrap()
    }

    #[test]
    fn sigma_inner_zero_and_identity() {
        let ds = Dataset::from_rows(
            &[vec![2f64.sqrt(), 0.0], vec![0.0, 2f64.sqrt()]],
            &[1.0, 1.0],
        )
        .unwrap();
        let z = DVector::zeros(2);
        assert_eq!(sigma_inner(&z, &z, &ds).unwrap(), 0.0);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(sigma_inner(&e1, &e2, &ds).unwrap(), 0.0);
        assert_relative_eq!(sigma_norm(&e1, &ds).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sigma_inner_matches_triple_loop() {
        let ds = random_ds(7, 5, 3);
        let a = DVector::from_fn(5, |i, _| (i as f64 * 0.7).sin());
        let b = DVector::from_fn(5, |i, _| (i as f64 * 1.3).cos());
        let s = ds.sigma();
        let mut brute = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                brute += a[i] * s[(i, j)] * b[j];
            }
        }
        let got = sigma_inner(&a, &b, &ds).unwrap();
        assert_relative_eq!(got, brute, max_relative = 1e-12);
    }

    #[test]
    fn sigma_inner_dimension_error() {
        let ds = random_ds(3, 4, 1);
        let a = DVector::zeros(3);
        assert!(matches!(
            sigma_inner(&a, &a, &ds),
            Err(BnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dataset_invariants() {
        let ds = random_ds(6, 9, 11);
        let direct = ds.xtilde() * ds.xtilde().transpose() / 6.0;
        assert!((ds.sigma() - &direct).norm() <= 1e-12 * direct.norm());
        let mu = ds.xtilde() * DVector::from_element(6, 1.0) / 6.0;
        assert!((ds.mu() - mu).norm() <= 1e-12);
        assert!(Dataset::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![1.0, 0.5])).is_err());
    }

    #[test]
    fn whiten_diagonal_case() {
        // Sigma = diag(4, 1) with n = d = 2.
        let a = 8f64.sqrt();
        let b = 2f64.sqrt();
        let ds = Dataset::from_rows(&[vec![a, 0.0], vec![0.0, b]], &[1.0, 1.0]).unwrap();
        assert_relative_eq!(ds.sigma()[(0, 0)], 4.0, epsilon = 1e-12);
        let w = whiten(&ds).unwrap();
        assert_relative_eq!(w.x()[(0, 0)], a / 2.0, epsilon = 1e-12);
        assert_relative_eq!(w.x()[(1, 1)], b, epsilon = 1e-12);
        assert!(w.x()[(0, 1)].abs() < 1e-12 && w.x()[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn whiten_random_and_idempotent() {
        let ds = random_ds(10, 20, 5);
        let w = whiten(&ds).unwrap();
        let sb = spectrum_bounds(&w).unwrap();
        for l in sb.eigenvalues.iter() {
            assert!((l - 1.0).abs() < 1e-10, "eigenvalue {l}");
        }
        let ww = whiten(&w).unwrap();
        assert!((ww.sigma() - w.sigma()).amax() < 1e-12);
        // identity on span(X)^perp
        let p = sb.projector();
        let v = DVector::from_fn(20, |i, _| (i as f64).sin());
        let perp = &v - &p * &v;
        let ds_sb = spectrum_bounds(&ds).unwrap();
        let perp0 = &v - ds_sb.projector() * &v;
        assert!((perp - perp0).norm() < 1e-10);
    }

    #[test]
    fn whiten_rejects_singular() {
        let ds = Dataset::from_rows(&[vec![1.0, 0.0], vec![1e-9, 0.0]], &[1.0, 1.0]).unwrap();
        // rank-1 data whitened fine; a tiny direction trips the clamp.
        assert!(whiten(&ds).is_ok());
        let ds = Dataset::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-7]], &[1.0, 1.0]).unwrap();
        assert!(matches!(whiten(&ds), Err(BnError::Singular { .. })));
    }

    #[test]
    fn spectrum_identity_and_diag() {
        let a = 8f64.sqrt();
        let b = 2f64.sqrt();
        let ds = Dataset::from_rows(&[vec![a, 0.0], vec![0.0, b]], &[1.0, 1.0]).unwrap();
        let sb = spectrum_bounds(&ds).unwrap();
        assert_relative_eq!(sb.lambda_min, 1.0, epsilon = 1e-12);
        assert_relative_eq!(sb.lambda_max, 4.0, epsilon = 1e-12);
        let w = whiten(&random_ds(4, 9, 2)).unwrap();
        let sb = spectrum_bounds(&w).unwrap();
        assert_relative_eq!(sb.lambda_min, 1.0, epsilon = 1e-10);
        assert_relative_eq!(sb.lambda_max, 1.0, epsilon = 1e-10);
    }

    fn power_iteration(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
        let mut v = basis * DVector::from_fn(basis.ncols(), |i, _| 1.0 + i as f64);
        v /= v.norm();
        let mut lam = 0.0;
        for _ in 0..20000 {
            let mv = m * &v;
            lam = v.dot(&mv);
            let nrm = mv.norm();
            v = mv / nrm;
        }
        lam
    }

    #[test]
    fn spectrum_matches_iterative_oracle() {
        let ds = random_ds(5, 8, 21);
        let sb = spectrum_bounds(&ds).unwrap();
        let lmax = power_iteration(ds.sigma(), &sb.span_basis);
        // inverse iteration on the restricted matrix
        let r = sb.span_basis.tr_mul(&(ds.sigma() * &sb.span_basis));
        let inv = r.try_inverse().unwrap();
        let ident = DMatrix::identity(5, 5);
        let lmin = 1.0 / power_iteration(&inv, &ident);
        assert_relative_eq!(sb.lambda_max, lmax, max_relative = 1e-8);
        assert_relative_eq!(sb.lambda_min, lmin, max_relative = 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let c = gaussian_vector(&mut rng, sb.rank());
            let v = &sb.span_basis * c;
            let v = &v / v.norm();
            let q = sigma_inner(&v, &v, &ds).unwrap();
            assert!(q >= sb.lambda_min - 1e-10 && q <= sb.lambda_max + 1e-10);
        }
    }

    #[test]
    fn hilbert_raw_slice() {
        let mut p = HilbertParams::new(3, 4, 0, 0.0);
        p.rotate = false;
        let ds = gen_hilbert_dataset(&p).unwrap();
        assert_eq!(ds.x()[(0, 0)], 1.0);
        assert_eq!(ds.x()[(1, 0)], 0.5);
        assert_eq!(ds.x()[(0, 2)], 1.0 / 3.0);
    }

    #[test]
    fn hilbert_deterministic_and_ill_conditioned() {
        let p = HilbertParams::new(10, 20, 7, 1e-4);
        let a = gen_hilbert_dataset(&p).unwrap();
        let b = gen_hilbert_dataset(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let sb = spectrum_bounds(&a).unwrap();
        assert!(sb.condition_number() > 1e3);
        assert!(sb.lambda_min > EIGEN_CLAMP);
        assert!(gen_hilbert_dataset(&HilbertParams::new(5, 4, 0, 0.0)).is_err());
        // separable: every signed sample has positive projection on some v
        let w = min_norm_interpolant(&a).unwrap();
        assert!(a.xtilde().tr_mul(&w).iter().all(|m| *m > 0.0));
    }

    #[test]
    fn active_margin_single_point() {
        let ds = gen_active_margin_dataset(1, 2, 1.0, 3).unwrap();
        let w = min_norm_interpolant(&ds).unwrap();
        assert_relative_eq!(ds.xtilde().column(0).dot(&w), 1.0, epsilon = 1e-12);
        assert_relative_eq!(w.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn active_margin_symmetric_pair() {
        // x~_1 = (1, 1, 0), x~_2 = (1, -1, 0): the 2x2 system gives w = (1, 0, 0).
        let ds =
            Dataset::from_rows(&[vec![1.0, 1.0, 0.0], vec![-1.0, 1.0, 0.0]], &[1.0, -1.0]).unwrap();
        let w = min_norm_interpolant(&ds).unwrap();
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-12);
        assert!(w[1].abs() < 1e-12 && w[2].abs() < 1e-12);
        let gen = gen_active_margin_dataset(2, 3, 0.5, 8).unwrap();
        let w = min_norm_interpolant(&gen).unwrap();
        for m in gen.xtilde().tr_mul(&w).iter() {
            assert!((m - 1.0).abs() < 1e-8);
        }
        assert_relative_eq!(w.norm(), 2.0, max_relative = 1e-8);
    }

    #[test]
    fn simplex_margin_is_well_conditioned() {
        let ds = gen_simplex_margin_dataset(4, 6, 1.2, 2.0).unwrap();
        let w = min_norm_interpolant(&ds).unwrap();
        for m in ds.xtilde().tr_mul(&w).iter() {
            assert_relative_eq!(*m, 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(w.norm(), 1.0 / 1.2, epsilon = 1e-12);
    }

    #[test]
    fn json_and_csv_round_trip() {
        let ds = random_ds(4, 3, 1);
        let text = dataset_to_json(&ds, None);
        assert_eq!(dataset_from_json(&text).unwrap(), ds);
        let mut csv_text = String::from("f0,f1,f2,label\n");
        for j in 0..4 {
            let c = ds.x().column(j);
            csv_text.push_str(&format!("{:?},{:?},{:?},{}\n", c[0], c[1], c[2], ds.y()[j]));
        }
        assert_eq!(dataset_from_csv(csv_text.as_bytes()).unwrap(), ds);
        let bad = "1,2,1\n3,x,1\n";
        match dataset_from_csv(bad.as_bytes()) {
            Err(BnError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
