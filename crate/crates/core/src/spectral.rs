//! Singular values and spectral utilization metrics.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration: column pairs of the
//! working matrix are rotated until every pair is orthogonal to within a relative
//! tolerance of `1e-12`. It is slow for large matrices but accurate and fully
//! deterministic, which is what the diagnostics here need.
//!
//! Effective rank is the exponential of the Shannon entropy of the normalized
//! singular values `p_i = σ_i / Σ σ_j`. The cumulative energy curve and AUC-90
//! index use `σ^e` with `e = 1` by default, consistent with that normalization;
//! `e = 2` is available for the conventional variance reading.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

const JACOBI_TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;
/// Fraction of cumulative energy that defines the AUC-90 index.
pub const AUC_THRESHOLD: f64 = 0.9;

/// Thin SVD `m = U · diag(σ) · Vᵀ` with `p = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows × p`
    pub u: Tensor,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `cols × p`
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Result<Tensor> {
        let scaled = Tensor::new(
            self.u.shape().to_vec(),
            self.u
                .data()
                .chunks(self.singular_values.len().max(1))
                .flat_map(|row| row.iter().zip(&self.singular_values).map(|(u, s)| u * s))
                .collect(),
        )?;
        scaled.matmul_t(&self.v)
    }
}

/// Full thin SVD of a matrix.
pub fn svd(m: &Tensor) -> Result<Svd> {
    let (rows, cols) = m.dims2()?;
    if !m.is_finite() {
        return Err(Error::Domain("SVD input contains non-finite entries".into()));
    }
    if rows >= cols {
        let (u, s, v) = one_sided_jacobi(m.data(), rows, cols)?;
        Ok(Svd {
            u,
            singular_values: s,
            v,
        })
    } else {
        let t = m.transpose()?;
        let (v, s, u) = one_sided_jacobi(t.data(), cols, rows)?;
        Ok(Svd {
            u,
            singular_values: s,
            v,
        })
    }
}

/// Descending singular values, `min(rows, cols)` of them.
pub fn svd_values(m: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(m)?.singular_values)
}

/// Jacobi on an `m × n` matrix with `m ≥ n`; returns `(U m×n, σ, V n×n)` sorted descending.
fn one_sided_jacobi(data: &[f64], m: usize, n: usize) -> Result<(Tensor, Vec<f64>, Tensor)> {
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| data[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let sigma: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));

    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    let mut s_sorted = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        s_sorted.push(s);
        for i in 0..m {
            u.data_mut()[i * n + dst] = if s > 0.0 { a[src][i] / s } else { 0.0 };
        }
        for i in 0..n {
            vt.data_mut()[i * n + dst] = v[src][i];
        }
    }
    Ok((u, s_sorted, vt))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
        let (xi, yi) = (*x, *y);
        *x = c * xi - s * yi;
        *y = s * xi + c * yi;
    }
}

fn check_spectrum(sv: &[f64]) -> Result<()> {
    if let Some(bad) = sv.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::Domain(format!("singular values must be finite and non-negative, got {bad}")));
    }
    Ok(())
}

/// `exp(−Σ p_i ln p_i)` with `p_i = σ_i / Σσ`; `0 ln 0 = 0`. All-zero input gives 0.
pub fn effective_rank(sv: &[f64]) -> Result<f64> {
    check_spectrum(sv)?;
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let entropy: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Normalized cumulative sums of `σ^exponent`; the last entry is 1.
pub fn energy_curve(sv: &[f64], exponent: u32) -> Result<Vec<f64>> {
    check_spectrum(sv)?;
    if exponent != 1 && exponent != 2 {
        return Err(Error::Domain(format!("energy exponent must be 1 or 2, got {exponent}")));
    }
    let powered: Vec<f64> = sv.iter().map(|s| s.powi(exponent as i32)).collect();
    let total: f64 = powered.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("energy curve of an all-zero spectrum".into()));
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = powered
        .iter()
        .map(|p| {
            acc += p;
            acc / total
        })
        .collect();
    if let Some(last) = curve.last_mut() {
        *last = 1.0;
    }
    Ok(curve)
}

/// Smallest `k` with `energy_curve(sv)[k − 1] ≥ 0.9`.
pub fn auc90(sv: &[f64], exponent: u32) -> Result<usize> {
    let curve = energy_curve(sv, exponent)?;
    Ok(curve
        .iter()
        .position(|&c| c >= AUC_THRESHOLD)
        .map_or(curve.len(), |i| i + 1))
}

/// Number of singular values above `rel_tol · σ₁`.
pub fn numerical_rank(sv: &[f64], rel_tol: f64) -> usize {
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// The mergeable linear update `(alpha / r) · B · A`, with `A: r × k` and `B: d × r`.
pub fn delta_w_linear(a: &Tensor, b: &Tensor, alpha: f64, r: usize) -> Result<Tensor> {
    let (ra, _) = a.dims2()?;
    let (_, rb) = b.dims2()?;
    if ra != r || rb != r {
        return Err(Error::shape(
            "delta_w_linear",
            format!("A has {ra} rows and B has {rb} columns for rank {r}"),
        ));
    }
    if r == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    Ok(b.matmul(a)?.scale(alpha / r as f64))
}

/// Singular spectrum and the utilization metrics derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub source_label: String,
    pub singular_values: Vec<f64>,
    pub effective_rank: f64,
    /// `None` only for an all-zero spectrum, where no energy exists to accumulate.
    pub auc90_index: Option<usize>,
    /// Empty for an all-zero spectrum.
    pub energy_curve: Vec<f64>,
}

impl SpectralReport {
    pub fn from_singular_values(label: impl Into<String>, sv: Vec<f64>, exponent: u32) -> Result<Self> {
        let effective_rank = effective_rank(&sv)?;
        let (energy_curve, auc90_index) = if sv.iter().any(|&s| s > 0.0) {
            (energy_curve(&sv, exponent)?, Some(auc90(&sv, exponent)?))
        } else {
            (Vec::new(), None)
        };
        Ok(SpectralReport {
            source_label: label.into(),
            singular_values: sv,
            effective_rank,
            auc90_index,
            energy_curve,
        })
    }

    pub fn from_matrix(label: impl Into<String>, m: &Tensor, exponent: u32) -> Result<Self> {
        Self::from_singular_values(label, svd_values(m)?, exponent)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Spectrum of an `N × dim` activation matrix with σ-based energy.
pub fn activation_spectrum(h: &Tensor, label: &str) -> Result<SpectralReport> {
    let (n, dim) = h.dims2()?;
    if n < dim {
        log::warn!("activation matrix '{label}' has fewer samples ({n}) than dimensions ({dim})");
    }
    SpectralReport::from_matrix(label, h, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn identity_and_diagonal_spectra() {
        assert_eq!(svd_values(&Tensor::eye(3)).unwrap(), vec![1.0, 1.0, 1.0]);
        let d = Tensor::diag(&[1.0, 3.0, 2.0]);
        assert_eq!(svd_values(&d).unwrap(), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let m = RngState::new(5, 0).uniform_tensor(&[3, 7], -1.0, 1.0);
        let s = svd(&m).unwrap();
        assert_eq!(s.u.shape(), &[3, 3]);
        assert_eq!(s.v.shape(), &[7, 3]);
        let err = s.reconstruct().unwrap().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn rank_deficient_input_has_zero_tail() {
        let a = RngState::new(6, 0).uniform_tensor(&[6, 2], -1.0, 1.0);
        let b = RngState::new(6, 1).uniform_tensor(&[2, 5], -1.0, 1.0);
        let sv = svd_values(&a.matmul(&b).unwrap()).unwrap();
        assert_eq!(numerical_rank(&sv, 1e-9), 2);
    }

    #[test]
    fn non_finite_input_is_a_domain_error() {
        let m = Tensor::new(vec![2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(matches!(svd_values(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn effective_rank_goldens() {
        assert!((effective_rank(&[1.0, 1.0, 1.0, 1.0]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(effective_rank(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        // exp(−(2/3)ln(2/3) − (1/3)ln(1/3)) evaluated by hand
        assert!((effective_rank(&[2.0, 1.0]).unwrap() - 1.889_882).abs() < 1e-5);
        assert_eq!(effective_rank(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(effective_rank(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn energy_curve_goldens() {
        assert_eq!(energy_curve(&[1.0; 4], 1).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        let c = energy_curve(&[3.0, 1.0], 2).unwrap();
        assert!((c[0] - 0.9).abs() < 1e-15);
        assert_eq!(c[1], 1.0);
        assert!(energy_curve(&[0.0, 0.0], 1).is_err());
        assert!(energy_curve(&[1.0], 3).is_err());
    }

    #[test]
    fn auc90_goldens() {
        assert_eq!(auc90(&[1.0; 10], 1).unwrap(), 9);
        assert_eq!(auc90(&[100.0, 1.0], 1).unwrap(), 1);
        assert_eq!(auc90(&[3.0, 1.0], 2).unwrap(), 1);
        assert_eq!(auc90(&[1.0, 0.0, 0.0], 1).unwrap(), 1);
    }

    #[test]
    fn delta_w_goldens() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![0.0], vec![0.0]]).unwrap();
        let dw = delta_w_linear(&a, &b, 1.0, 1).unwrap();
        assert_eq!(dw.shape(), &[3, 2]);
        assert_eq!(dw.data(), &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let zero = delta_w_linear(&a, &Tensor::zeros(&[3, 1]), 4.0, 1).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        assert!(delta_w_linear(&a, &b, 1.0, 2).is_err());
    }

    #[test]
    fn activation_spectrum_edge_cases() {
        let ones = Tensor::ones(&[20, 4]);
        let r = activation_spectrum(&ones, "ones").unwrap();
        assert!((r.effective_rank - 1.0).abs() < 1e-9);

        // rows of the identity are orthonormal: flat spectrum
        let mut h = Tensor::zeros(&[8, 4]);
        for i in 0..4 {
            h.data_mut()[i * 4 + i] = 1.0;
        }
        let r = activation_spectrum(&h, "eye").unwrap();
        assert!((r.effective_rank - 4.0).abs() < 1e-12);
        assert_eq!(r.auc90_index, Some(4));

        let z = activation_spectrum(&Tensor::zeros(&[5, 3]), "zero").unwrap();
        assert_eq!(z.effective_rank, 0.0);
        assert_eq!(z.auc90_index, None);
    }

    #[test]
    fn report_json_uses_field_names() {
        let r = SpectralReport::from_singular_values("x", vec![2.0, 1.0], 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["source_label", "singular_values", "effective_rank", "auc90_index", "energy_curve"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
