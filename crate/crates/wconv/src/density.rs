//! Rank-1 kernel density functions.
//!
//! A density is a symmetric length-K vector `alpha` with a fixed central
//! value; the K x K matrix `phi = alpha * alpha^T` scales each kernel
//! position by the relative importance of that neighbour. `phi` of all ones
//! reduces weighted convolution to the standard operator.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance for the report-only numerical checks in [`validate_density`].
const VALIDATE_TOL: f64 = 1e-12;

/// A rank-1 kernel density: the coefficient vector `alpha` and the derived
/// matrix `phi = alpha * alpha^T`.
///
/// `alpha` is palindromic with `alpha[m-1]` fixed to the central value, so
/// only `(k-1)/2` free coefficients exist; they are ordered from the
/// outermost kernel position inward.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityFunction {
    k: usize,
    central_value: f64,
    free_coeffs: Vec<f64>,
    alpha: Vec<f64>,
    phi: Tensor,
}

impl DensityFunction {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn central_value(&self) -> f64 {
        self.central_value
    }

    pub fn free_coeffs(&self) -> &[f64] {
        &self.free_coeffs
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// The K x K density matrix.
    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    /// True when `phi` is the all-ones matrix, i.e. the weighted operator
    /// degenerates to standard convolution.
    pub fn is_uniform(&self) -> bool {
        self.alpha.iter().all(|&a| a == 1.0)
    }
}

/// Assembles a density from its free coefficients.
///
/// `alpha` is laid out as `(c_1, ..., c_{m-1}, M, c_{m-1}, ..., c_1)` with
/// `m = (k+1)/2`, i.e. `free_coeffs[0]` scales the outermost ring of the
/// kernel and `M` sits at the centre.
pub fn build_density(k: usize, central_value: f64, free_coeffs: &[f64]) -> Result<DensityFunction> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel extent must be odd and >= 1, got {k}")));
    }
    let expected = (k - 1) / 2;
    if free_coeffs.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs {expected} free coefficients, got {}",
            free_coeffs.len()
        )));
    }
    if !central_value.is_finite() || free_coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("density coefficients must be finite".into()));
    }

    let mut alpha = Vec::with_capacity(k);
    alpha.extend_from_slice(free_coeffs);
    alpha.push(central_value);
    alpha.extend(free_coeffs.iter().rev());

    let mut phi = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            phi.push(alpha[i] * alpha[j]);
        }
    }

    Ok(DensityFunction {
        k,
        central_value,
        free_coeffs: free_coeffs.to_vec(),
        alpha,
        phi: Tensor::new(&[k, k], phi)?,
    })
}

/// The all-ones density: weighted convolution with it matches standard
/// convolution bit for bit.
pub fn uniform_density(k: usize) -> Result<DensityFunction> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel extent must be odd and >= 1, got {k}")));
    }
    build_density(k, 1.0, &vec![1.0; (k - 1) / 2])
}

/// One failed density invariant, reported by [`validate_density`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    KernelExtent(String),
    CoefficientCount(String),
    AlphaSymmetry(String),
    CentralValue(String),
    PhiOuterProduct(String),
    PhiMatrixSymmetry(String),
    PositiveSemidefinite(String),
    RankOne(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KernelExtent(s)
            | Violation::CoefficientCount(s)
            | Violation::AlphaSymmetry(s)
            | Violation::CentralValue(s)
            | Violation::PhiOuterProduct(s)
            | Violation::PhiMatrixSymmetry(s)
            | Violation::PositiveSemidefinite(s)
            | Violation::RankOne(s) => f.write_str(s),
        }
    }
}

/// Report-only check of every density invariant. Returns an empty list iff
/// the density is well formed: odd extent, palindromic `alpha` with the
/// stated central value, `phi` equal to the outer product of `alpha` with
/// itself, matrix-symmetric, positive semidefinite (eigenvalue floor
/// `-1e-12`), and rank 1 (second singular value at most `1e-12` times the
/// largest).
pub fn validate_density(d: &DensityFunction) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = d.k;

    if k == 0 || k % 2 == 0 {
        out.push(Violation::KernelExtent(format!("kernel extent {k} is not odd and positive")));
        return out;
    }
    if d.alpha.len() != k {
        out.push(Violation::KernelExtent(format!(
            "alpha length {} does not match kernel extent {k}",
            d.alpha.len()
        )));
        return out;
    }
    if d.free_coeffs.len() != (k - 1) / 2 {
        out.push(Violation::CoefficientCount(format!(
            "expected {} free coefficients, found {}",
            (k - 1) / 2,
            d.free_coeffs.len()
        )));
    }
    for i in 0..k {
        let j = k - 1 - i;
        if d.alpha[i] != d.alpha[j] {
            out.push(Violation::AlphaSymmetry(format!(
                "alpha[{i}] = {} differs from alpha[{j}] = {}",
                d.alpha[i], d.alpha[j]
            )));
            break;
        }
    }
    let m = (k + 1) / 2;
    if d.alpha[m - 1] != d.central_value {
        out.push(Violation::CentralValue(format!(
            "alpha[{}] = {} does not equal the declared central value {}",
            m - 1,
            d.alpha[m - 1],
            d.central_value
        )));
    }

    if d.phi.shape() != [k, k] {
        out.push(Violation::PhiOuterProduct(format!(
            "phi shape {:?} is not [{k}, {k}]",
            d.phi.shape()
        )));
        return out;
    }
    let phi = d.phi.data();
    'outer: for i in 0..k {
        for j in 0..k {
            if phi[i * k + j] != d.alpha[i] * d.alpha[j] {
                out.push(Violation::PhiOuterProduct(format!(
                    "phi[{i}][{j}] = {} differs from alpha[{i}]*alpha[{j}] = {}",
                    phi[i * k + j],
                    d.alpha[i] * d.alpha[j]
                )));
                break 'outer;
            }
        }
    }
    'sym: for i in 0..k {
        for j in (i + 1)..k {
            if phi[i * k + j] != phi[j * k + i] {
                out.push(Violation::PhiMatrixSymmetry(format!(
                    "phi[{i}][{j}] = {} differs from phi[{j}][{i}] = {}",
                    phi[i * k + j],
                    phi[j * k + i]
                )));
                break 'sym;
            }
        }
    }

    // PSD is a statement about the quadratic form, so it is checked on the
    // symmetric part.
    let eigs = symmetric_eigenvalues(phi, k);
    if let Some(&min) = eigs.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -VALIDATE_TOL {
            out.push(Violation::PositiveSemidefinite(format!("smallest eigenvalue {min} below -1e-12")));
        }
    }

    // Rank: for a symmetric matrix the singular values are the eigenvalue
    // magnitudes, so the second-largest/largest ratio is checked at full
    // precision. An asymmetric phi would lose half the precision through the
    // Gram matrix, so rank 1 is decided there by its 2x2 minors instead.
    let symmetric = (0..k).all(|i| (i + 1..k).all(|j| phi[i * k + j] == phi[j * k + i]));
    if symmetric {
        let mut mags: Vec<f64> = eigs.iter().map(|e| e.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        if mags.len() >= 2 && mags[0] > 0.0 && mags[1] > VALIDATE_TOL * mags[0] {
            out.push(Violation::RankOne(format!(
                "second singular value {} exceeds 1e-12 x largest {}",
                mags[1], mags[0]
            )));
        }
    } else {
        let scale = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale > 0.0 {
            'minors: for i in 0..k {
                for j in (i + 1)..k {
                    for p in 0..k {
                        for q in (p + 1)..k {
                            let minor = phi[i * k + p] * phi[j * k + q] - phi[i * k + q] * phi[j * k + p];
                            if minor.abs() > VALIDATE_TOL * scale * scale {
                                out.push(Violation::RankOne(format!(
                                    "2x2 minor ({i},{j})x({p},{q}) = {minor} is nonzero"
                                )));
                                break 'minors;
                            }
                        }
                    }
                }
            }
        }
    }

    out
}

/// Eigenvalues of a symmetric K x K matrix by cyclic Jacobi rotations.
/// For asymmetric input this operates on `(A + A^T) / 2`.
fn symmetric_eigenvalues(data: &[f64], k: usize) -> Vec<f64> {
    let mut a = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            a[i * k + j] = 0.5 * (data[i * k + j] + data[j * k + i]);
        }
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                off += a[i * k + j] * a[i * k + j];
            }
        }
        if off.sqrt() < 1e-15 {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = a[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * k + p];
                let aqq = a[q * k + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..k {
                    let aip = a[i * k + p];
                    let aiq = a[i * k + q];
                    a[i * k + p] = c * aip - s * aiq;
                    a[i * k + q] = s * aip + c * aiq;
                }
                for j in 0..k {
                    let apj = a[p * k + j];
                    let aqj = a[q * k + j];
                    a[p * k + j] = c * apj - s * aqj;
                    a[q * k + j] = s * apj + c * aqj;
                }
            }
        }
    }
    (0..k).map(|i| a[i * k + i]).collect()
}
