//! Classical difference-image generators.
//!
//! Every generator maps a co-registered image pair to a [`ScalarMap`] in
//! `[0, 1]` where larger values mean stronger evidence of change. They serve
//! both as the pre-detection stage and as comparison baselines.

mod gamma;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::raster::{RasterImage, ScalarMap};

pub use gamma::{chi_square_sf, gamma_q, ln_gamma};

/// Offset applied to both intensities before ratioing.
pub const RATIO_EPS: f64 = 1e-3;

/// Relative ridge added to covariance diagonals in (IR-)MAD.
pub const RIDGE: f64 = 1e-6;

/// Ranges at or below this are treated as constant maps by [`rescale_unit`].
pub const RESCALE_EPS: f64 = 1e-12;

fn check_pair(x1: &RasterImage, x2: &RasterImage) -> Result<()> {
    if !x1.same_shape(x2) {
        return Err(Error::Shape(format!(
            "image pair differs in shape: {}x{}x{} vs {}x{}x{}",
            x1.height(),
            x1.width(),
            x1.channels(),
            x2.height(),
            x2.width(),
            x2.channels()
        )));
    }
    Ok(())
}

fn per_pixel(
    x1: &RasterImage,
    x2: &RasterImage,
    f: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<ScalarMap> {
    check_pair(x1, x2)?;
    let data = x1.pixels().zip(x2.pixels()).map(|(a, b)| f(a, b)).collect();
    ScalarMap::new(x1.height(), x1.width(), data)
}

/// Change vector magnitude, normalized by `sqrt(C)`.
pub fn cva(x1: &RasterImage, x2: &RasterImage) -> Result<ScalarMap> {
    let norm = (x1.channels() as f64).sqrt();
    per_pixel(x1, x2, |a, b| {
        let ss: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        (ss.sqrt() / norm).min(1.0)
    })
}

/// Mean absolute channel difference.
pub fn image_diff(x1: &RasterImage, x2: &RasterImage) -> Result<ScalarMap> {
    let c = x1.channels() as f64;
    per_pixel(x1, x2, |a, b| {
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / c
    })
}

/// Mean over channels of `1 - min/max` of the offset intensities.
pub fn image_ratio(x1: &RasterImage, x2: &RasterImage) -> Result<ScalarMap> {
    let c = x1.channels() as f64;
    per_pixel(x1, x2, |a, b| {
        a.iter()
            .zip(b)
            .map(|(p, q)| {
                let (p, q) = (p + RATIO_EPS, q + RATIO_EPS);
                1.0 - p.min(q) / p.max(q)
            })
            .sum::<f64>()
            / c
    })
}

/// Min-max rescale into `[0, 1]`; near-constant input maps to all zeros.
pub fn rescale_unit(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range.is_nan() || range <= RESCALE_EPS * hi.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
        .collect()
}

/// Pixels as rows of an N x C matrix.
fn pixel_matrix(img: &RasterImage) -> DMatrix<f64> {
    DMatrix::from_row_slice(img.height() * img.width(), img.channels(), img.data())
}

/// Norm of the projection of each difference vector onto the top-`k`
/// principal axes of the difference-vector covariance.
pub fn pca_di(x1: &RasterImage, x2: &RasterImage, k: usize) -> Result<ScalarMap> {
    check_pair(x1, x2)?;
    let c = x1.channels();
    if k == 0 || k > c {
        return Err(Error::Argument(format!(
            "component count {k} outside 1..={c}"
        )));
    }
    let diffs = pixel_matrix(x1) - pixel_matrix(x2);
    let n = diffs.nrows() as f64;
    let mean = diffs.row_mean();
    let mut centered = diffs.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let axes = DMatrix::from_fn(c, k, |r, j| eig.eigenvectors[(r, order[j])]);
    let projected = diffs * axes;
    let norms: Vec<f64> = projected.row_iter().map(|row| row.norm()).collect();
    ScalarMap::new(x1.height(), x1.width(), rescale_unit(&norms))
}

/// One weighted canonical correlation fit between the channels of two
/// images.
struct Canonical {
    /// Canonical correlations, descending.
    correlations: Vec<f64>,
    /// Chi-square statistic per pixel, before rescaling.
    chi_square: Vec<f64>,
}

fn weighted_mean(data: &DMatrix<f64>, weights: &[f64], total: f64) -> DVector<f64> {
    let mut mean = DVector::zeros(data.ncols());
    for (row, &w) in data.row_iter().zip(weights) {
        mean += row.transpose() * w;
    }
    mean / total
}

fn center(data: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = data.clone();
    let mean_t = mean.transpose();
    for mut row in out.row_iter_mut() {
        row -= &mean_t;
    }
    out
}

fn weighted_cross(a: &DMatrix<f64>, b: &DMatrix<f64>, weights: &[f64], total: f64) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] * weights[r]);
    scaled.transpose() * b / total
}

fn add_ridge(mut cov: DMatrix<f64>) -> DMatrix<f64> {
    let c = cov.nrows();
    let lambda = RIDGE * cov.trace() / c as f64;
    for i in 0..c {
        cov[(i, i)] += lambda;
    }
    cov
}

fn canonical_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, weights: &[f64]) -> Result<Canonical> {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Numeric {
            matrix: "pixel weights".into(),
            message: "weights sum to zero".into(),
        });
    }
    let xc = center(x, &weighted_mean(x, weights, total));
    let yc = center(y, &weighted_mean(y, weights, total));
    let sxx = add_ridge(weighted_cross(&xc, &xc, weights, total));
    let syy = add_ridge(weighted_cross(&yc, &yc, weights, total));
    let sxy = weighted_cross(&xc, &yc, weights, total);

    let singular = |name: &str| Error::Numeric {
        matrix: name.into(),
        message: "covariance is singular after ridge regularization".into(),
    };
    let lx = sxx
        .cholesky()
        .ok_or_else(|| singular("covariance of x1"))?
        .l();
    let ly = syy
        .cholesky()
        .ok_or_else(|| singular("covariance of x2"))?
        .l();
    let lx_inv = lx
        .try_inverse()
        .ok_or_else(|| singular("covariance of x1"))?;
    let ly_inv = ly
        .try_inverse()
        .ok_or_else(|| singular("covariance of x2"))?;

    // K = Lx^-1 Sxy Ly^-T; its singular values are the canonical correlations
    let whitened = &lx_inv * sxy * ly_inv.transpose();
    let svd = whitened.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let a = lx_inv.transpose() * u;
    let b = ly_inv.transpose() * v_t.transpose();

    let mad = xc * a - yc * b;
    let variances: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&rho| (2.0 * (1.0 - rho)).max(RESCALE_EPS))
        .collect();
    let chi_square = mad
        .row_iter()
        .map(|row| row.iter().zip(&variances).map(|(m, s)| m * m / s).sum())
        .collect();

    let mut correlations: Vec<f64> = svd.singular_values.iter().copied().collect();
    correlations.sort_by(|p, q| q.total_cmp(p));
    Ok(Canonical {
        correlations,
        chi_square,
    })
}

/// Multivariate alteration detection: chi-square statistic of the
/// standardized differences of paired canonical variates.
pub fn mad(x1: &RasterImage, x2: &RasterImage) -> Result<ScalarMap> {
    irmad(x1, x2, 1, 1.0)
}

/// Iteratively reweighted MAD. Pixel weights for the next fit are the
/// chi-square survival probabilities (C degrees of freedom) of the current
/// statistic. Stops once the largest change in any canonical correlation
/// falls below `tol`, or after `max_iter` fits.
pub fn irmad(x1: &RasterImage, x2: &RasterImage, max_iter: usize, tol: f64) -> Result<ScalarMap> {
    irmad_detailed(x1, x2, max_iter, tol).map(|r| r.map)
}

#[derive(Debug, Clone)]
pub struct IrmadResult {
    pub map: ScalarMap,
    pub iterations: usize,
    pub correlations: Vec<f64>,
}

pub fn irmad_detailed(
    x1: &RasterImage,
    x2: &RasterImage,
    max_iter: usize,
    tol: f64,
) -> Result<IrmadResult> {
    check_pair(x1, x2)?;
    if max_iter == 0 {
        return Err(Error::Argument("max_iter must be at least 1".into()));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Argument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let x = pixel_matrix(x1);
    let y = pixel_matrix(x2);
    let dof = x1.channels();
    let mut weights = vec![1.0; x.nrows()];
    let mut fit = canonical_fit(&x, &y, &weights)?;
    let mut iterations = 1;
    while iterations < max_iter {
        for (w, &chi) in weights.iter_mut().zip(&fit.chi_square) {
            *w = chi_square_sf(chi, dof);
        }
        let next = canonical_fit(&x, &y, &weights)?;
        iterations += 1;
        let delta = next
            .correlations
            .iter()
            .zip(&fit.correlations)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        fit = next;
        if delta < tol {
            break;
        }
    }
    Ok(IrmadResult {
        map: ScalarMap::new(x1.height(), x1.width(), rescale_unit(&fit.chi_square))?,
        iterations,
        correlations: fit.correlations,
    })
}

/// Named generators selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Diff,
    Ratio,
    Cva,
    Pca,
    Mad,
    Irmad,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Diff,
        Method::Ratio,
        Method::Cva,
        Method::Pca,
        Method::Mad,
        Method::Irmad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Diff => "diff",
            Method::Ratio => "ratio",
            Method::Cva => "cva",
            Method::Pca => "pca",
            Method::Mad => "mad",
            Method::Irmad => "irmad",
        }
    }

    /// Run with default settings: PCA keeps one component, IR-MAD runs up to
    /// 30 fits at tolerance 1e-6.
    pub fn apply(self, x1: &RasterImage, x2: &RasterImage) -> Result<ScalarMap> {
        match self {
            Method::Diff => image_diff(x1, x2),
            Method::Ratio => image_ratio(x1, x2),
            Method::Cva => cva(x1, x2),
            Method::Pca => pca_di(x1, x2, 1),
            Method::Mad => mad(x1, x2),
            Method::Irmad => irmad(x1, x2, 30, 1e-6),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method {s:?}")))
    }
}
