//! Interpretation tools: the intra-class correlation coefficient, inverse
//! Wishart moment formulas, and the permutation test of the no-heterogeneity
//! hypothesis (nu = infinity).

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::error::{RcmError, Result};
use crate::estimators::{fit_rcm_default, FitConfig, NU_CAP};
use crate::ingest::center_columns;
use crate::likelihood::StudyData;
use crate::matrixcore::SpdMatrix;
use crate::sampling::{sample_inv_wishart, sample_mvn, RcmRng};

/// Intra-class correlation coefficient ICC(nu) = 1/(nu - p): the fraction
/// of covariance variability attributable to between-study variation.
/// Monotone decreasing in nu; tends to 0 as nu grows.
pub fn icc(nu: f64, p: usize) -> Result<f64> {
    if !(nu > p as f64) {
        return Err(RcmError::domain(format!(
            "icc: nu = {nu} must exceed p = {p} (pole at nu = p; moments need nu > p + 3)"
        )));
    }
    Ok(1.0 / (nu - p as f64))
}

/// Cov(Sigma_ij, Sigma_kl) under Sigma ~ InvWishart(Psi, nu):
/// [2 Psi_ij Psi_kl + (nu-p-1)(Psi_ik Psi_jl + Psi_il Psi_kj)]
///   / [(nu-p)(nu-p-1)^2 (nu-p-3)].
pub fn invwishart_cov(
    psi: &SpdMatrix,
    nu: f64,
    indices: (usize, usize, usize, usize),
) -> Result<f64> {
    let p = psi.dim() as f64;
    if !(nu > p + 3.0) {
        return Err(RcmError::domain(format!(
            "invwishart_cov: fourth moments need nu > p + 3 = {}",
            p + 3.0
        )));
    }
    let (i, j, k, l) = indices;
    let m = psi.entries();
    let num = 2.0 * m[(i, j)] * m[(k, l)]
        + (nu - p - 1.0) * (m[(i, k)] * m[(j, l)] + m[(i, l)] * m[(k, j)]);
    let den = (nu - p) * (nu - p - 1.0).powi(2) * (nu - p - 3.0);
    Ok(num / den)
}

/// Monte Carlo estimate of the ICC through the single-observation
/// construction: Sigma ~ InvWishart(Psi, nu), S | Sigma ~ Wishart(Sigma, 1),
/// returning the empirical Var(Sigma_ij) / Var(S_ij) averaged over index
/// pairs i <= j.
pub fn icc_montecarlo(
    psi: &SpdMatrix,
    nu: f64,
    draws: usize,
    rng: &mut RcmRng,
) -> Result<f64> {
    let p = psi.dim();
    if !(nu > p as f64 + 3.0) {
        return Err(RcmError::domain("icc_montecarlo: needs nu > p + 3"));
    }
    if draws < 2 {
        return Err(RcmError::domain("icc_montecarlo: needs at least 2 draws"));
    }
    let pairs: Vec<(usize, usize)> =
        (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
    let mut sig_sum = vec![0.0; pairs.len()];
    let mut sig_sq = vec![0.0; pairs.len()];
    let mut s_sum = vec![0.0; pairs.len()];
    let mut s_sq = vec![0.0; pairs.len()];
    for _ in 0..draws {
        let sigma = sample_inv_wishart(rng, psi, nu)?;
        // Wishart(Sigma, 1) = x x^T for a single Gaussian row
        let x = sample_mvn(rng, 1, &sigma);
        for (idx, &(i, j)) in pairs.iter().enumerate() {
            let sv = sigma.entries()[(i, j)];
            let wv = x[(0, i)] * x[(0, j)];
            sig_sum[idx] += sv;
            sig_sq[idx] += sv * sv;
            s_sum[idx] += wv;
            s_sq[idx] += wv * wv;
        }
    }
    let n = draws as f64;
    let mut ratio = 0.0;
    for idx in 0..pairs.len() {
        let var_sig = (sig_sq[idx] - sig_sum[idx] * sig_sum[idx] / n) / (n - 1.0);
        let var_s = (s_sq[idx] - s_sum[idx] * s_sum[idx] / n) / (n - 1.0);
        ratio += var_sig / var_s;
    }
    Ok(ratio / pairs.len() as f64)
}

/// Result of the permutation test for H0: nu = infinity (all studies share
/// one covariance). Small observed nu-hat is the critical direction.
#[derive(Debug, Clone)]
pub struct HomogeneityTest {
    pub nu_obs: f64,
    pub null_nus: Vec<f64>,
    pub p_value: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

/// p = (1 + #{null < observed}) / (N + 1); never below 1/(N+1).
pub fn permutation_p_value(nu_obs: f64, null_nus: &[f64]) -> f64 {
    let below = null_nus.iter().filter(|&&v| v < nu_obs).count();
    (1 + below) as f64 / (null_nus.len() + 1) as f64
}

/// Configuration for the permutation test. Null fits reuse the observed
/// fit's configuration, typically with a reduced iteration cap.
#[derive(Debug, Clone)]
pub struct HomogeneityConfig {
    pub fit: FitConfig,
    /// Re-center each pseudo-study before forming its scatter matrix.
    pub recenter: bool,
    pub seed: u64,
}

impl Default for HomogeneityConfig {
    fn default() -> Self {
        HomogeneityConfig { fit: FitConfig::default(), recenter: true, seed: 0 }
    }
}

fn studies_to_data(studies: &[Array2<f64>], recenter: bool) -> Result<Vec<StudyData>> {
    studies
        .iter()
        .map(|x| {
            let x = if recenter { center_columns(x) } else { x.clone() };
            StudyData::from_observations(&x)
        })
        .collect()
}

fn fitted_nu(data: &[StudyData], cfg: &FitConfig) -> Result<f64> {
    // A saturated search is recorded at the cap; ordering against the
    // observed value stays well-defined.
    let res = fit_rcm_default(data, cfg)?;
    Ok(if res.nu_saturated { NU_CAP } else { res.nu_hat })
}

/// Permutation test over raw observation rows: pools all rows, reassigns
/// them to pseudo-studies preserving the original study sizes, refits, and
/// compares the observed nu-hat against the resampled null draws.
/// Replicates run in parallel on independent RNG substreams; results are
/// collected by replicate index, so the outcome is scheduling-independent.
pub fn permutation_test(
    raw_studies: &[Array2<f64>],
    n_permutations: usize,
    cfg: &HomogeneityConfig,
) -> Result<HomogeneityTest> {
    if raw_studies.len() < 2 {
        return Err(RcmError::domain(
            "permutation_test: at least 2 studies are required",
        ));
    }
    if n_permutations == 0 {
        return Err(RcmError::domain("permutation_test: N must be >= 1"));
    }
    let p = raw_studies[0].ncols();
    for x in raw_studies {
        if x.ncols() != p {
            return Err(RcmError::DimensionMismatch { expected: p, got: x.ncols() });
        }
    }
    let sizes: Vec<usize> = raw_studies.iter().map(|x| x.nrows()).collect();
    let n_total: usize = sizes.iter().sum();

    let nu_obs = fitted_nu(&studies_to_data(raw_studies, cfg.recenter)?, &cfg.fit)?;

    let mut pooled = Array2::<f64>::zeros((n_total, p));
    let mut row = 0;
    for x in raw_studies {
        for r in 0..x.nrows() {
            pooled.row_mut(row).assign(&x.row(r));
            row += 1;
        }
    }

    let null_nus: Vec<f64> = (0..n_permutations)
        .into_par_iter()
        .map(|rep| {
            let mut rng = RcmRng::seed_from_u64(cfg.seed ^ (rep as u64 + 1));
            let mut order: Vec<usize> = (0..n_total).collect();
            order.shuffle(&mut rng);
            let mut cursor = 0;
            let mut pseudo = Vec::with_capacity(sizes.len());
            for &sz in &sizes {
                let mut x = Array2::<f64>::zeros((sz, p));
                for r in 0..sz {
                    x.row_mut(r).assign(&pooled.row(order[cursor + r]));
                }
                cursor += sz;
                pseudo.push(x);
            }
            fitted_nu(&studies_to_data(&pseudo, cfg.recenter)?, &cfg.fit)
        })
        .collect::<Result<Vec<f64>>>()?;

    let p_value = permutation_p_value(nu_obs, &null_nus);
    Ok(HomogeneityTest {
        nu_obs,
        null_nus,
        p_value,
        n_permutations,
        seed: cfg.seed,
    })
}
