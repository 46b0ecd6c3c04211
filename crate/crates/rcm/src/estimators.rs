//! The three Psi-estimators (pooled moment, EM, approximate MLE), the 1-D
//! nu maximizer, and the coordinate-ascent fit driver.

use std::time::Instant;

use ndarray::Array2;

use crate::error::{RcmError, Result};
use crate::likelihood::{log_likelihood, profile_nu, StudyData, NU_DOMAIN_DELTA};
use crate::matrixcore::SpdMatrix;
use crate::sampling::RcmParams;

/// Upper cap for the nu search. Saturation at the cap is a legitimate
/// statistical outcome ("no detectable heterogeneity").
pub const NU_CAP: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Pooled,
    Em,
    ApproxMle,
}

impl std::fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorTag::Pooled => write!(f, "pooled"),
            EstimatorTag::Em => write!(f, "em"),
            EstimatorTag::ApproxMle => write!(f, "approx_mle"),
        }
    }
}

impl std::str::FromStr for EstimatorTag {
    type Err = RcmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(EstimatorTag::Pooled),
            "em" => Ok(EstimatorTag::Em),
            "approx_mle" | "approx-mle" => Ok(EstimatorTag::ApproxMle),
            other => Err(RcmError::Parse(format!("unknown estimator tag: {other}"))),
        }
    }
}

/// Output of a fit: estimates, trace, and run metadata.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub psi_hat: SpdMatrix,
    pub nu_hat: f64,
    /// Psi-hat / (nu-hat - p - 1); defined only when nu_hat > p + 1.
    pub sigma_hat: Option<SpdMatrix>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub wall_time: f64,
    pub converged: bool,
    pub estimator: EstimatorTag,
    /// The nu search hit the upper cap while still increasing.
    pub nu_saturated: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    fn finish_sigma(psi: &SpdMatrix, nu: f64) -> Option<SpdMatrix> {
        let p = psi.dim() as f64;
        if nu > p + 1.0 {
            SpdMatrix::new(psi.entries() / (nu - p - 1.0)).ok()
        } else {
            None
        }
    }
}

/// Fit configuration for the coordinate-ascent driver.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub inner: EstimatorTag,
    /// Absolute log-likelihood increment stopping the outer loop.
    pub eps: f64,
    pub max_iter: usize,
    /// Tolerance and cap for the inner EM loop within one outer step.
    pub inner_eps: f64,
    pub inner_max_iter: usize,
    /// Run the inner EM to its own tolerance per outer step (default)
    /// rather than applying a single update.
    pub inner_full: bool,
    /// nu search bracket; `None` picks (p + 1 + 1e-3, 8 (p + 2)) which
    /// keeps sigma_hat and the ICC defined.
    pub nu_bracket: Option<(f64, f64)>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            inner: EstimatorTag::Em,
            eps: 1e-6,
            max_iter: 1000,
            inner_eps: 1e-8,
            inner_max_iter: 2000,
            inner_full: true,
            nu_bracket: None,
        }
    }
}

fn total_n(data: &[StudyData]) -> usize {
    data.iter().map(|d| d.n()).sum()
}

fn data_dim(data: &[StudyData]) -> Result<usize> {
    data.first()
        .map(|d| d.dim())
        .ok_or_else(|| RcmError::domain("at least one study is required"))
}

/// Pooled moment estimator: sigma = sum S_i / sum n_i, psi = (nu-p-1) sigma.
pub fn estimate_pooled(data: &[StudyData], nu: f64) -> Result<(SpdMatrix, SpdMatrix)> {
    let p = data_dim(data)?;
    if !(nu > p as f64 + 1.0) {
        return Err(RcmError::domain(format!(
            "estimate_pooled: nu = {nu} must exceed p + 1 = {}",
            p as f64 + 1.0
        )));
    }
    let sigma = pooled_sigma(data)?;
    let psi = SpdMatrix::new(sigma.entries() * (nu - p as f64 - 1.0))?;
    Ok((psi, sigma))
}

/// sum S_i / sum n_i without the nu scaling; shared by the default init.
pub fn pooled_sigma(data: &[StudyData]) -> Result<SpdMatrix> {
    let p = data_dim(data)?;
    let n_total = total_n(data) as f64;
    let mut acc = Array2::<f64>::zeros((p, p));
    for d in data {
        acc += d.scatter();
    }
    SpdMatrix::new(acc / n_total)
}

/// One EM update of Theta = Psi^{-1}:
/// Theta' = (1/(k nu)) sum_i (n_i + nu) (Theta^{-1} + S_i)^{-1}.
pub fn em_step(theta: &SpdMatrix, data: &[StudyData], nu: f64) -> Result<SpdMatrix> {
    let p = data_dim(data)?;
    if theta.dim() != p {
        return Err(RcmError::DimensionMismatch { expected: p, got: theta.dim() });
    }
    if !(nu > p as f64 - 1.0) {
        return Err(RcmError::domain(format!("em_step: nu = {nu} must exceed p - 1")));
    }
    let k = data.len() as f64;
    let psi = theta.inverse();
    let mut acc = Array2::<f64>::zeros((p, p));
    for d in data {
        let w = SpdMatrix::new(psi.entries() + d.scatter())?.inverse();
        acc += &(w.entries() * (d.n() as f64 + nu));
    }
    SpdMatrix::new(acc / (k * nu))
}

/// Iterates `em_step` at fixed nu until the log-likelihood increment drops
/// below `eps` or `max_iter` is hit (returns best-so-far, converged=false).
pub fn estimate_em(
    data: &[StudyData],
    nu: f64,
    theta0: &SpdMatrix,
    eps: f64,
    max_iter: usize,
) -> Result<FitResult> {
    let start = Instant::now();
    let p = data_dim(data)?;
    let mut theta = theta0.clone();
    let mut psi = theta.inverse();
    let mut ll = log_likelihood(&RcmParams::new(psi.clone(), nu)?, data)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        theta = em_step(&theta, data, nu)?;
        psi = theta.inverse();
        let next = log_likelihood(&RcmParams::new(psi.clone(), nu)?, data)?;
        iterations += 1;
        trace.push(next);
        let inc = next - ll;
        ll = next;
        if inc.abs() < eps {
            converged = true;
            break;
        }
    }
    let _ = p;
    Ok(FitResult {
        sigma_hat: FitResult::finish_sigma(&psi, nu),
        psi_hat: psi,
        nu_hat: nu,
        loglik_trace: trace,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        converged,
        estimator: EstimatorTag::Em,
        nu_saturated: false,
        warnings: Vec::new(),
    })
}

/// Approximate MLE from the first-order Neumann truncation of the score
/// equation: psi = sum_i (nu + n_i) S_i / n_total. The eigenvalue condition
/// behind the truncation is not verified; the estimator is approximate.
pub fn estimate_approx_mle(
    data: &[StudyData],
    nu: f64,
) -> Result<(SpdMatrix, Option<SpdMatrix>)> {
    let p = data_dim(data)?;
    if !(nu > p as f64 - 1.0) {
        return Err(RcmError::domain(format!(
            "estimate_approx_mle: nu = {nu} must exceed p - 1"
        )));
    }
    let n_total = total_n(data) as f64;
    let mut acc = Array2::<f64>::zeros((p, p));
    for d in data {
        acc += &(d.scatter() * (nu + d.n() as f64));
    }
    let psi = SpdMatrix::new(acc / n_total)?;
    let sigma = if nu > p as f64 + 1.0 {
        Some(SpdMatrix::new(psi.entries() / (nu - p as f64 - 1.0))?)
    } else {
        None
    };
    Ok((psi, sigma))
}

/// Result of the 1-D nu search.
#[derive(Debug, Clone, Copy)]
pub struct NuEstimate {
    pub nu: f64,
    /// True when the objective was still increasing at `NU_CAP`.
    pub saturated: bool,
}

/// Maximizes `profile_nu` by golden-section search on the log-nu scale.
/// Concavity of the profile guarantees the global optimum within the
/// bracket; the upper edge auto-expands by doubling up to `NU_CAP`.
pub fn maximize_nu(
    psi: &SpdMatrix,
    data: &[StudyData],
    bracket: (f64, f64),
) -> Result<NuEstimate> {
    let p = psi.dim() as f64;
    let (lo, mut hi) = bracket;
    if !(lo > p - 1.0 + NU_DOMAIN_DELTA) {
        return Err(RcmError::domain(format!(
            "maximize_nu: bracket low end {lo} must exceed p - 1 + {NU_DOMAIN_DELTA}"
        )));
    }
    if !(hi > lo) {
        return Err(RcmError::domain("maximize_nu: bracket must satisfy hi > lo"));
    }
    let f = |nu: f64| profile_nu(psi, data, nu);

    // Expand hi until the maximum is interior or the cap is hit.
    loop {
        let interior = (hi / 2.0).max((lo * hi).sqrt());
        if f(hi)? > f(interior)? {
            if hi >= NU_CAP {
                return Ok(NuEstimate { nu: NU_CAP, saturated: true });
            }
            hi = (hi * 4.0).min(NU_CAP);
        } else {
            break;
        }
    }

    // Golden section on u = ln nu to relative interval width 1e-6.
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut a = lo.ln();
    let mut b = hi.ln();
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c.exp())?;
    let mut fd = f(d.exp())?;
    while b - a > 1e-6 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d.exp())?;
        }
    }
    Ok(NuEstimate { nu: (0.5 * (a + b)).exp(), saturated: false })
}

/// Default initialization: nu0 = 2p + 2 and psi0 from the pooled moment.
/// A rank-deficient pooled matrix gets a small diagonal jitter.
pub fn default_init(data: &[StudyData]) -> Result<(RcmParams, Vec<String>)> {
    let p = data_dim(data)?;
    let nu0 = 2.0 * p as f64 + 2.0;
    let mut warnings = Vec::new();
    let n_total = total_n(data) as f64;
    let mut acc = Array2::<f64>::zeros((p, p));
    for d in data {
        acc += d.scatter();
    }
    acc /= n_total;
    let scaled = &acc * (nu0 - p as f64 - 1.0);
    let psi0 = match SpdMatrix::new(scaled.clone()) {
        Ok(m) => m,
        Err(RcmError::NotPositiveDefinite { .. }) => {
            let scale = scaled.diag().mean().unwrap_or(1.0).max(f64::MIN_POSITIVE);
            let mut jitter = 1e-8 * scale;
            // the likelihood also factors psi0 + S_i, so those must clear
            // the pivot tolerance as well
            let usable = |m: &SpdMatrix| {
                data.iter().all(|d| SpdMatrix::new(m.entries() + d.scatter()).is_ok())
            };
            let fixed = loop {
                match SpdMatrix::new(&scaled + &(Array2::<f64>::eye(p) * jitter)) {
                    Ok(m) if usable(&m) => break m,
                    Ok(_) | Err(RcmError::NotPositiveDefinite { .. }) if jitter < scale => {
                        jitter *= 10.0;
                    }
                    Ok(m) => break m,
                    Err(e) => return Err(e),
                }
            };
            warnings.push(format!(
                "pooled initialization is rank-deficient; added diagonal jitter {jitter:e}"
            ));
            fixed
        }
        Err(e) => return Err(e),
    };
    Ok((RcmParams::new(psi0, nu0)?, warnings))
}

fn default_bracket(p: usize) -> (f64, f64) {
    (p as f64 + 1.0 + 1e-3, 8.0 * (p as f64 + 2.0))
}

/// Coordinate ascent: alternates the Psi update selected by `cfg.inner`
/// with the nu maximization until the log-likelihood increment drops
/// below `cfg.eps`.
pub fn fit_rcm(data: &[StudyData], init: &RcmParams, cfg: &FitConfig) -> Result<FitResult> {
    let start = Instant::now();
    let p = data_dim(data)?;
    let mut warnings = Vec::new();
    if total_n(data) < p {
        warnings.push(format!(
            "total sample count {} is below p = {p}; the maximum may not be unique",
            total_n(data)
        ));
    }
    let bracket = cfg.nu_bracket.unwrap_or_else(|| default_bracket(p));

    let mut psi = init.psi.clone();
    let mut nu = init.nu;
    let mut ll = log_likelihood(&RcmParams::new(psi.clone(), nu)?, data)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut saturated = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        // with rank-deficient data the ascent can drive psi toward the
        // boundary of the positive definite cone; keep the last stable
        // iterate instead of failing
        let step = || -> Result<(SpdMatrix, NuEstimate, f64)> {
            let next_psi = match cfg.inner {
                EstimatorTag::Pooled => estimate_pooled(data, nu)?.0,
                EstimatorTag::ApproxMle => estimate_approx_mle(data, nu)?.0,
                EstimatorTag::Em => {
                    let theta0 = psi.inverse();
                    if cfg.inner_full {
                        estimate_em(data, nu, &theta0, cfg.inner_eps, cfg.inner_max_iter)?
                            .psi_hat
                    } else {
                        em_step(&theta0, data, nu)?.inverse()
                    }
                }
            };
            let est = maximize_nu(&next_psi, data, bracket)?;
            let next_ll =
                log_likelihood(&RcmParams::new(next_psi.clone(), est.nu)?, data)?;
            Ok((next_psi, est, next_ll))
        };
        let (next_psi, est, next) = match step() {
            Ok(v) => v,
            Err(RcmError::NotPositiveDefinite { .. }) => {
                warnings.push(
                    "stopped early: the update left the positive definite domain"
                        .to_string(),
                );
                break;
            }
            Err(e) => return Err(e),
        };
        psi = next_psi;
        nu = est.nu;
        saturated = est.saturated;
        iterations += 1;
        trace.push(next);
        let inc = next - ll;
        ll = next;
        if inc < cfg.eps {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        sigma_hat: FitResult::finish_sigma(&psi, nu),
        psi_hat: psi,
        nu_hat: nu,
        loglik_trace: trace,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        converged,
        estimator: cfg.inner,
        nu_saturated: saturated,
        warnings,
    })
}

/// `fit_rcm` with the default pooled-moment initialization.
pub fn fit_rcm_default(data: &[StudyData], cfg: &FitConfig) -> Result<FitResult> {
    let (init, warnings) = default_init(data)?;
    let mut res = fit_rcm(data, &init, cfg)?;
    res.warnings.splice(0..0, warnings);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{generate_rcm_dataset, rng_from_seed, sample_mvn};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn synth(seed: u64, p: usize, nu: f64, sizes: &[usize]) -> Vec<StudyData> {
        let psi = SpdMatrix::compound_symmetry(p, 1.0, 0.5).unwrap();
        let params = RcmParams::new(psi, nu).unwrap();
        generate_rcm_dataset(seed, &params, sizes)
            .unwrap()
            .studies
            .iter()
            .map(|x| StudyData::from_observations(x).unwrap())
            .collect()
    }

    #[test]
    fn pooled_identity_case() {
        let d = [StudyData::new(Array2::eye(2) * 6.0, 6).unwrap()];
        let (_, sigma) = estimate_pooled(&d, 5.0).unwrap();
        assert_abs_diff_eq!(sigma.entries()[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sigma.entries()[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pooled_two_scalar_studies() {
        let d = [
            StudyData::new(array![[2.0]], 1).unwrap(),
            StudyData::new(array![[4.0]], 1).unwrap(),
        ];
        let (psi, sigma) = estimate_pooled(&d, 4.0).unwrap();
        assert_abs_diff_eq!(sigma.entries()[(0, 0)], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(psi.entries()[(0, 0)], 6.0, epsilon = 1e-14);
    }

    #[test]
    fn pooled_moment_nonexistence() {
        let d = [StudyData::new(array![[1.0]], 1).unwrap()];
        assert!(estimate_pooled(&d, 2.0).is_err()); // nu = p + 1
    }

    #[test]
    fn em_step_k1_fixed_point() {
        let mut rng = rng_from_seed(5);
        let sigma = SpdMatrix::new(array![[1.0, 0.3], [0.3, 2.0]]).unwrap();
        let x = sample_mvn(&mut rng, 8, &sigma);
        let d = StudyData::from_observations(&x).unwrap();
        let nu = 6.0;
        // theta* = (n/nu) S^{-1}
        let s_inv = SpdMatrix::new(d.scatter().clone()).unwrap().inverse();
        let theta_star =
            SpdMatrix::new(s_inv.entries() * (d.n() as f64 / nu)).unwrap();
        let next = em_step(&theta_star, std::slice::from_ref(&d), nu).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    next.entries()[(i, j)],
                    theta_star.entries()[(i, j)],
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn em_step_zero_scatter_scales_theta() {
        let d = [
            StudyData::new(Array2::zeros((2, 2)), 3).unwrap(),
            StudyData::new(Array2::zeros((2, 2)), 5).unwrap(),
        ];
        let nu = 4.0;
        let theta = SpdMatrix::new(array![[2.0, 0.1], [0.1, 1.0]]).unwrap();
        let next = em_step(&theta, &d, nu).unwrap();
        let factor = (3.0 + 5.0 + 2.0 * nu) / (2.0 * nu);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    next.entries()[(i, j)],
                    factor * theta.entries()[(i, j)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn em_step_increases_likelihood_on_scenario_data() {
        let data = synth(21, 20, 30.0, &[7, 7, 7]);
        let nu = 30.0;
        let theta0 = SpdMatrix::identity(20);
        let ll0 =
            log_likelihood(&RcmParams::new(theta0.inverse(), nu).unwrap(), &data).unwrap();
        let theta1 = em_step(&theta0, &data, nu).unwrap();
        let ll1 =
            log_likelihood(&RcmParams::new(theta1.inverse(), nu).unwrap(), &data).unwrap();
        assert!(ll1 > ll0, "ll0 {ll0} ll1 {ll1}");
    }

    #[test]
    fn em_k1_scalar_converges_to_closed_form() {
        let d = [StudyData::new(array![[3.4]], 5).unwrap()];
        let nu = 4.0;
        let res = estimate_em(&d, nu, &SpdMatrix::identity(1), 1e-12, 5000).unwrap();
        let want = nu / 5.0 * 3.4;
        assert!(
            (res.psi_hat.entries()[(0, 0)] - want).abs() / want < 1e-6,
            "got {} want {want}",
            res.psi_hat.entries()[(0, 0)]
        );
    }

    #[test]
    fn em_trace_monotone() {
        let data = synth(33, 4, 12.0, &[6, 9, 5]);
        let res = estimate_em(&data, 9.0, &SpdMatrix::identity(4), 1e-9, 500).unwrap();
        for w in res.loglik_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-8, "trace decreased: {} -> {}", w[0], w[1]);
        }
        assert!(res.converged);
    }

    #[test]
    fn em_unique_limit_from_two_starts() {
        let data = synth(8, 3, 10.0, &[8, 8]);
        let nu = 8.0;
        let a = estimate_em(&data, nu, &SpdMatrix::identity(3), 1e-11, 5000).unwrap();
        let b = estimate_em(
            &data,
            nu,
            &SpdMatrix::from_diag(&[0.2, 5.0, 1.0]).unwrap(),
            1e-11,
            5000,
        )
        .unwrap();
        let diff = a.psi_hat.entries() - b.psi_hat.entries();
        let rel = diff.iter().map(|x| x * x).sum::<f64>().sqrt()
            / a.psi_hat.entries().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(rel < 1e-5, "relative distance {rel}");
    }

    #[test]
    fn approx_mle_k1() {
        let d = [StudyData::new(array![[2.0, 0.5], [0.5, 1.0]], 4).unwrap()];
        let nu = 6.0;
        let (psi, _) = estimate_approx_mle(&d, nu).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    psi.entries()[(i, j)],
                    (nu + 4.0) / 4.0 * d[0].scatter()[(i, j)],
                    epsilon = 1e-13
                );
            }
        }
    }

    #[test]
    fn approx_mle_equal_scatters_collapse() {
        // all S_i = n Sigma*, equal n_i = n -> psi = (nu + n) Sigma*
        let sigma_star = array![[1.0, 0.2], [0.2, 0.7]];
        let n = 5usize;
        let d: Vec<StudyData> = (0..3)
            .map(|_| StudyData::new(&sigma_star * n as f64, n).unwrap())
            .collect();
        let nu = 7.0;
        let (psi, _) = estimate_approx_mle(&d, nu).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(
                    psi.entries()[(i, j)],
                    (nu + n as f64) * sigma_star[(i, j)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn approx_mle_no_studies() {
        assert!(estimate_approx_mle(&[], 5.0).is_err());
    }

    #[test]
    fn maximize_nu_recovers_truth_roughly() {
        let p = 5;
        let psi = SpdMatrix::compound_symmetry(p, 1.0, 0.5).unwrap();
        let params = RcmParams::new(psi.clone(), 30.0).unwrap();
        let sizes = vec![50usize; 10];
        let ds = generate_rcm_dataset(77, &params, &sizes).unwrap();
        let data: Vec<StudyData> = ds
            .studies
            .iter()
            .map(|x| StudyData::from_observations(x).unwrap())
            .collect();
        let est = maximize_nu(&psi, &data, (p as f64 + 1.1, 100.0)).unwrap();
        assert!(!est.saturated);
        assert!((est.nu - 30.0).abs() / 30.0 < 0.25, "nu_hat {}", est.nu);
    }

    #[test]
    fn maximize_nu_saturates_on_zero_scatter() {
        // S_i = 0 makes the profile strictly increasing in nu, so the
        // search must run into the cap and flag it
        let p = 2;
        let psi = SpdMatrix::new(array![[1.0, 0.3], [0.3, 1.0]]).unwrap();
        let data: Vec<StudyData> =
            (0..3).map(|_| StudyData::new(Array2::zeros((p, p)), 5).unwrap()).collect();
        let est = maximize_nu(&psi, &data, (p as f64 + 1.1, 50.0)).unwrap();
        assert!(est.saturated);
        assert_eq!(est.nu, NU_CAP);
    }

    #[test]
    fn maximize_nu_bad_bracket() {
        let psi = SpdMatrix::identity(3);
        let d = [StudyData::new(Array2::eye(3) * 4.0, 4).unwrap()];
        assert!(maximize_nu(&psi, &d, (2.0, 10.0)).is_err()); // lo = p - 1
    }

    #[test]
    fn fit_rcm_immediate_stop_with_infinite_eps() {
        let data = synth(3, 3, 10.0, &[9, 9]);
        let (init, _) = default_init(&data).unwrap();
        let cfg = FitConfig { eps: f64::INFINITY, ..FitConfig::default() };
        let res = fit_rcm(&data, &init, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn fit_rcm_em_trace_nondecreasing() {
        // enough studies that nu is identifiable and the ascent terminates
        let data = synth(44, 5, 10.0, &[15; 6]);
        let res = fit_rcm_default(&data, &FitConfig::default()).unwrap();
        for w in res.loglik_trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-8);
        }
        assert!(res.converged);
    }

    #[test]
    fn fit_rcm_inits_agree() {
        let data = synth(55, 5, 10.0, &[20; 10]);
        let cfg = FitConfig { eps: 1e-9, ..FitConfig::default() };
        let inits = [
            default_init(&data).unwrap().0,
            RcmParams::new(SpdMatrix::identity(5), 12.0).unwrap(),
            RcmParams::new(
                SpdMatrix::compound_symmetry(5, 2.0, 0.1).unwrap(),
                40.0,
            )
            .unwrap(),
        ];
        let fits: Vec<FitResult> =
            inits.iter().map(|i| fit_rcm(&data, i, &cfg).unwrap()).collect();
        let norm =
            |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
        for f in &fits[1..] {
            let d = f.psi_hat.entries() - fits[0].psi_hat.entries();
            assert!(norm(&d) / norm(fits[0].psi_hat.entries()) < 1e-4);
            assert!((f.nu_hat - fits[0].nu_hat).abs() / fits[0].nu_hat < 1e-3);
        }
    }

    #[test]
    fn scale_equivariance() {
        let data = synth(66, 3, 12.0, &[20, 20]);
        let c = 3.0;
        let scaled: Vec<StudyData> = data
            .iter()
            .map(|d| StudyData::new(d.scatter() * (c * c), d.n()).unwrap())
            .collect();
        let cfg = FitConfig { eps: 1e-9, ..FitConfig::default() };
        let a = fit_rcm_default(&data, &cfg).unwrap();
        let b = fit_rcm_default(&scaled, &cfg).unwrap();
        assert!((a.nu_hat - b.nu_hat).abs() / a.nu_hat < 1e-3);
        for i in 0..3 {
            for j in 0..3 {
                let want = c * c * a.psi_hat.entries()[(i, j)];
                let got = b.psi_hat.entries()[(i, j)];
                assert!(
                    (got - want).abs() / want.abs().max(1e-6) < 1e-3,
                    "({i},{j}) got {got} want {want}"
                );
            }
        }
    }

    #[test]
    fn gradient_small_at_em_optimum() {
        let data = synth(70, 4, 14.0, &[12, 10, 14]);
        let cfg = FitConfig { eps: 1e-10, ..FitConfig::default() };
        let res = fit_rcm_default(&data, &cfg).unwrap();
        let params = RcmParams::new(res.psi_hat.clone(), res.nu_hat).unwrap();
        let g = crate::likelihood::grad_psi(&params, &data).unwrap();
        // gradient entries scale like k nu |psi^{-1}|
        let scale = data.len() as f64
            * res.nu_hat
            * res
                .psi_hat
                .inverse()
                .entries()
                .iter()
                .cloned()
                .fold(0.0_f64, |a, b| a.max(b.abs()));
        let gmax = g.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
        assert!(gmax < 1e-4 * scale, "gmax {gmax} scale {scale}");
    }
}
