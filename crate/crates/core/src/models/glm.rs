use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::dist::{ln_one_minus_exp_neg, nb_zero_prob, truncated_nb_mean, truncated_poisson_mean};
use crate::error::{Error, Result};
use crate::features::{is_missing, FeatureMatrix};

const ETA_MIN: f64 = -30.0;
const ETA_MAX: f64 = 30.0;
/// Floor on log-link means.
const LN_MU_FLOOR: f64 = -18.420680743952367;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HurdleCount {
    Poisson,
    /// Same model as `Poisson`: the hurdle count part is always truncated.
    TruncatedPoisson,
    NegativeBinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionParams {
    /// EM iterations for ZIP.
    pub max_iter: usize,
    /// Convergence threshold on the per-row log-likelihood improvement.
    pub tol: f64,
    /// Newton steps per M-step.
    pub m_step_newton: usize,
    /// Step-size tolerance of stand-alone Newton fits.
    pub newton_tol: f64,
    pub ridge: f64,
    /// Ridge used when the logistic part separates.
    pub separation_ridge: f64,
    pub hurdle_count: HurdleCount,
    /// Adds ln(days_in_month / 30.4375) as an offset on the count part.
    pub exposure_offset: bool,
    /// Deterministic stride subsample when the training set is larger.
    pub max_rows: Option<usize>,
    pub zero_features: Option<Vec<String>>,
    pub count_features: Option<Vec<String>>,
}

impl Default for RegressionParams {
    fn default() -> Self {
        RegressionParams {
            max_iter: 200,
            tol: 1e-6,
            m_step_newton: 2,
            newton_tol: 1e-8,
            ridge: 1e-6,
            separation_ridge: 1.0,
            hurdle_count: HurdleCount::Poisson,
            exposure_offset: false,
            max_rows: None,
            zero_features: None,
            count_features: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmFamily {
    Zip,
    Hurdle,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlmDiagnostics {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub ridge_fallback: bool,
    pub poisson_fallback: bool,
    /// Log-likelihood after each optimizer iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModel {
    pub family: GlmFamily,
    pub hurdle_count: Option<HurdleCount>,
    pub zero_features: Vec<String>,
    pub count_features: Vec<String>,
    /// Logit-link coefficients on the zero probability, intercept first.
    pub zero_coef: Vec<f64>,
    /// Log-link coefficients on the count mean, intercept first.
    pub count_coef: Vec<f64>,
    /// Negative binomial size of the hurdle count part.
    pub r: Option<f64>,
    pub exposure_offset: bool,
    pub diagnostics: GlmDiagnostics,
}

fn sigmoid(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta.clamp(ETA_MIN, ETA_MAX)).exp())
}

fn design(x: &FeatureMatrix, names: &[String], rows: &[usize]) -> Result<DMatrix<f64>> {
    let cols = names
        .iter()
        .map(|n| x.require(n).map(|c| &c.values))
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::from_element(rows.len(), names.len() + 1, 1.0);
    for (j, col) in cols.iter().enumerate() {
        for (i, &r) in rows.iter().enumerate() {
            let v = col[r];
            if is_missing(v) {
                return Err(Error::InvalidParam(format!(
                    "missing value in regression input {}",
                    names[j]
                )));
            }
            m[(i, j + 1)] = v;
        }
    }
    Ok(m)
}

/// Per-row log-likelihood, first derivative and curvature weight on the
/// linear predictor.
type RowFn<'a> = dyn Fn(usize, f64) -> (f64, f64, f64) + 'a;

struct NewtonOutcome {
    ll: f64,
    iterations: usize,
    converged: bool,
}

fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>, offset: Option<&[f64]>) -> DVector<f64> {
    let mut eta = x * beta;
    if let Some(o) = offset {
        for (e, o) in eta.iter_mut().zip(o) {
            *e += o;
        }
    }
    eta
}

fn penalized_ll(
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    offset: Option<&[f64]>,
    row: &RowFn,
    ridge: f64,
) -> f64 {
    let eta = linear_predictor(x, beta, offset);
    let ll: f64 = eta.iter().enumerate().map(|(i, &e)| row(i, e).0).sum();
    ll - 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

/// Damped Newton ascent with step halving; the intercept is unpenalized.
fn newton(
    x: &DMatrix<f64>,
    offset: Option<&[f64]>,
    beta: &mut DVector<f64>,
    row: &RowFn,
    ridge: f64,
    max_iter: usize,
    tol: f64,
) -> Result<NewtonOutcome> {
    let (n, p) = x.shape();
    let mut ll = penalized_ll(x, beta, offset, row, ridge);
    let mut xs = DMatrix::zeros(n, p);
    for it in 0..max_iter {
        let eta = linear_predictor(x, beta, offset);
        let mut d1 = DVector::zeros(n);
        let mut sw = vec![0.0; n];
        for i in 0..n {
            let (_, g, w) = row(i, eta[i]);
            d1[i] = g;
            sw[i] = w.max(0.0).sqrt();
        }
        let mut grad = x.tr_mul(&d1);
        for j in 1..p {
            grad[j] -= ridge * beta[j];
        }
        for j in 0..p {
            for i in 0..n {
                xs[(i, j)] = x[(i, j)] * sw[i];
            }
        }
        let mut h = xs.transpose() * &xs;
        for j in 1..p {
            h[(j, j)] += ridge;
        }
        let mut damping = 1e-10 * (1.0 + h.diagonal().amax());
        let step = loop {
            let mut hd = h.clone();
            for j in 0..p {
                hd[(j, j)] += damping;
            }
            if let Some(ch) = hd.cholesky() {
                break ch.solve(&grad);
            }
            damping *= 100.0;
            if !damping.is_finite() || damping > 1e12 {
                return Err(Error::Numeric(
                    "Newton system is not positive definite".into(),
                ));
            }
        };
        let mut s = 1.0;
        let mut accepted = false;
        while s > 1e-12 {
            let cand = &*beta + &step * s;
            let ll_new = penalized_ll(x, &cand, offset, row, ridge);
            if ll_new.is_finite() && ll_new >= ll {
                let gain = ll_new - ll;
                *beta = cand;
                ll = ll_new;
                accepted = true;
                if (step.amax() * s) < tol || gain <= 1e-13 * (1.0 + ll.abs()) {
                    return Ok(NewtonOutcome {
                        ll,
                        iterations: it + 1,
                        converged: true,
                    });
                }
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            return Ok(NewtonOutcome {
                ll,
                iterations: it + 1,
                converged: grad.amax() < 1e-6 * (1.0 + n as f64),
            });
        }
    }
    Ok(NewtonOutcome {
        ll,
        iterations: max_iter,
        converged: false,
    })
}

fn logistic_row<'a>(z: &'a [f64]) -> impl Fn(usize, f64) -> (f64, f64, f64) + 'a {
    move |i, eta| {
        let e = eta.clamp(ETA_MIN, ETA_MAX);
        let s = sigmoid(e);
        // ln(1 + e^e) computed stably
        let softplus = if e > 0.0 {
            e + (-e).exp().ln_1p()
        } else {
            e.exp().ln_1p()
        };
        (z[i] * e - softplus, z[i] - s, s * (1.0 - s))
    }
}

fn poisson_row<'a>(y: &'a [f64], weight: &'a [f64]) -> impl Fn(usize, f64) -> (f64, f64, f64) + 'a {
    move |i, eta| {
        let e = eta.clamp(LN_MU_FLOOR, ETA_MAX);
        let mu = e.exp();
        let a = weight[i];
        (a * (y[i] * e - mu), a * (y[i] - mu), a * mu)
    }
}

fn truncated_poisson_row<'a>(y: &'a [f64]) -> impl Fn(usize, f64) -> (f64, f64, f64) + 'a {
    move |i, eta| {
        let e = eta.clamp(LN_MU_FLOOR, ETA_MAX);
        let lam = e.exp();
        let m = truncated_poisson_mean(lam);
        let dm = if lam < 1e-4 {
            0.5 + lam / 6.0
        } else {
            let q = -(-lam).exp_m1();
            (q - lam * (-lam).exp()) / (q * q)
        };
        (
            y[i] * e - lam - ln_one_minus_exp_neg(lam),
            y[i] - m,
            lam * dm,
        )
    }
}

fn truncated_nb_row<'a>(y: &'a [f64], r: f64) -> impl Fn(usize, f64) -> (f64, f64, f64) + 'a {
    move |i, eta| {
        let e = eta.clamp(LN_MU_FLOOR, ETA_MAX);
        let mu = e.exp();
        let yi = y[i];
        let p0 = nb_zero_prob(mu, r);
        let ll = ln_gamma(yi + r) - ln_gamma(r) - ln_gamma(yi + 1.0)
            + r * (r / (r + mu)).ln()
            + yi * (mu / (r + mu)).ln()
            - (-p0).ln_1p();
        let a = r * mu / (r + mu);
        let q = p0 / (1.0 - p0);
        let g = r * (yi - mu) / (r + mu) - q * a;
        let h = r * mu * (r + yi) / (r + mu).powi(2) - q * (1.0 + q) * a * a
            + q * r * r * mu / (r + mu).powi(2);
        (ll, g, h)
    }
}

fn poisson_lnfact(y: &[f64]) -> f64 {
    y.iter().map(|&v| ln_gamma(v + 1.0)).sum()
}

fn resolve_features(x: &FeatureMatrix, subset: &Option<Vec<String>>) -> Result<Vec<String>> {
    match subset {
        Some(names) => {
            for n in names {
                x.require(n)?;
            }
            Ok(names.clone())
        }
        None => Ok(x.column_names().into_iter().map(String::from).collect()),
    }
}

fn stride_rows(rows: &[usize], max_rows: Option<usize>) -> Vec<usize> {
    match max_rows {
        Some(m) if m > 0 && rows.len() > m => (0..m).map(|k| rows[k * rows.len() / m]).collect(),
        _ => rows.to_vec(),
    }
}

fn check_targets(rows: &[usize], y: &[f64], offset: Option<&[f64]>) -> Result<()> {
    if rows.len() != y.len() {
        return Err(Error::InvalidParam(format!(
            "{} rows but {} targets",
            rows.len(),
            y.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidParam("no training rows".into()));
    }
    if y.iter().any(|&v| !(v >= 0.0) || v.fract() != 0.0) {
        return Err(Error::InvalidParam(
            "count targets must be non-negative integers".into(),
        ));
    }
    if offset.is_some_and(|o| o.len() != y.len()) {
        return Err(Error::InvalidParam("offset length mismatch".into()));
    }
    Ok(())
}

/// ZIP log-likelihood of the given linear predictors.
fn zip_ll(y: &[f64], eta_zero: &DVector<f64>, eta_count: &DVector<f64>, lnfact: f64) -> f64 {
    let mut ll = -lnfact;
    for i in 0..y.len() {
        let pi = sigmoid(eta_zero[i]);
        let e = eta_count[i].clamp(LN_MU_FLOOR, ETA_MAX);
        let lam = e.exp();
        ll += if y[i] == 0.0 {
            (pi + (1.0 - pi) * (-lam).exp()).ln()
        } else {
            (1.0 - pi).ln() + y[i] * e - lam
        };
    }
    ll
}

/// Zero-inflated Poisson regression by EM. `rows` select training rows of
/// the complete design `x`; `y` and `offset` align with `rows`.
pub fn fit_zip(
    x: &FeatureMatrix,
    rows: &[usize],
    y: &[f64],
    offset: Option<&[f64]>,
    params: &RegressionParams,
) -> Result<GlmModel> {
    check_targets(rows, y, offset)?;
    let keep = stride_rows(&(0..rows.len()).collect::<Vec<_>>(), params.max_rows);
    let sub_rows: Vec<usize> = keep.iter().map(|&k| rows[k]).collect();
    let y: Vec<f64> = keep.iter().map(|&k| y[k]).collect();
    let offset: Option<Vec<f64>> = offset.map(|o| keep.iter().map(|&k| o[k]).collect());
    let off = offset.as_deref();
    let n = y.len();

    let zero_features = resolve_features(x, &params.zero_features)?;
    let count_features = resolve_features(x, &params.count_features)?;
    let xz = design(x, &zero_features, &sub_rows)?;
    let xc = design(x, &count_features, &sub_rows)?;
    let lnfact = poisson_lnfact(&y);

    let ones = vec![1.0; n];
    let mut beta = DVector::zeros(xc.ncols());
    beta[0] = (crate::stats::mean(&y).max(1e-8)).ln();
    newton(
        &xc,
        off,
        &mut beta,
        &poisson_row(&y, &ones),
        params.ridge,
        25,
        1e-6,
    )?;

    let eta_c = linear_predictor(&xc, &beta, off);
    let p0_obs = y.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    let p0_pois: f64 = eta_c
        .iter()
        .map(|e| (-e.clamp(LN_MU_FLOOR, ETA_MAX).exp()).exp())
        .sum::<f64>()
        / n as f64;
    let pi0 = ((p0_obs - p0_pois) / (1.0 - p0_pois)).clamp(0.01, 0.9);
    let mut gamma = DVector::zeros(xz.ncols());
    gamma[0] = (pi0 / (1.0 - pi0)).ln();

    let mut diag = GlmDiagnostics::default();
    let mut ridge_z = params.ridge;
    let mut ll = zip_ll(&y, &(&xz * &gamma), &eta_c, lnfact);
    diag.history.push(ll);
    for it in 0..params.max_iter {
        let eta_z = &xz * &gamma;
        let eta_c = linear_predictor(&xc, &beta, off);
        let z: Vec<f64> = (0..n)
            .map(|i| {
                if y[i] > 0.0 {
                    return 0.0;
                }
                let pi = sigmoid(eta_z[i]);
                let p_pois = (-(eta_c[i].clamp(LN_MU_FLOOR, ETA_MAX).exp())).exp();
                pi / (pi + (1.0 - pi) * p_pois)
            })
            .collect();
        let w: Vec<f64> = z.iter().map(|v| 1.0 - v).collect();

        let gamma_prev = gamma.clone();
        let out = newton(
            &xz,
            None,
            &mut gamma,
            &logistic_row(&z),
            ridge_z,
            params.m_step_newton,
            1e-10,
        );
        let separated = out.is_err() || gamma.iter().skip(1).any(|g| g.abs() > ETA_MAX);
        if separated && ridge_z < params.separation_ridge {
            log::warn!(
                "zero part separates; refitting with ridge {}",
                params.separation_ridge
            );
            diag.ridge_fallback = true;
            ridge_z = params.separation_ridge;
            gamma = gamma_prev;
            newton(
                &xz,
                None,
                &mut gamma,
                &logistic_row(&z),
                ridge_z,
                params.m_step_newton,
                1e-10,
            )?;
        }
        newton(
            &xc,
            off,
            &mut beta,
            &poisson_row(&y, &w),
            params.ridge,
            params.m_step_newton,
            1e-10,
        )?;

        let ll_new = zip_ll(
            &y,
            &(&xz * &gamma),
            &linear_predictor(&xc, &beta, off),
            lnfact,
        );
        diag.history.push(ll_new);
        diag.iterations = it + 1;
        let gain = ll_new - ll;
        ll = ll_new;
        if gain.abs() / (n as f64) < params.tol {
            diag.converged = true;
            break;
        }
    }
    if !diag.converged {
        log::warn!(
            "ZIP EM stopped after {} iterations without converging",
            diag.iterations
        );
    }
    diag.log_likelihood = ll;
    Ok(GlmModel {
        family: GlmFamily::Zip,
        hurdle_count: None,
        zero_features,
        count_features,
        zero_coef: gamma.iter().copied().collect(),
        count_coef: beta.iter().copied().collect(),
        r: None,
        exposure_offset: params.exposure_offset,
        diagnostics: diag,
    })
}

/// Two-part hurdle regression: logistic on the zero indicator and a
/// zero-truncated count regression on the positive rows.
pub fn fit_hurdle(
    x: &FeatureMatrix,
    rows: &[usize],
    y: &[f64],
    offset: Option<&[f64]>,
    params: &RegressionParams,
) -> Result<GlmModel> {
    check_targets(rows, y, offset)?;
    let keep = stride_rows(&(0..rows.len()).collect::<Vec<_>>(), params.max_rows);
    let sub_rows: Vec<usize> = keep.iter().map(|&k| rows[k]).collect();
    let y: Vec<f64> = keep.iter().map(|&k| y[k]).collect();
    let offset: Option<Vec<f64>> = offset.map(|o| keep.iter().map(|&k| o[k]).collect());

    let zero_features = resolve_features(x, &params.zero_features)?;
    let count_features = resolve_features(x, &params.count_features)?;
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.0).collect();
    if pos.is_empty() {
        return Err(Error::Numeric(
            "hurdle count part undefined: no positive targets".into(),
        ));
    }
    let mut diag = GlmDiagnostics::default();

    let xz = design(x, &zero_features, &sub_rows)?;
    let zi: Vec<f64> = y
        .iter()
        .map(|&v| if v == 0.0 { 1.0 } else { 0.0 })
        .collect();
    let mut gamma = DVector::zeros(xz.ncols());
    let frac = crate::stats::mean(&zi).clamp(1e-6, 1.0 - 1e-6);
    gamma[0] = (frac / (1.0 - frac)).ln();
    let mut zero_fit = newton(
        &xz,
        None,
        &mut gamma,
        &logistic_row(&zi),
        params.ridge,
        100,
        params.newton_tol,
    );
    if zero_fit.is_err() || gamma.iter().skip(1).any(|g| g.abs() > ETA_MAX) {
        log::warn!(
            "zero part separates; refitting with ridge {}",
            params.separation_ridge
        );
        diag.ridge_fallback = true;
        gamma = DVector::zeros(xz.ncols());
        gamma[0] = (frac / (1.0 - frac)).ln();
        zero_fit = newton(
            &xz,
            None,
            &mut gamma,
            &logistic_row(&zi),
            params.separation_ridge,
            100,
            params.newton_tol,
        );
    }
    let zero_fit = zero_fit?;

    let pos_rows: Vec<usize> = pos.iter().map(|&i| sub_rows[i]).collect();
    let yp: Vec<f64> = pos.iter().map(|&i| y[i]).collect();
    let offp: Option<Vec<f64>> = offset.as_ref().map(|o| pos.iter().map(|&i| o[i]).collect());
    let xc = design(x, &count_features, &pos_rows)?;
    let mut beta = DVector::zeros(xc.ncols());
    beta[0] = (crate::stats::mean(&yp) - 1.0).max(0.05).ln();
    let fit_tp = |beta: &mut DVector<f64>| {
        newton(
            &xc,
            offp.as_deref(),
            beta,
            &truncated_poisson_row(&yp),
            params.ridge,
            100,
            params.newton_tol,
        )
    };
    let mut count_fit = fit_tp(&mut beta)?;
    let mut count_ll = count_fit.ll - poisson_lnfact(&yp);
    let mut r_hat = None;
    if params.hurdle_count == HurdleCount::NegativeBinomial {
        let start = beta.clone();
        let profile = |log_r: f64| -> Result<(f64, DVector<f64>, NewtonOutcome)> {
            let mut b = start.clone();
            let out = newton(
                &xc,
                offp.as_deref(),
                &mut b,
                &truncated_nb_row(&yp, log_r.exp()),
                params.ridge,
                100,
                params.newton_tol,
            )?;
            Ok((out.ll, b, out))
        };
        let (lo, hi) = (1e-3f64.ln(), 1e6f64.ln());
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (profile(c)?.0, profile(d)?.0);
        while b - a > 1e-4 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = profile(c)?.0;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = profile(d)?.0;
            }
        }
        let log_r = 0.5 * (a + b);
        if log_r > hi - 0.5 {
            log::warn!("negative binomial size diverges; falling back to Poisson");
            diag.poisson_fallback = true;
        } else {
            let (ll, b, out) = profile(log_r)?;
            if ll > count_ll {
                beta = b;
                count_ll = ll;
                count_fit = out;
                r_hat = Some(log_r.exp());
            } else {
                diag.poisson_fallback = true;
            }
        }
    }
    diag.iterations = zero_fit.iterations + count_fit.iterations;
    diag.converged = zero_fit.converged && count_fit.converged;
    diag.log_likelihood = zero_fit.ll + count_ll;
    diag.history.push(diag.log_likelihood);
    Ok(GlmModel {
        family: GlmFamily::Hurdle,
        hurdle_count: Some(params.hurdle_count),
        zero_features,
        count_features,
        zero_coef: gamma.iter().copied().collect(),
        count_coef: beta.iter().copied().collect(),
        r: r_hat,
        exposure_offset: params.exposure_offset,
        diagnostics: diag,
    })
}

impl GlmModel {
    fn linear(coef: &[f64], i: usize, cols: &[&Vec<f64>]) -> f64 {
        coef[0]
            + cols
                .iter()
                .zip(&coef[1..])
                .map(|(c, b)| b * c[i])
                .sum::<f64>()
    }

    /// Per-row (pi, lambda) on a complete design; `offset` aligns with rows.
    pub fn predict_params(
        &self,
        x: &FeatureMatrix,
        offset: Option<&[f64]>,
    ) -> Result<Vec<(f64, f64)>> {
        let zc = self
            .zero_features
            .iter()
            .map(|n| x.require(n).map(|c| &c.values))
            .collect::<Result<Vec<_>>>()?;
        let cc = self
            .count_features
            .iter()
            .map(|n| x.require(n).map(|c| &c.values))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..x.n_rows())
            .map(|i| {
                let pi = sigmoid(Self::linear(&self.zero_coef, i, &zc));
                let eta = Self::linear(&self.count_coef, i, &cc) + offset.map_or(0.0, |o| o[i]);
                (pi, eta.clamp(LN_MU_FLOOR, ETA_MAX).exp())
            })
            .collect())
    }

    pub fn predict_mean(&self, x: &FeatureMatrix, offset: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self
            .predict_params(x, offset)?
            .into_iter()
            .map(|(pi, lam)| match self.family {
                GlmFamily::Zip => (1.0 - pi) * lam,
                GlmFamily::Hurdle => {
                    (1.0 - pi)
                        * match self.r {
                            Some(r) => truncated_nb_mean(lam, r),
                            None => truncated_poisson_mean(lam),
                        }
                }
            })
            .collect())
    }
}
