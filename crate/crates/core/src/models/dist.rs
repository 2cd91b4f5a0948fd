use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountFamily {
    Poisson,
    TruncatedPoisson,
    NegativeBinomial,
    Zip,
    /// Zero mass `pi` plus a zero-truncated Poisson, or a zero-truncated
    /// negative binomial when `r` is set.
    Hurdle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountParams {
    pub family: CountFamily,
    pub lambda: f64,
    pub pi: f64,
    pub r: Option<f64>,
}

impl CountParams {
    pub fn poisson(lambda: f64) -> Self {
        CountParams {
            family: CountFamily::Poisson,
            lambda,
            pi: 0.0,
            r: None,
        }
    }

    pub fn truncated_poisson(lambda: f64) -> Self {
        CountParams {
            family: CountFamily::TruncatedPoisson,
            ..Self::poisson(lambda)
        }
    }

    pub fn negative_binomial(mean: f64, size: f64) -> Self {
        CountParams {
            family: CountFamily::NegativeBinomial,
            r: Some(size),
            ..Self::poisson(mean)
        }
    }

    pub fn zip(pi: f64, lambda: f64) -> Self {
        CountParams {
            family: CountFamily::Zip,
            pi,
            ..Self::poisson(lambda)
        }
    }

    pub fn hurdle(pi: f64, lambda: f64, r: Option<f64>) -> Self {
        CountParams {
            family: CountFamily::Hurdle,
            lambda,
            pi,
            r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::InvalidParam(format!(
                "pi must be in [0,1], got {}",
                self.pi
            )));
        }
        if let Some(r) = self.r {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidParam(format!("r must be > 0, got {r}")));
            }
        }
        if self.family == CountFamily::NegativeBinomial && self.r.is_none() {
            return Err(Error::InvalidParam(
                "negative binomial needs a size r".into(),
            ));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self.family {
            CountFamily::Poisson | CountFamily::NegativeBinomial => self.lambda,
            CountFamily::TruncatedPoisson => truncated_poisson_mean(self.lambda),
            CountFamily::Zip => (1.0 - self.pi) * self.lambda,
            CountFamily::Hurdle => {
                (1.0 - self.pi)
                    * match self.r {
                        None => truncated_poisson_mean(self.lambda),
                        Some(r) => truncated_nb_mean(self.lambda, r),
                    }
            }
        }
    }

    pub fn pmf(&self, k: u64) -> Result<f64> {
        count_logpmf(self, k).map(f64::exp)
    }
}

pub fn poisson_logpmf(lambda: f64, k: u64) -> f64 {
    let kf = k as f64;
    if k == 0 {
        -lambda
    } else {
        kf * lambda.ln() - lambda - ln_gamma(kf + 1.0)
    }
}

pub fn nb_logpmf(mean: f64, r: f64, k: u64) -> f64 {
    let kf = k as f64;
    let base = ln_gamma(kf + r) - ln_gamma(r) - ln_gamma(kf + 1.0) + r * (r / (r + mean)).ln();
    if k == 0 {
        base
    } else {
        base + kf * (mean / (r + mean)).ln()
    }
}

/// ln(1 - e^{-lambda}) without cancellation for small lambda.
pub fn ln_one_minus_exp_neg(lambda: f64) -> f64 {
    (-(-lambda).exp_m1()).ln()
}

pub fn truncated_poisson_mean(lambda: f64) -> f64 {
    lambda / -(-lambda).exp_m1()
}

/// P(0) of a negative binomial with the given mean and size.
pub fn nb_zero_prob(mean: f64, r: f64) -> f64 {
    (r * (r / (r + mean)).ln()).exp()
}

pub fn truncated_nb_mean(mean: f64, r: f64) -> f64 {
    mean / (1.0 - nb_zero_prob(mean, r))
}

pub fn count_logpmf(params: &CountParams, k: u64) -> Result<f64> {
    params.validate()?;
    let CountParams {
        family,
        lambda,
        pi,
        r,
    } = *params;
    let truncated = |k: u64| match r {
        None => poisson_logpmf(lambda, k) - ln_one_minus_exp_neg(lambda),
        Some(r) => nb_logpmf(lambda, r, k) - (1.0 - nb_zero_prob(lambda, r)).ln(),
    };
    Ok(match family {
        CountFamily::Poisson => poisson_logpmf(lambda, k),
        CountFamily::NegativeBinomial => nb_logpmf(lambda, r.expect("validated"), k),
        CountFamily::TruncatedPoisson => {
            if k == 0 {
                return Err(Error::InvalidParam(
                    "truncated family has no mass at 0".into(),
                ));
            }
            poisson_logpmf(lambda, k) - ln_one_minus_exp_neg(lambda)
        }
        CountFamily::Zip => {
            if k == 0 {
                (pi + (1.0 - pi) * (-lambda).exp()).ln()
            } else {
                (1.0 - pi).ln() + poisson_logpmf(lambda, k)
            }
        }
        CountFamily::Hurdle => {
            if k == 0 {
                pi.ln()
            } else {
                (1.0 - pi).ln() + truncated(k)
            }
        }
    })
}

/// Smallest K past the mode with P(X > K) <= eps, from a geometric bound
/// on the ratio of consecutive pmf terms.
pub fn tail_bound(params: &CountParams, eps: f64) -> Result<u64> {
    params.validate()?;
    let lambda = params.lambda;
    let ratio_sup = |k: u64| -> f64 {
        let kf = k as f64;
        match params.r {
            None => lambda / (kf + 1.0),
            Some(r) => {
                let q = lambda / (r + lambda);
                if r >= 1.0 {
                    (kf + r) / (kf + 1.0) * q
                } else {
                    q
                }
            }
        }
    };
    let mut k = lambda.ceil() as u64 + 1;
    loop {
        let rho = ratio_sup(k);
        if rho < 1.0 {
            let pk = count_logpmf(params, k.max(1))?.exp();
            if pk * rho / (1.0 - rho) <= eps {
                return Ok(k);
            }
        }
        k = k + 1 + k / 16;
        if k > 1 << 40 {
            return Err(Error::Numeric("tail bound did not converge".into()));
        }
    }
}
