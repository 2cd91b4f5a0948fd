use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::error::{Error, Result};

fn check_power(p: f64) -> Result<()> {
    if p > 1.0 && p < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!(
            "tweedie power must be in (1,2), got {p}"
        )))
    }
}

/// Unit deviance for 1 < p < 2.
pub fn tweedie_deviance(y: f64, mu: f64, p: f64) -> Result<f64> {
    check_power(p)?;
    if !(mu > 0.0) {
        return Err(Error::InvalidParam(format!(
            "tweedie mean must be > 0, got {mu}"
        )));
    }
    if y < 0.0 {
        return Err(Error::InvalidParam(format!(
            "tweedie response must be >= 0, got {y}"
        )));
    }
    let a = if y > 0.0 {
        y.powf(2.0 - p) / ((1.0 - p) * (2.0 - p))
    } else {
        0.0
    };
    let d = 2.0 * (a - y * mu.powf(1.0 - p) / (1.0 - p) + mu.powf(2.0 - p) / (2.0 - p));
    Ok(d.max(0.0))
}

/// Negative log-likelihood kernel on the log-link score `f`.
pub fn tweedie_loss(y: f64, f: f64, p: f64) -> f64 {
    -y * ((1.0 - p) * f).exp() / (1.0 - p) + ((2.0 - p) * f).exp() / (2.0 - p)
}

pub fn tweedie_grad_hess(y: f64, f: f64, p: f64) -> (f64, f64) {
    let a = ((1.0 - p) * f).exp();
    let b = ((2.0 - p) * f).exp();
    (-y * a + b, -(1.0 - p) * y * a + (2.0 - p) * b)
}

/// One compound Poisson-gamma draw. The gamma sum over `n` jumps is drawn
/// as a single gamma with `n` times the shape.
pub fn draw_tweedie<R: rand::Rng + ?Sized>(rng: &mut R, mu: f64, phi: f64, p: f64) -> f64 {
    let rate = mu.powf(2.0 - p) / (phi * (2.0 - p));
    if !(rate > 0.0 && rate.is_finite()) {
        return 0.0;
    }
    if rate > 1e15 {
        return mu;
    }
    let n = Poisson::new(rate).expect("positive rate").sample(rng);
    if n == 0.0 {
        return 0.0;
    }
    let shape = (2.0 - p) / (p - 1.0);
    let scale = phi * (p - 1.0) * mu.powf(p - 1.0);
    Gamma::new(n * shape, scale)
        .expect("positive shape")
        .sample(rng)
}

pub fn simulate_tweedie(mu: f64, phi: f64, p: f64, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
    check_power(p)?;
    if !(mu >= 0.0 && phi > 0.0) {
        return Err(Error::InvalidParam(format!(
            "need mu >= 0 and phi > 0, got {mu}, {phi}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_draws)
        .map(|_| draw_tweedie(&mut rng, mu, phi, p))
        .collect())
}

/// Pearson estimate of the dispersion: sum (y - mu)^2 / mu^p over n - k.
pub fn pearson_dispersion(y: &[f64], mu: &[f64], p: f64, n_params: usize) -> f64 {
    let s: f64 = y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let m = m.max(1e-8);
            (y - m).powi(2) / m.powf(p)
        })
        .sum();
    s / (y.len().saturating_sub(n_params).max(1)) as f64
}
