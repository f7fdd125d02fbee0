//! Decision threshold from a gamma fit to training-clip scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_THRESHOLD_SCORES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
    /// Subtracted from the scores before fitting and added back to quantiles.
    pub shift: f64,
}

impl GammaFit {
    pub fn quantile(&self, p: f64) -> f64 {
        gamma_quantile(self.shape, self.scale, p) - self.shift
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub percentile: f64,
    /// `None` when the scores were constant and the fallback was used.
    pub fit: Option<GammaFit>,
    pub degenerate: bool,
}

/// Strict rule: only scores above the threshold are anomalous.
pub fn classify(score: f64, threshold: f64) -> bool {
    score > threshold
}

/// Fits a two-parameter gamma distribution by maximum likelihood and
/// returns its `percentile` quantile.
///
/// The location is fixed at zero. Scores at or below zero are moved onto
/// the positive axis by a shift that is undone on the returned quantile.
/// Constant scores yield `value + ε` with `degenerate` set.
pub fn fit_threshold(scores: &[f64], percentile: f64) -> Result<Threshold> {
    if scores.len() < MIN_THRESHOLD_SCORES {
        return Err(Error::InvalidInput(format!(
            "threshold fitting needs at least {MIN_THRESHOLD_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical(
            "non-finite score in threshold fitting".into(),
        ));
    }
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Config(format!(
            "percentile {percentile} outside (0, 1)"
        )));
    }
    let (min, max) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    if max - min <= 1e-12 * max.abs().max(1e-300) {
        return Ok(Threshold {
            value: max + 1e-6 * max.abs().max(1.0),
            percentile,
            fit: None,
            degenerate: true,
        });
    }
    let shift = if min > 0.0 {
        0.0
    } else {
        -min + 1e-6 * (max - min)
    };
    let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
    let (shape, scale) = gamma_mle(&shifted)?;
    let fit = GammaFit {
        shape,
        scale,
        shift,
    };
    Ok(Threshold {
        value: fit.quantile(percentile),
        percentile,
        fit: Some(fit),
        degenerate: false,
    })
}

/// Maximum-likelihood `(shape, scale)` for strictly positive data.
pub fn gamma_mle(x: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mean_log = x.iter().map(|v| v.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numerical(format!(
            "gamma fit statistic {s} is not positive"
        )));
    }
    // Closed-form start, then Newton on ln k − ψ(k) = s.
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..100 {
        let f = k.ln() - digamma(k) - s;
        let df = 1.0 / k - trigamma(k);
        let next = k - f / df;
        let next = if next > 0.0 { next } else { k / 2.0 };
        let done = (next - k).abs() <= 1e-14 * k;
        k = next;
        if done {
            break;
        }
    }
    Ok((k, mean / k))
}

pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    acc + x.ln()
        - 0.5 / x
        - f * (1.0 / 12.0 - f * (1.0 / 120.0 - f * (1.0 / 252.0 - f * (1.0 / 240.0 - f / 132.0))))
}

pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let f = 1.0 / (x * x);
    acc + 1.0 / x + f / 2.0 + f / x * (1.0 / 6.0 - f * (1.0 / 30.0 - f * (1.0 / 42.0 - f / 30.0)))
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = C[1..]
        .iter()
        .enumerate()
        .fold(C[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let (mut term, mut sum, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (log_prefix.exp() * h)).max(0.0)
    }
}

/// Quantile of gamma(shape, scale): bisection bracket refined by Newton.
pub fn gamma_quantile(shape: f64, scale: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, shape.max(1.0));
    while gamma_p(shape, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = gamma_p(shape, x) - p;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let density = ((shape - 1.0) * x.ln() - x - ln_gamma(shape)).exp();
        let newton = x - f / density;
        x = if density > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    x * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_functions_known_values() {
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0) + euler).abs() < 1e-12);
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((gamma_p(1.0, 2.0) - (1.0 - (-2f64).exp())).abs() < 1e-14);
        assert!((gamma_p(1.0, 0.5) - (1.0 - (-0.5f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn exponential_quantile_closed_form() {
        // shape 1 is exponential: q = −scale·ln(1 − p)
        let q = gamma_quantile(1.0, 3.0, 0.9);
        assert!((q - (-3.0 * 0.1f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn constant_scores_fall_back() {
        let t = fit_threshold(&[2.5; 12], 0.9).unwrap();
        assert!(t.degenerate);
        assert!(t.value > 2.5);
        assert!(!classify(2.5, t.value));
    }

    #[test]
    fn needs_enough_scores() {
        assert!(fit_threshold(&[1.0, 2.0], 0.9).is_err());
        assert!(fit_threshold(&[f64::NAN; 10], 0.9).is_err());
    }

    #[test]
    fn classify_is_strict() {
        assert!(classify(1.0 + 1e-12, 1.0));
        assert!(!classify(1.0, 1.0));
    }
}
