//! Standard normal helpers shared by the ensemble, the link and the metrics.

use libm::erfc;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, switching to the asymptotic tail series far below zero where
/// `erfc` underflows.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        let c = norm_cdf(x);
        if x > 5.0 {
            // Φ close to one: ln(1 - Φ(-x)) keeps the tiny deficit.
            (-norm_cdf(-x)).ln_1p()
        } else {
            c.ln()
        }
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * LN_2PI + series.ln()
    }
}

/// `d/dx ln Φ(x) = φ(x) / Φ(x)`.
pub fn dlog_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        (-0.5 * x * x - 0.5 * LN_2PI - log_norm_cdf(x)).exp()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_var(xs).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        let c1 = norm_cdf(1.0);
        assert!((c1 - 0.841_344_746_068_542_9).abs() < 1e-14, "{c1:e}");
        assert!((norm_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-14);
    }

    #[test]
    fn log_cdf_is_continuous_across_the_tail_switch() {
        let a = log_norm_cdf(-30.0 + 1e-9);
        let b = log_norm_cdf(-30.0 - 1e-9);
        assert!((a - b).abs() / a.abs() < 1e-8, "{a} vs {b}");
        assert!(log_norm_cdf(-200.0).is_finite());
        assert!(log_norm_cdf(40.0) <= 0.0 && log_norm_cdf(40.0) > -1e-300);
    }

    #[test]
    fn inverse_mills_matches_finite_difference() {
        for &x in &[-35.0, -10.0, -1.0, 0.0, 2.0, 8.0] {
            let h = 1e-5;
            let fd = (log_norm_cdf(x + h) - log_norm_cdf(x - h)) / (2.0 * h);
            assert!((fd - dlog_norm_cdf(x)).abs() < 1e-5 * (1.0 + fd.abs()), "x={x}");
        }
    }
}
