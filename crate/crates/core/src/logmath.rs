/// Log-domain zero. Every DP in the crate uses this value as its sentinel and
/// [`log_add`] treats it as the additive identity.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// `ln(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}

/// `ln Σ exp(x_i)`; returns [`NEG_INF`] for an empty slice or all-`NEG_INF` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    let sum: f64 = xs.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_element() {
        assert_eq!(log_add(NEG_INF, -3.0), -3.0);
        assert_eq!(log_add(-3.0, NEG_INF), -3.0);
        assert_eq!(log_add(NEG_INF, NEG_INF), NEG_INF);
        assert_eq!(log_sum_exp(&[]), NEG_INF);
    }

    #[test]
    fn matches_direct_sum() {
        let a: f64 = -1.5;
        let b: f64 = -0.25;
        let direct = (a.exp() + b.exp()).ln();
        assert!((log_add(a, b) - direct).abs() < 1e-15);
        assert!((log_sum_exp(&[a, b, a]) - (2.0 * a.exp() + b.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn large_magnitudes_do_not_overflow() {
        assert!((log_add(1000.0, 1000.0) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_add(-1000.0, -1000.0) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
