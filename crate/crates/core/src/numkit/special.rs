use std::f64::consts::{LN_2, PI};

use thiserror::Error;

/// Below this |c| the Pólya–Gamma mean uses its Taylor expansion.
pub const PG_TAYLOR_SWITCH: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{function} is undefined at x = {value}")]
pub struct DomainError {
    pub function: &'static str,
    pub value: f64,
}

/// Logistic function, evaluated on the branch that never overflows.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` without cancellation for large |z|.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Exponent of the Pólya–Gamma representation of the sigmoid:
/// `σ(z) = E_{ω~PG(1,0)}[exp(f(ω, z))]`.
#[inline]
pub fn pg_f(omega: f64, z: f64) -> f64 {
    z / 2.0 - z * z / 2.0 * omega - LN_2
}

/// Mean of PG(b, c): `b/(2c)·tanh(c/2)`, continuous at `c = 0` with limit `b/4`.
#[inline]
pub fn pg_mean(b: f64, c: f64) -> f64 {
    let c = c.abs();
    if c < PG_TAYLOR_SWITCH {
        b / 4.0 - b * c * c / 48.0
    } else {
        b / (2.0 * c) * (c / 2.0).tanh()
    }
}

/// Digamma via upward recurrence to x ≥ 6 and the asymptotic series.
pub fn digamma(x: f64) -> Result<f64, DomainError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(DomainError { function: "digamma", value: x });
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Bernoulli terms B_2k / (2k x^2k), k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 / x - series)
}

/// ln Γ(x) via upward shift to x ≥ 10 and Stirling's series.
pub fn log_gamma(x: f64) -> Result<f64, DomainError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(DomainError { function: "log_gamma", value: x });
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < 10.0 {
        shift += x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0))));
    Ok((x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + series - shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.7) + sigmoid(-3.7) - 1.0).abs() < 1e-15);
        // 1/(1+e^-2) from a 30-digit evaluation
        assert!((sigmoid(2.0) - 0.880797077977882444059729141302).abs() < 1e-12);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((log_sigmoid(1.3) - sigmoid(1.3).ln()).abs() < 1e-14);
    }

    #[test]
    fn pg_f_values() {
        assert!((pg_f(0.0, 0.0) + LN_2).abs() < 1e-15);
        assert!((pg_f(17.0, 0.0) + LN_2).abs() < 1e-15);
        assert!((pg_f(0.25, 2.0) - (1.0 - 0.5 - LN_2)).abs() < 1e-15);
    }

    #[test]
    fn pg_mean_limits_and_symmetry() {
        assert_eq!(pg_mean(1.0, 0.0), 0.25);
        assert_eq!(pg_mean(1.0, 2.0), pg_mean(1.0, -2.0));
        let below = pg_mean(1.0, PG_TAYLOR_SWITCH * (1.0 - 1e-9));
        let above = pg_mean(1.0, PG_TAYLOR_SWITCH * (1.0 + 1e-9));
        assert!((below - above).abs() < 1e-10);
        assert!((pg_mean(1.0, 2.0) - (1.0f64).tanh() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn digamma_values() {
        let x = 3.5;
        assert!((digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x).abs() < 1e-10);
        // Euler–Mascheroni constant
        assert!((digamma(1.0).unwrap() + 0.577215664901532860606512090082).abs() < 1e-9);
        // ψ(2) − ln 3 from a 30-digit evaluation
        assert!((digamma(2.0).unwrap() - 3f64.ln() + 0.675827953569642552001757327005).abs() < 1e-10);
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.0).is_err());
    }

    #[test]
    fn log_gamma_values() {
        assert!((log_gamma(5.0).unwrap() - 24f64.ln()).abs() < 1e-12);
        assert!((log_gamma(0.5).unwrap() - 0.5 * PI.ln()).abs() < 1e-12);
        assert!((log_gamma(1.0).unwrap()).abs() < 1e-13);
        assert!(log_gamma(0.0).is_err());
    }

    proptest! {
        #[test]
        fn pg_mean_times_two_c_is_tanh(log_c in -6.0f64..3.0) {
            let c = 10f64.powf(log_c);
            let lhs = pg_mean(1.0, c) * 2.0 * c;
            prop_assert!((lhs - (c / 2.0).tanh()).abs() <= 1e-10 * (c / 2.0).tanh().max(1e-300) + 1e-16);
        }

        #[test]
        fn sigmoid_is_monotone(a in -50.0f64..50.0, d in 1e-6f64..10.0) {
            prop_assert!(sigmoid(a + d) >= sigmoid(a));
        }
    }
}
