use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::special;
use super::Scalar;

/// Binary-response link function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logit,
    Probit,
}

impl Link {
    /// Probability to linear-predictor scale.
    pub fn link<T: Scalar>(self, p: T) -> T {
        match self {
            Link::Logit => Float::ln(p) - Float::ln_1p(-p),
            Link::Probit => T::lit(special::norm_quantile(p.to_f64_lossy())),
        }
    }

    /// Linear predictor to probability scale.
    pub fn inverse<T: Scalar>(self, eta: T) -> T {
        match self {
            Link::Logit => {
                if eta >= T::zero() {
                    T::one() / (T::one() + Float::exp(-eta))
                } else {
                    let e = Float::exp(eta);
                    e / (T::one() + e)
                }
            }
            Link::Probit => T::lit(special::norm_cdf(eta.to_f64_lossy())),
        }
    }

    /// Derivative of the inverse link, dp/dη.
    pub fn inverse_deriv<T: Scalar>(self, eta: T) -> T {
        match self {
            Link::Logit => {
                let p = self.inverse(eta);
                p * (T::one() - p)
            }
            Link::Probit => T::lit(special::norm_pdf(eta.to_f64_lossy())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn inverse_of_link_is_identity(p in 1e-6f64..(1.0 - 1e-6)) {
            for link in [Link::Logit, Link::Probit] {
                let back: f64 = link.inverse(link.link(p));
                prop_assert!((back - p).abs() < 1e-12, "{link:?} p={p} back={back}");
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let p: f32 = Link::Logit.inverse(0.0f32);
        assert_eq!(p, 0.5);
        let q: f32 = Link::Probit.inverse(0.0f32);
        assert!((q - 0.5).abs() < 1e-7);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for link in [Link::Logit, Link::Probit] {
            for &x in &[-2.0f64, 0.0, 0.7, 3.0] {
                let h = 1e-6;
                let fd = (link.inverse(x + h) - link.inverse(x - h)) / (2.0 * h);
                assert!((fd - link.inverse_deriv(x)).abs() < 1e-8);
            }
        }
    }
}
