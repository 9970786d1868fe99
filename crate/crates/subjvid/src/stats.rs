//! Paired sign test.

use statrs::distribution::{Binomial, DiscreteCDF};

#[derive(Debug, Clone, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided exact p-value for "a > b"; ties are dropped.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "sign test needs paired samples");
    let (wins, losses) = subjvid_core::metrics::sign_test_counts(a, b);
    let ties = a.len() - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if wins == 0 {
        1.0
    } else {
        // P(X >= wins) = 1 - P(X <= wins - 1)
        Binomial::new(0.5, n).expect("valid binomial").sf(wins as u64 - 1)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}
