//! Small summary statistics and tests used by the evaluation code.

use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sample_sd(xs) / (xs.len() as f64).sqrt()
}

/// Pearson correlation. Returns 0 when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// One-sided Welch t-test of `mean(a) > mean(b)`. Returns (t, p).
pub fn welch_greater(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sample_sd(a).powi(2) / na;
    let vb = sample_sd(b).powi(2) / nb;
    let se = (va + vb).sqrt();
    let diff = mean(a) - mean(b);
    if se == 0.0 {
        let p = if diff > 0.0 { 0.0 } else { 1.0 };
        return (diff.signum() * f64::INFINITY, p);
    }
    let t = diff / se;
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    (t, 1.0 - dist.cdf(t))
}

/// One-sided binomial test: P(X >= successes) under `Binomial(trials, p0)`.
pub fn binomial_upper_p(successes: u64, trials: u64, p0: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    let dist = Binomial::new(p0, trials).expect("valid binomial");
    dist.sf(successes - 1)
}
