use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Box-plot statistics with Tukey (1.5·IQR) whiskers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

fn interp(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

pub fn quantiles(v: &[f64]) -> Quantiles {
    assert!(!v.is_empty(), "quantiles of an empty sample");
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, q3) = (interp(&s, 0.25), interp(&s, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Quantiles {
        min: s[0],
        q1,
        median: interp(&s, 0.5),
        q3,
        max: s[s.len() - 1],
        whisker_lo: s.iter().copied().find(|&x| x >= lo_fence).unwrap_or(s[0]),
        whisker_hi: s.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(s[s.len() - 1]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided paired t-test of `a − b` against zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> TestResult {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    assert!(a.len() >= 2, "paired t-test needs two pairs");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let (mean, pop_sd) = mean_std(&d);
    let sd = pop_sd * (n / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid degrees of freedom");
    let p = if t.is_finite() {
        2.0 * (1.0 - dist.cdf(t.abs()))
    } else {
        0.0
    };
    TestResult { statistic: t, p_value: p }
}

/// Jarque–Bera normality test.
pub fn jarque_bera(x: &[f64]) -> TestResult {
    let n = x.len() as f64;
    let (mean, _) = mean_std(x);
    let m = |k: i32| x.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    let (m2, m3, m4) = (m(2), m(3), m(4));
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let jb = n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
    let chi = ChiSquared::new(2.0).expect("two degrees of freedom");
    TestResult {
        statistic: jb,
        p_value: 1.0 - chi.cdf(jb),
    }
}

/// Pooled two-proportion z-test of `k1/n1 > k2/n2`.
pub fn one_sided_proportion_test(k1: usize, n1: usize, k2: usize, n2: usize) -> TestResult {
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let z = if se > 0.0 {
        (p1 - p2) / se
    } else if p1 > p2 {
        f64::INFINITY
    } else {
        0.0
    };
    let normal = Normal::standard();
    TestResult {
        statistic: z,
        p_value: 1.0 - normal.cdf(z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_of_small_sample() {
        let q = quantiles(&[1.0, 2.0, 3.0, 4.0, 100.0]);
        assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
        assert_eq!(q.whisker_hi, 4.0);
        assert_eq!(q.max, 100.0);
    }

    #[test]
    fn t_test_reference_value() {
        // d = [1, 2, 3, 4]: mean 2.5, sd 1.29099, t = 3.87298, df 3.
        let r = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r.statistic - 3.872983346207417).abs() < 1e-9);
        assert!((r.p_value - 0.030466).abs() < 1e-4, "{}", r.p_value);
    }

    #[test]
    fn proportion_test_direction() {
        assert!(one_sided_proportion_test(40, 50, 10, 50).p_value < 0.001);
        assert!(one_sided_proportion_test(10, 50, 40, 50).p_value > 0.99);
    }
}
