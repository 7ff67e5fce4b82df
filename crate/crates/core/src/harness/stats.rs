use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over `sqrt(n)`);
/// zero for fewer than two values.
pub fn stderr(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Median of `xs` (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZTest {
    pub z: f64,
    /// One-sided p-value for "first proportion is larger".
    pub p_greater: f64,
    pub p_two_sided: f64,
}

/// Pooled two-proportion z-test of `s1 / n1` against `s2 / n2`.
pub fn two_proportion_z(s1: u64, n1: u64, s2: u64, n2: u64) -> Result<ZTest> {
    if n1 == 0 || n2 == 0 || s1 > n1 || s2 > n2 {
        return Err(Error::invalid("two-proportion test needs 0 <= s <= n and n > 0"));
    }
    let p1 = s1 as f64 / n1 as f64;
    let p2 = s2 as f64 / n2 as f64;
    let pooled = (s1 + s2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let z = if se > 0.0 { (p1 - p2) / se } else { 0.0 };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(ZTest {
        z,
        p_greater: 1.0 - normal.cdf(z),
        p_two_sided: 2.0 * (1.0 - normal.cdf(z.abs())),
    })
}

/// Pearson chi-square goodness of fit of `observed` counts against the
/// category probabilities `expected`. Returns `(statistic, p-value)`.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected.len() || observed.len() < 2 {
        return Err(Error::invalid(
            "chi-square needs matching category lists of length >= 2",
        ));
    }
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (&o, &p) in observed.iter().zip(expected) {
        if p <= 0.0 {
            if o > 0 {
                return Ok((f64::INFINITY, 0.0));
            }
            continue;
        }
        let e = p * n as f64;
        stat += (o as f64 - e).powi(2) / e;
        dof += 1;
    }
    if dof < 2 {
        return Ok((0.0, 1.0));
    }
    let chi = ChiSquared::new((dof - 1) as f64).expect("positive dof");
    Ok((stat, 1.0 - chi.cdf(stat)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("linear fit needs at least two paired points"));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("linear fit needs distinct x values"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}
