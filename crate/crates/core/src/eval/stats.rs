use statrs::distribution::{ContinuousCDF, StudentsT};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p: f64,
    pub significant: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// One-sided two-sample Student's t-test with pooled variance.
pub fn ttest_mean_greater(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::SampleTooSmall {
            a: a.len(),
            b: b.len(),
        });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
    let diff = ma - mb;
    let t = if pooled > 0.0 {
        diff / (pooled * (1.0 / na + 1.0 / nb)).sqrt()
    } else if diff == 0.0 {
        return Err(EvalError::DegenerateSample);
    } else {
        diff.signum() * f64::INFINITY
    };
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 2");
    let p = if t.is_infinite() {
        if t > 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        dist.sf(t)
    };
    Ok(TTest {
        t,
        df,
        p,
        significant: p < alpha,
    })
}
