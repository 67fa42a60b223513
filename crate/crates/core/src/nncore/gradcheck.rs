use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{Gradients, ParamId, ParamSet};
use super::NnError;

/// Denominator floor of the relative error: gradients that are exactly zero
/// by construction are then held to an absolute tolerance instead.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Which coordinates to probe with finite differences.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// Up to `per_param` random coordinates from every parameter tensor.
    Random { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares the analytic gradient of `objective` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
///
/// The error per coordinate is `|g_a − g_n| / max(|g_a|, |g_n|, 1e-6)`; the
/// maximum over checked coordinates is reported. Parameters are restored
/// before returning.
pub fn gradcheck<F>(
    params: &mut ParamSet,
    mut objective: F,
    eps: f64,
    selection: CoordSelection,
) -> Result<GradcheckReport, NnError>
where
    F: FnMut(&ParamSet) -> Result<(f64, Gradients), NnError>,
{
    let (base, analytic) = objective(params)?;
    if !base.is_finite() {
        return Err(NnError::NonFiniteLoss(base));
    }

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    let mut rng = match selection {
        CoordSelection::Random { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        CoordSelection::All => None,
    };
    for (pi, p) in params.iter().enumerate() {
        let n = p.value.len();
        match (selection, rng.as_mut()) {
            (CoordSelection::Random { per_param, .. }, Some(rng)) if per_param < n => {
                let mut picked = sample(rng, n, per_param).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|i| (ParamId(pi), i)));
            }
            _ => coords.extend((0..n).map(|i| (ParamId(pi), i))),
        }
    }

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (id, i) in coords {
        let orig = params.value(id).data()[i];
        params.get_mut(id).value.data_mut()[i] = orig + eps;
        let up = objective(params).map(|r| r.0);
        params.get_mut(id).value.data_mut()[i] = orig - eps;
        let down = objective(params).map(|r| r.0);
        params.get_mut(id).value.data_mut()[i] = orig;
        let (up, down) = (up?, down?);
        if !up.is_finite() || !down.is_finite() {
            return Err(NnError::NonFiniteLoss(if up.is_finite() { down } else { up }));
        }
        let numeric = (up - down) / (2.0 * eps);
        let ga = analytic.get(id).map_or(0.0, |g| g.data()[i]);
        let err = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(DENOM_FLOOR);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.get(id).name.clone(), i));
            report.worst_analytic = ga;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
