//! Softmax, label-smoothed cross-entropy and CTC, each returning the loss
//! together with its gradient with respect to the logits.

use super::tensor::{log_softmax_into, Tensor};
use super::NnError;

/// Softmax along `axis` of a tensor of any rank.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NnError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NnError::DimMismatch(format!(
            "axis {axis} for rank {}",
            shape.len()
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                sum += e;
            }
            for j in 0..n {
                data[at(j)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Mean over non-pad rows of `−Σ_v q(v) log p(v)` with
/// `q = (1 − smoothing)·onehot(target) + smoothing / V`.
///
/// Returns the loss and `∂loss/∂logits`. With no scored rows the loss is 0.
pub fn label_smoothed_ce(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f64,
    pad_index: Option<usize>,
) -> Result<(f64, Tensor), NnError> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t {
        return Err(NnError::DimMismatch(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(NnError::IndexOutOfRange {
            index: bad,
            size: v,
        });
    }
    let scored = targets
        .iter()
        .filter(|&&y| Some(y) != pad_index)
        .count();
    let mut grad = Tensor::zeros(&[t, v]);
    if scored == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / scored as f64;
    let uniform = smoothing / v as f64;
    let mut logp = vec![0.0; v];
    let mut total = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        if Some(y) == pad_index {
            continue;
        }
        log_softmax_into(logits.row(r), &mut logp);
        let sum_logp: f64 = logp.iter().sum();
        total += -(1.0 - smoothing) * logp[y] - uniform * sum_logp;
        let g = grad.row_mut(r);
        for (gv, lp) in g.iter_mut().zip(&logp) {
            *gv = (lp.exp() - uniform) * norm;
        }
        g[y] -= (1.0 - smoothing) * norm;
    }
    Ok((total * norm, grad))
}

/// Negative log-likelihood of `target` under CTC with blank index 0.
///
/// `logits` is `T × (V+1)`; target labels are in `1..=V`. The gradient comes
/// from the log-space forward–backward trellis.
pub fn ctc_loss(logits: &Tensor, target: &[usize]) -> Result<(f64, Tensor), NnError> {
    let (t_len, v) = (logits.rows(), logits.cols());
    if let Some(&bad) = target.iter().find(|&&y| y == 0 || y >= v) {
        return Err(NnError::IndexOutOfRange {
            index: bad,
            size: v,
        });
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let required = target.len() + repeats;
    if t_len < required.max(1) {
        return Err(NnError::TargetTooLong {
            target_len: target.len(),
            required: required.max(1),
            frames: t_len,
        });
    }

    // extended label sequence: blank, l1, blank, l2, ..., blank
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { 0 } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && label(s) != 0 && label(s) != label(s - 2);

    let mut logp = vec![0.0; t_len * v];
    for t in 0..t_len {
        log_softmax_into(logits.row(t), &mut logp[t * v..(t + 1) * v]);
    }
    let lp = |t: usize, k: usize| logp[t * v + k];
    let ninf = f64::NEG_INFINITY;

    // alpha includes the emission at t; beta excludes it
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = acc + lp(t, label(s));
        }
    }
    let last = (t_len - 1) * s_len;
    let log_total = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_total.is_finite() {
        return Err(NnError::NonFiniteLoss(-log_total));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = beta[next + s] + lp(t + 1, label(s));
            if s + 1 < s_len {
                acc = lse2(acc, beta[next + s + 1] + lp(t + 1, label(s + 1)));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = lse2(acc, beta[next + s + 2] + lp(t + 1, label(s + 2)));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = Tensor::zeros(&[t_len, v]);
    for t in 0..t_len {
        let g = grad.row_mut(t);
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = lp(t, k).exp();
        }
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            if a > ninf {
                g[label(s)] -= (a - log_total).exp();
            }
        }
    }
    Ok((-log_total, grad))
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Greedy CTC collapse: argmax per frame, merge repeats, drop blanks.
pub fn ctc_greedy_collapse(argmax: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in argmax {
        if Some(a) != prev && a != 0 {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::from_vec(&[3], vec![0.0; 3]).unwrap(), 0).unwrap();
        for p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), 0).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((s.data()[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((s.data()[0] - 0.26894).abs() < 1e-5);
        assert!((s.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let x = random(4, 7, 1);
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += 13.25;
        }
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for r in 0..4 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let cols = softmax(&x, 0).unwrap();
        for c in 0..7 {
            let s: f64 = (0..4).map(|r| cols.get(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn ce_without_smoothing_is_plain_ce() {
        let x = random(5, 6, 2);
        let targets = [0, 5, 2, 2, 3];
        let (loss, _) = label_smoothed_ce(&x, &targets, 0.0, None).unwrap();
        let mut plain = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = x.row(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            plain += lse - row[y];
        }
        assert!((loss - plain / 5.0).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_logits_is_log_v() {
        let x = Tensor::filled(&[3, 9], 0.7);
        for s in [0.0, 0.1, 0.5] {
            let (loss, _) = label_smoothed_ce(&x, &[1, 8, 0], s, None).unwrap();
            assert!((loss - 9f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_two_class_closed_form() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let (loss, _) = label_smoothed_ce(&x, &[0], 0.1, None).unwrap();
        let expected = -(0.95 * 0.25f64.ln() + 0.05 * 0.75f64.ln());
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.331364).abs() < 1e-6);
    }

    #[test]
    fn ce_floor_at_smoothed_target() {
        // logits = log q attains the minimum, the entropy of q
        let v = 5;
        let s = 0.1;
        let hi = 1.0 - s + s / v as f64;
        let lo = s / v as f64;
        let mut data = vec![lo.ln(); 2 * v];
        data[3] = hi.ln();
        data[v + 1] = hi.ln();
        let x = Tensor::from_vec(&[2, v], data).unwrap();
        let (loss, grad) = label_smoothed_ce(&x, &[3, 1], s, None).unwrap();
        let floor = -(hi * hi.ln() + (v as f64 - 1.0) * lo * lo.ln());
        assert!((loss - floor).abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ce_skips_pad_and_checks_range() {
        let x = random(3, 4, 3);
        let (full, _) = label_smoothed_ce(&x.slice_rows(0, 2), &[1, 2], 0.1, Some(0)).unwrap();
        let (padded, g) = label_smoothed_ce(&x, &[1, 2, 0], 0.1, Some(0)).unwrap();
        assert!((full - padded).abs() < 1e-15);
        assert!(g.row(2).iter().all(|v| *v == 0.0));
        assert!(matches!(
            label_smoothed_ce(&x, &[1, 2, 4], 0.1, None),
            Err(NnError::IndexOutOfRange { index: 4, size: 4 })
        ));
    }

    #[test]
    fn ctc_single_frame() {
        let x = random(1, 3, 4);
        let (loss, _) = ctc_loss(&x, &[2]).unwrap();
        let p = softmax(&x, 1).unwrap();
        assert!((loss + p.get(0, 2).ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_enumeration() {
        let x = random(2, 2, 5);
        let p = softmax(&x, 1).unwrap();
        let (a, b) = (1, 0);
        let total = p.get(0, a) * p.get(1, a) + p.get(0, a) * p.get(1, b) + p.get(0, b) * p.get(1, a);
        let (loss, _) = ctc_loss(&x, &[1]).unwrap();
        assert!((loss + total.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_too_long() {
        let x = random(2, 3, 6);
        assert!(matches!(
            ctc_loss(&x, &[1, 2, 1]),
            Err(NnError::TargetTooLong { .. })
        ));
        // repeated label needs a separating blank
        assert!(matches!(
            ctc_loss(&x, &[1, 1]),
            Err(NnError::TargetTooLong { required: 3, .. })
        ));
        assert!(ctc_loss(&random(3, 3, 6), &[1, 1]).is_ok());
    }

    #[test]
    fn ctc_empty_target_is_all_blank() {
        let x = random(4, 3, 7);
        let p = softmax(&x, 1).unwrap();
        let (loss, _) = ctc_loss(&x, &[]).unwrap();
        let expected: f64 = (0..4).map(|t| p.get(t, 0).ln()).sum();
        assert!((loss + expected).abs() < 1e-12);
    }

    fn check_grad(f: impl Fn(&Tensor) -> (f64, Tensor), x: &Tensor) {
        let (_, g) = f(x);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut up = x.clone();
            up.data_mut()[i] += eps;
            let mut down = x.clone();
            down.data_mut()[i] -= eps;
            let num = (f(&up).0 - f(&down).0) / (2.0 * eps);
            assert!(
                (num - g.data()[i]).abs() < 1e-7,
                "coord {i}: numeric {num} analytic {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let x = random(6, 5, 8);
        check_grad(|x| ctc_loss(x, &[1, 3, 3]).unwrap(), &x);
        check_grad(|x| ctc_loss(x, &[4]).unwrap(), &x);
        check_grad(|x| label_smoothed_ce(x, &[0, 1, 2, 3, 4, 1], 0.1, Some(1)).unwrap(), &x);
    }

    #[test]
    fn greedy_collapse_rules() {
        assert!(ctc_greedy_collapse(&[0, 0, 0]).is_empty());
        assert_eq!(ctc_greedy_collapse(&[1, 1, 0, 2, 2]), vec![1, 2]);
        assert_eq!(ctc_greedy_collapse(&[1, 0, 1]), vec![1, 1]);
    }
}
