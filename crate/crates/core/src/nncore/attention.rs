//! Scaled dot-product multi-head attention kernels (projections live outside).

use super::tensor::{gemm, Tensor};
use super::NnError;

pub(crate) struct AttnShape {
    pub tq: usize,
    pub tk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

pub(crate) fn check_shapes(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<AttnShape, NnError> {
    let dim = q.cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(NnError::DimMismatch(format!(
            "model dim {dim} not divisible by {heads} heads"
        )));
    }
    if k.cols() != dim || v.cols() != dim || k.rows() != v.rows() {
        return Err(NnError::DimMismatch(format!(
            "attention q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(AttnShape {
        tq: q.rows(),
        tk: k.rows(),
        dim,
        heads,
    })
}

/// Multi-head attention over already-projected `q`, `k`, `v` (each `T×dim`).
///
/// With `causal`, query `i` sees keys `j ≤ i + (tk − tq)`. `key_padding[j] ==
/// true` hides key `j`; a query that sees no key gets a zero output row.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
    key_padding: Option<&[bool]>,
) -> Result<Tensor, NnError> {
    let shape = check_shapes(q, k, v, heads)?;
    if let Some(mask) = key_padding {
        if mask.len() != shape.tk {
            return Err(NnError::DimMismatch("key padding mask length".into()));
        }
    }
    Ok(forward(q, k, v, &shape, causal, key_padding).0)
}

/// Returns the output and the attention probabilities (`heads × tq × tk`).
pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    s: &AttnShape,
    causal: bool,
    key_padding: Option<&[bool]>,
) -> (Tensor, Vec<f64>) {
    let (tq, tk, d) = (s.tq, s.tk, s.dim);
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[tq, d]);
    let mut probs = vec![0.0; s.heads * tq * tk];
    let offset = tk as isize - tq as isize;

    for h in 0..s.heads {
        let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        let c0 = h * dh;
        gemm(
            tq,
            dh,
            tk,
            scale,
            (&q.data()[c0..], d as isize, 1),
            (&k.data()[c0..], 1, d as isize),
            0.0,
            (p, tk as isize, 1),
        );
        for i in 0..tq {
            let row = &mut p[i * tk..(i + 1) * tk];
            let mut max = f64::NEG_INFINITY;
            for (j, x) in row.iter_mut().enumerate() {
                let hidden = (causal && j as isize > i as isize + offset)
                    || key_padding.is_some_and(|m| m[j]);
                if hidden {
                    *x = f64::NEG_INFINITY;
                } else if *x > max {
                    max = *x;
                }
            }
            if max == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        gemm(
            tq,
            tk,
            dh,
            1.0,
            (p, tk as isize, 1),
            (&v.data()[c0..], d as isize, 1),
            0.0,
            (&mut out.data_mut()[c0..], d as isize, 1),
        );
    }
    (out, probs)
}

/// Gradients with respect to `q`, `k`, `v` given the saved probabilities.
pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    s: &AttnShape,
    probs: &[f64],
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (tq, tk, d) = (s.tq, s.tk, s.dim);
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[tq, d]);
    let mut dk = Tensor::zeros(&[tk, d]);
    let mut dv = Tensor::zeros(&[tk, d]);
    let mut dp = vec![0.0; tq * tk];

    for h in 0..s.heads {
        let p = &probs[h * tq * tk..(h + 1) * tq * tk];
        let c0 = h * dh;
        // dV_h = Pᵀ · dO_h
        gemm(
            tk,
            tq,
            dh,
            1.0,
            (p, 1, tk as isize),
            (&dout.data()[c0..], d as isize, 1),
            0.0,
            (&mut dv.data_mut()[c0..], d as isize, 1),
        );
        // dP = dO_h · V_hᵀ
        gemm(
            tq,
            dh,
            tk,
            1.0,
            (&dout.data()[c0..], d as isize, 1),
            (&v.data()[c0..], 1, d as isize),
            0.0,
            (&mut dp, tk as isize, 1),
        );
        // softmax backward, folded with the score scale
        for i in 0..tq {
            let prow = &p[i * tk..(i + 1) * tk];
            let drow = &mut dp[i * tk..(i + 1) * tk];
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in drow.iter_mut().zip(prow) {
                *g = pv * (*g - dot) * scale;
            }
        }
        // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
        gemm(
            tq,
            tk,
            dh,
            1.0,
            (&dp, tk as isize, 1),
            (&k.data()[c0..], d as isize, 1),
            0.0,
            (&mut dq.data_mut()[c0..], d as isize, 1),
        );
        gemm(
            tk,
            tq,
            dh,
            1.0,
            (&dp, 1, tk as isize),
            (&q.data()[c0..], d as isize, 1),
            0.0,
            (&mut dk.data_mut()[c0..], d as isize, 1),
        );
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(1, 8, &mut rng);
        let k = random(1, 8, &mut rng);
        let v = random(1, 8, &mut rng);
        let out = multi_head_attention(&q, &k, &v, 1, false, None).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::zeros(&[3, 4]);
        let k = random(5, 4, &mut rng);
        let v = random(5, 4, &mut rng);
        let out = multi_head_attention(&q, &k, &v, 2, false, None).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let mean: f64 = (0..5).map(|j| v.get(j, c)).sum::<f64>() / 5.0;
                assert!((out.get(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(6, 8, &mut rng);
        let k = random(6, 8, &mut rng);
        let v = random(6, 8, &mut rng);
        let base = multi_head_attention(&q, &k, &v, 2, true, None).unwrap();
        for j in 0..6 {
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            for c in 0..8 {
                k2.row_mut(j)[c] += 3.0;
                v2.row_mut(j)[c] -= 2.0;
            }
            let out = multi_head_attention(&q, &k2, &v2, 2, true, None).unwrap();
            for i in 0..j {
                assert_eq!(out.row(i), base.row(i), "row {i} changed by key {j}");
            }
            assert_ne!(out.row(j), base.row(j));
        }
    }

    #[test]
    fn padding_mask_hides_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(2, 4, &mut rng);
        let k = random(3, 4, &mut rng);
        let v = random(3, 4, &mut rng);
        let masked =
            multi_head_attention(&q, &k, &v, 1, false, Some(&[false, false, true])).unwrap();
        let short = multi_head_attention(&q, &k.slice_rows(0, 2), &v.slice_rows(0, 2), 1, false, None)
            .unwrap();
        for (a, b) in masked.data().iter().zip(short.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let t = Tensor::zeros(&[2, 6]);
        assert!(matches!(
            multi_head_attention(&t, &t, &t, 4, false, None),
            Err(NnError::DimMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(3, 4, &mut rng);
        let k = random(4, 4, &mut rng);
        let v = random(4, 4, &mut rng);
        let w = random(3, 4, &mut rng);
        let shape = check_shapes(&q, &k, &v, 2).unwrap();
        let objective = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let (o, _) = forward(q, k, v, &shape, true, None);
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, probs) = forward(&q, &k, &v, &shape, true, None);
        let (dq, dk, dv) = backward(&q, &k, &v, &shape, &probs, &w);
        let eps = 1e-6;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            for idx in 0..grad.len() {
                let mut ts = [q.clone(), k.clone(), v.clone()];
                ts[which].data_mut()[idx] += eps;
                let up = objective(&ts[0], &ts[1], &ts[2]);
                ts[which].data_mut()[idx] -= 2.0 * eps;
                let down = objective(&ts[0], &ts[1], &ts[2]);
                let numeric = (up - down) / (2.0 * eps);
                assert!((numeric - grad.data()[idx]).abs() < 1e-8);
            }
        }
    }
}
