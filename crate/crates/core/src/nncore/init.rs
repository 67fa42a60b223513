use rand::Rng;

use super::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// Sinusoidal absolute position table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    let half = dim / 2;
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let angle = pos as f64 * freq;
            row[i] = angle.sin();
            row[half + i] = angle.cos();
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = xavier_uniform(&[10, 20], 10, 20, &mut rng);
        let b = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn positions_start_with_sin0_cos0() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.row(0), &[0.0, 0.0, 1.0, 1.0]);
    }
}
