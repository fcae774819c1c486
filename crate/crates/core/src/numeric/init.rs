use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// He/MSRA initialization: zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
pub fn msra_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    let std = msra_std(fan_in)?;
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn msra_std(fan_in: usize) -> Result<f64> {
    if fan_in == 0 {
        return Err(Error::invalid("msra_init needs fan_in >= 1"));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn std_for_fan_in_eight_is_half() {
        assert_eq!(msra_std(8).unwrap(), 0.5);
    }

    #[test]
    fn zero_fan_in_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(msra_init(&[2, 2], 0, &mut rng).is_err());
    }

    #[test]
    fn empirical_variance_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = msra_init(&[100_000], 50, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 0.04).abs() / 0.04 < 0.05, "variance {var}");
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = msra_init(&[7, 3], 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = msra_init(&[7, 3], 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
