use rand::Rng;

use super::real::Real;

/// `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// `n` draws from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<T: Real>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = kaiming_bound(fan_in);
    (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect()
}
