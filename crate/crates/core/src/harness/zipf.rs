use rand::Rng;
use rand_distr::{Distribution, Zipf};

use super::HarnessError;

/// Ranges up to this size sample from a precomputed cumulative table.
pub const TABLE_LIMIT: u64 = 1 << 24;

enum Method {
    Uniform,
    Table(Vec<f64>),
    Rejection(Zipf<f64>),
}

/// Draws keys in `1..=r` with `P(i)` proportional to `1 / i^alpha`.
pub struct ZipfSampler {
    r: u64,
    alpha: f64,
    method: Method,
}

impl ZipfSampler {
    pub fn new(r: u64, alpha: f64) -> Result<Self, HarnessError> {
        if r == 0 {
            return Err(HarnessError::InvalidSpec("key range must be positive".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!("alpha must be a finite number >= 0, got {alpha}")));
        }
        let method = if alpha == 0.0 {
            Method::Uniform
        } else if r <= TABLE_LIMIT {
            let mut cdf = Vec::with_capacity(r as usize);
            let mut acc = 0.0;
            for i in 1..=r {
                acc += (i as f64).powf(-alpha);
                cdf.push(acc);
            }
            for c in &mut cdf {
                *c /= acc;
            }
            Method::Table(cdf)
        } else {
            Method::Rejection(Zipf::new(r as f64, alpha).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?)
        };
        Ok(ZipfSampler { r, alpha, method })
    }

    pub fn range(&self) -> u64 {
        self.r
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.method {
            Method::Uniform => rng.random_range(1..=self.r),
            Method::Table(cdf) => {
                let u: f64 = rng.random();
                (cdf.partition_point(|&c| c <= u) as u64 + 1).min(self.r)
            }
            Method::Rejection(z) => (z.sample(rng) as u64).clamp(1, self.r),
        }
    }

    /// Analytic probability of key `i`.
    pub fn probability(&self, i: u64) -> f64 {
        if i == 0 || i > self.r {
            return 0.0;
        }
        match &self.method {
            Method::Uniform => 1.0 / self.r as f64,
            Method::Table(cdf) => {
                let i = i as usize - 1;
                cdf[i] - if i == 0 { 0.0 } else { cdf[i - 1] }
            }
            Method::Rejection(_) => {
                let h: f64 = (1..=self.r).map(|k| (k as f64).powf(-self.alpha)).sum();
                (i as f64).powf(-self.alpha) / h
            }
        }
    }
}

impl std::fmt::Debug for ZipfSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let method = match self.method {
            Method::Uniform => "uniform",
            Method::Table(_) => "table",
            Method::Rejection(_) => "rejection",
        };
        f.debug_struct("ZipfSampler")
            .field("r", &self.r)
            .field("alpha", &self.alpha)
            .field("method", &method)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key() {
        let z = ZipfSampler::new(1, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| z.sample(&mut rng) == 1));
        assert_eq!(z.probability(1), 1.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        for (r, a) in [(3, 1.0), (1000, 0.75), (17, 0.0)] {
            let z = ZipfSampler::new(r, a).unwrap();
            let s: f64 = (1..=r).map(|i| z.probability(i)).sum();
            assert!((s - 1.0).abs() < 1e-12, "{r} {a} {s}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ZipfSampler::new(10, -1.0).is_err());
        assert!(ZipfSampler::new(10, f64::NAN).is_err());
        assert!(ZipfSampler::new(0, 1.0).is_err());
    }

    #[test]
    fn large_range_stays_in_bounds() {
        let z = ZipfSampler::new(TABLE_LIMIT * 4, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ones = 0;
        for _ in 0..10_000 {
            let k = z.sample(&mut rng);
            assert!((1..=TABLE_LIMIT * 4).contains(&k));
            ones += (k == 1) as u32;
        }
        assert!(ones > 300, "{ones}");
    }
}
