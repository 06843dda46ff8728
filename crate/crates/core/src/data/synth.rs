use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBuilder, RatingDataset, RatingTriple, DEFAULT_MAX_SEQUENCE, MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};
use crate::rng;

/// Constant added to every synthetic dot product before clipping to `[0, 5]`.
pub const SYNTH_SHIFT: f64 = 2.5;

/// Multi-domain generator with known transfer structure.
///
/// Each user has a global latent `z`. In domain `d` the user's preference is
/// `w_d * A_d z + (1 - w_d) * xi_d` with `A_d` a random rotation and `xi_d`
/// independent standard normal noise, so `w_d` is how much domain `d` reveals
/// about `z`. Item latents are standard normal scaled by `1/sqrt(k*)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub users: usize,
    pub items_per_domain: usize,
    pub latent_dim: usize,
    pub informativeness: Vec<f64>,
    pub noise: f64,
    /// Fraction of a domain's items each user rates.
    pub density: f64,
    pub min_ratings_per_user: usize,
    pub max_sequence: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: 4,
            users: 500,
            items_per_domain: 200,
            latent_dim: 4,
            informativeness: vec![1.0, 0.0, 0.0, 1.0],
            noise: 0.1,
            density: 0.1,
            min_ratings_per_user: 5,
            max_sequence: DEFAULT_MAX_SEQUENCE,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Informativeness vector with one informative source among `n_sources`,
    /// followed by the (fully informative) target domain.
    pub fn one_informative(n_sources: usize, informative: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..n_sources).map(|d| if d == informative { 1.0 } else { 0.0 }).collect();
        w.push(1.0);
        w
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.latent_dim == 0 {
            return fail("latent dimension must be positive".into());
        }
        if self.domains < 2 {
            return fail(format!("need at least 2 domains, got {}", self.domains));
        }
        if self.informativeness.len() != self.domains {
            return fail(format!(
                "{} informativeness weights for {} domains",
                self.informativeness.len(),
                self.domains
            ));
        }
        if self.informativeness.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return fail("informativeness weights must lie in [0, 1]".into());
        }
        if self.users < 2 || self.items_per_domain == 0 {
            return fail("need at least 2 users and 1 item per domain".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be a non-negative number, got {}", self.noise));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return fail(format!("density must be in (0, 1], got {}", self.density));
        }
        Ok(())
    }

    /// Mean and variance of domain `d`'s ratings before clipping.
    pub fn rating_moments(&self, d: usize) -> (f64, f64) {
        let w = self.informativeness[d];
        (SYNTH_SHIFT, w * w + (1.0 - w) * (1.0 - w) + self.noise * self.noise)
    }

    pub fn ratings_per_user(&self) -> usize {
        let n = (self.density * self.items_per_domain as f64).round() as usize;
        n.max(self.min_ratings_per_user).clamp(1, self.items_per_domain)
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v = normal_vec(rng, k, 1.0);
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<RatingDataset> {
    spec.validate()?;
    let k = spec.latent_dim;
    let mut rng = rng::stream(spec.seed, "synthetic", 0);
    let z: Vec<Vec<f64>> = (0..spec.users).map(|_| normal_vec(&mut rng, k, 1.0)).collect();
    let item_scale = 1.0 / (k as f64).sqrt();
    let per_user = spec.ratings_per_user();

    let mut builder = DatasetBuilder::new()
        .domain_names((0..spec.domains).map(|d| format!("syn{d}")).collect())
        .user_order((0..spec.users).map(|u| format!("u{u}")).collect())
        .informativeness(Some(spec.informativeness.clone()))
        .max_sequence(spec.max_sequence);

    for d in 0..spec.domains {
        let w = spec.informativeness[d];
        let rotation = random_rotation(&mut rng, k);
        let items: Vec<Vec<f64>> = (0..spec.items_per_domain)
            .map(|_| normal_vec(&mut rng, k, item_scale))
            .collect();
        for (u, zu) in z.iter().enumerate() {
            let xi = normal_vec(&mut rng, k, 1.0);
            let pref: Vec<f64> = rotation
                .iter()
                .zip(&xi)
                .map(|(row, x)| {
                    let az: f64 = row.iter().zip(zu).map(|(a, b)| a * b).sum();
                    w * az + (1.0 - w) * x
                })
                .collect();
            for j in sample(&mut rng, spec.items_per_domain, per_user).into_iter() {
                let dot: f64 = pref.iter().zip(&items[j]).map(|(a, b)| a * b).sum();
                let eps: f64 = rng.sample(StandardNormal);
                let rating = (dot + SYNTH_SHIFT + spec.noise * eps).clamp(MIN_RATING, MAX_RATING);
                builder.push(RatingTriple {
                    user_id: format!("u{u}"),
                    item_id: format!("syn{d}-i{j}"),
                    rating,
                    domain: d,
                })?;
            }
        }
    }
    Ok(builder.build(None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_specs() {
        let mut s = SyntheticSpec {
            latent_dim: 0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic(&s), Err(Error::Spec(_))));
        s.latent_dim = 3;
        s.domains = 1;
        s.informativeness = vec![1.0];
        assert!(matches!(gen_synthetic(&s), Err(Error::Spec(_))));
    }

    #[test]
    fn deterministic_and_fully_overlapping() {
        let s = SyntheticSpec {
            users: 30,
            items_per_domain: 20,
            ..SyntheticSpec::default()
        };
        let a = gen_synthetic(&s).unwrap();
        assert_eq!(a, gen_synthetic(&s).unwrap());
        assert_eq!(a.overlap_users().len(), 30);
        assert_eq!(a.informativeness(), Some(&[1.0, 0.0, 0.0, 1.0][..]));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = random_rotation(&mut rng::stream(1, "t", 0), 5);
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = r[i].iter().zip(&r[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_informative_layout() {
        assert_eq!(SyntheticSpec::one_informative(3, 0), vec![1.0, 0.0, 0.0, 1.0]);
    }
}
