//! Synthetic corpus generation.
//!
//! Identities are random points on the unit sphere; frames are noisy copies
//! of their identity centroid. Degradation replaces a random subset of
//! dimensions of a frame with pure noise before normalization, so a degraded
//! frame still carries clean signal in its untouched dimensions. That is the
//! regime where per-dimension frame weights can recover information that a
//! single scalar weight per frame cannot.

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::types::{FeatureSet, FeatureVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_identities: usize,
    pub sets_per_identity: usize,
    pub frames_per_set_min: usize,
    pub frames_per_set_max: usize,
    /// Gaussian jitter around the identity centroid.
    pub intra_class_noise_sigma: f64,
    /// Fraction of frames that get degraded.
    pub degrade_fraction: f64,
    /// Fraction of dimensions corrupted within a degraded frame.
    pub corrupt_dims_fraction: f64,
    pub corrupt_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_identities: 10,
            sets_per_identity: 5,
            frames_per_set_min: 4,
            frames_per_set_max: 12,
            intra_class_noise_sigma: 0.1,
            degrade_fraction: 0.0,
            corrupt_dims_fraction: 0.0,
            corrupt_noise_sigma: 1.0,
            rng_seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_identities == 0 || self.sets_per_identity == 0 {
            return Err(Error::CountMismatch(
                "dim, num_identities and sets_per_identity must be >= 1".into(),
            ));
        }
        if self.frames_per_set_min == 0 || self.frames_per_set_min > self.frames_per_set_max {
            return Err(Error::CountMismatch("invalid frames_per_set range".into()));
        }
        for (name, v) in [
            ("degrade_fraction", self.degrade_fraction),
            ("corrupt_dims_fraction", self.corrupt_dims_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::CountMismatch(format!("{name} must be in [0, 1]")));
            }
        }
        if self.intra_class_noise_sigma < 0.0 || self.corrupt_noise_sigma < 0.0 {
            return Err(Error::CountMismatch("noise sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generated sets plus the hidden ground-truth centroids (for diagnostics).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub sets: Vec<FeatureSet>,
    pub dim: usize,
    /// C x M row-major.
    pub identity_centroids: Vec<f64>,
}

impl LabeledCorpus {
    pub fn num_identities(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.identity_centroids.len() / self.dim
        }
    }

    pub fn centroid(&self, identity: usize) -> &[f64] {
        &self.identity_centroids[identity * self.dim..(identity + 1) * self.dim]
    }

    /// Highest label + 1 over the contained sets.
    pub fn label_span(&self) -> u32 {
        self.sets.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }
}

fn unit_sphere_point(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    loop {
        let v = rng.gaussian_vec(dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<LabeledCorpus> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.rng_seed);
    let dim = cfg.dim;

    let mut centroids = Vec::with_capacity(cfg.num_identities * dim);
    for _ in 0..cfg.num_identities {
        centroids.extend(unit_sphere_point(&mut rng, dim));
    }

    let corrupt_dims = (cfg.corrupt_dims_fraction * dim as f64).round() as usize;
    let mut sets = Vec::with_capacity(cfg.num_identities * cfg.sets_per_identity);
    for identity in 0..cfg.num_identities {
        let centroid = &centroids[identity * dim..(identity + 1) * dim];
        for set_idx in 0..cfg.sets_per_identity {
            let frames_k = rng.next_in_range(cfg.frames_per_set_min, cfg.frames_per_set_max);
            let mut frames = Vec::with_capacity(frames_k);
            for _ in 0..frames_k {
                let mut raw: Vec<f64> = centroid
                    .iter()
                    .map(|&c| c + rng.next_gaussian() * cfg.intra_class_noise_sigma)
                    .collect();
                if rng.next_f64() < cfg.degrade_fraction && corrupt_dims > 0 {
                    for d in rng.sample_distinct(dim, corrupt_dims) {
                        raw[d] = rng.next_gaussian() * cfg.corrupt_noise_sigma;
                    }
                }
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= 1e-12 {
                    // all-zero draw; fall back to the centroid itself
                    raw = centroid.to_vec();
                } else {
                    for x in &mut raw {
                        *x /= norm;
                    }
                }
                frames.push(FeatureVector::new(raw)?);
            }
            sets.push(FeatureSet::new(
                frames,
                identity as u32,
                format!("id{identity:04}_set{set_idx:03}"),
            )?);
        }
    }
    Ok(LabeledCorpus {
        sets,
        dim,
        identity_centroids: centroids,
    })
}

/// Identity-disjoint k-fold partitions. Identities are chunked in sorted
/// label order; fold i's test partition holds its chunk, train holds the rest.
pub fn split(corpus: &LabeledCorpus, folds: usize) -> Result<Vec<(LabeledCorpus, LabeledCorpus)>> {
    let mut identities: Vec<u32> = corpus.sets.iter().map(|s| s.label).collect();
    identities.sort_unstable();
    identities.dedup();
    if folds < 2 || identities.len() < folds {
        return Err(Error::TooFewIdentities {
            needed: folds.max(2),
            have: identities.len(),
            folds,
        });
    }
    let n = identities.len();
    let mut partitions = Vec::with_capacity(folds);
    for fold in 0..folds {
        let lo = fold * n / folds;
        let hi = (fold + 1) * n / folds;
        let test_ids = &identities[lo..hi];
        let is_test = |label: u32| test_ids.binary_search(&label).is_ok();
        let pick = |want_test: bool| -> LabeledCorpus {
            LabeledCorpus {
                sets: corpus
                    .sets
                    .iter()
                    .filter(|s| is_test(s.label) == want_test)
                    .cloned()
                    .collect(),
                dim: corpus.dim,
                identity_centroids: corpus.identity_centroids.clone(),
            }
        };
        partitions.push((pick(false), pick(true)));
    }
    Ok(partitions)
}

/// Mean cosine similarity between frames of same-identity vs
/// different-identity sets, sampled over `pairs` random pairs each.
pub fn class_separation(
    corpus: &LabeledCorpus,
    pairs: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = SplitMix64::new(seed);
    let mut within = Vec::with_capacity(pairs);
    let mut between = Vec::with_capacity(pairs);
    let frames: Vec<(&FeatureVector, u32)> = corpus
        .sets
        .iter()
        .flat_map(|s| s.frames().iter().map(move |f| (f, s.label)))
        .collect();
    while within.len() < pairs || between.len() < pairs {
        let (a, la) = frames[rng.next_below(frames.len())];
        let (b, lb) = frames[rng.next_below(frames.len())];
        if std::ptr::eq(a, b) {
            continue;
        }
        let cos = a.dot(b).expect("same corpus dim");
        if la == lb && within.len() < pairs {
            within.push(cos);
        } else if la != lb && between.len() < pairs {
            between.push(cos);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&within), mean(&between))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_frames_equal_centroids() {
        let cfg = SynthConfig {
            dim: 8,
            num_identities: 3,
            sets_per_identity: 2,
            intra_class_noise_sigma: 0.0,
            degrade_fraction: 0.0,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        for s in &corpus.sets {
            let centroid = corpus.centroid(s.label as usize);
            for f in s.frames() {
                for (x, c) in f.values().iter().zip(centroid) {
                    assert!((x - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            degrade_fraction: 0.5,
            corrupt_dims_fraction: 0.5,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frames_are_unit_norm() {
        let cfg = SynthConfig {
            degrade_fraction: 0.3,
            corrupt_dims_fraction: 0.5,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        for s in &corpus.sets {
            for f in s.frames() {
                assert!((f.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clean_corpus_separates_classes() {
        let cfg = SynthConfig {
            dim: 32,
            num_identities: 20,
            sets_per_identity: 4,
            intra_class_noise_sigma: 0.1,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        let (within, between) = class_separation(&corpus, 1000, 99);
        // noise sigma 0.1 keeps within-class cosine near 1 while random
        // centroids are near-orthogonal; demand a wide margin
        assert!(
            within > between + 0.3,
            "within {within} between {between}"
        );
    }

    #[test]
    fn full_corruption_destroys_signal() {
        let cfg = SynthConfig {
            dim: 32,
            num_identities: 20,
            sets_per_identity: 4,
            intra_class_noise_sigma: 0.1,
            degrade_fraction: 1.0,
            corrupt_dims_fraction: 1.0,
            corrupt_noise_sigma: 5.0,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        let (within, between) = class_separation(&corpus, 1000, 99);
        // everything is noise: both similarities hover near zero; the
        // statistical spread of a 1000-pair mean at dim 32 is ~0.006
        assert!(
            (within - between).abs() < 0.03,
            "within {within} between {between}"
        );
    }

    #[test]
    fn degraded_frames_keep_clean_dimension_signal() {
        let cfg = SynthConfig {
            dim: 64,
            num_identities: 10,
            sets_per_identity: 5,
            intra_class_noise_sigma: 0.05,
            degrade_fraction: 1.0,
            corrupt_dims_fraction: 0.5,
            corrupt_noise_sigma: 1.0,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        // sign agreement with the centroid must beat the 50% chance rate:
        // half of the dims are untouched (agree strongly), half are noise
        let mut agree = 0usize;
        let mut total = 0usize;
        for s in &corpus.sets {
            let centroid = corpus.centroid(s.label as usize);
            for f in s.frames() {
                for (x, c) in f.values().iter().zip(centroid) {
                    if x.signum() == c.signum() {
                        agree += 1;
                    }
                    total += 1;
                }
            }
        }
        let rate = agree as f64 / total as f64;
        // 3-sigma above chance for this sample size is well under 0.55
        assert!(rate > 0.6, "sign agreement {rate}");
    }

    #[test]
    fn split_is_identity_disjoint_partition() {
        let cfg = SynthConfig {
            dim: 8,
            num_identities: 10,
            sets_per_identity: 2,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        let parts = split(&corpus, 5).unwrap();
        assert_eq!(parts.len(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for (train, test) in &parts {
            let train_ids: std::collections::BTreeSet<u32> =
                train.sets.iter().map(|s| s.label).collect();
            let test_ids: std::collections::BTreeSet<u32> =
                test.sets.iter().map(|s| s.label).collect();
            assert_eq!(test_ids.len(), 2);
            assert!(train_ids.is_disjoint(&test_ids));
            for id in test_ids {
                assert!(seen.insert(id), "identity {id} in two test folds");
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn leave_one_identity_out() {
        let cfg = SynthConfig {
            dim: 4,
            num_identities: 5,
            sets_per_identity: 2,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        let parts = split(&corpus, 5).unwrap();
        for (_, test) in &parts {
            let ids: std::collections::BTreeSet<u32> =
                test.sets.iter().map(|s| s.label).collect();
            assert_eq!(ids.len(), 1);
        }
    }

    #[test]
    fn split_rejects_too_few_identities() {
        let cfg = SynthConfig {
            dim: 4,
            num_identities: 3,
            sets_per_identity: 1,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        assert!(matches!(
            split(&corpus, 5),
            Err(Error::TooFewIdentities { .. })
        ));
    }
}
