//! Image-score prompts and the strategies that pick them from a training
//! split.

use std::sync::Arc;

use rand::seq::index;

use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::registry::{Named, Registry};
use crate::rng;

/// One image-score pair of a prompt.
#[derive(Clone, Debug)]
pub struct PromptPair {
    pub id: String,
    pub image: Arc<Image>,
    pub score: f64,
}

/// An ordered sequence of image-score pairs encoding one assessment
/// requirement.
#[derive(Clone, Debug)]
pub struct Ispp {
    pub pairs: Vec<PromptPair>,
    pub source_dataset: String,
    /// Name of the sampler that produced the pairs.
    pub strategy: String,
}

impl Ispp {
    /// Builds a prompt from normalized samples; every score must lie in
    /// `[0, 1]`.
    pub fn from_samples(
        samples: &[Sample],
        indices: &[usize],
        source_dataset: &str,
        strategy: &str,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let pairs = indices
            .iter()
            .map(|&i| {
                let s = &samples[i];
                if !(0.0..=1.0).contains(&s.norm_score) {
                    return Err(Error::Config(format!(
                        "prompt sample `{}` has score {} outside [0, 1]; normalize first",
                        s.id, s.norm_score
                    )));
                }
                Ok(PromptPair {
                    id: s.id.clone(),
                    image: s.image.clone(),
                    score: s.norm_score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pairs,
            source_dataset: source_dataset.to_string(),
            strategy: strategy.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.score).collect()
    }

    pub fn with_scores(&self, scores: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, s) in out.pairs.iter_mut().zip(scores) {
            p.score = *s;
        }
        out
    }
}

/// A rule for choosing `n` prompt pairs out of a scored training split.
pub trait IsppSampler: Named + Send + Sync {
    /// Indices into `scores` (and the parallel `ids`, used for tie breaks)
    /// of the chosen pairs, in prompt order.
    fn select(&self, scores: &[f64], ids: &[&str], n: usize, seed: u64) -> Result<Vec<usize>>;

    fn sample(&self, train: &[Sample], n: usize, seed: u64, source_dataset: &str) -> Result<Ispp> {
        let scores: Vec<f64> = train.iter().map(|s| s.norm_score).collect();
        let ids: Vec<&str> = train.iter().map(|s| s.id.as_str()).collect();
        let idx = self.select(&scores, &ids, n, seed)?;
        Ispp::from_samples(train, &idx, source_dataset, self.name())
    }
}

fn check_n(n: usize, available: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyPrompt);
    }
    if n > available {
        return Err(Error::NotEnoughSamples {
            requested: n,
            available,
        });
    }
    Ok(())
}

/// Indices sorted ascending by score, ties broken by id.
pub fn score_order(scores: &[f64], ids: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| ids[a].cmp(ids[b])));
    order
}

/// Quantile midpoints of the score-sorted split: position
/// `floor((k + 0.5) * len / n)` for `k = 0..n`.
#[derive(Debug, Default)]
pub struct IntervalSampler;

impl Named for IntervalSampler {
    fn name(&self) -> &str {
        "interval"
    }
}

impl IsppSampler for IntervalSampler {
    fn select(&self, scores: &[f64], ids: &[&str], n: usize, _seed: u64) -> Result<Vec<usize>> {
        check_n(n, scores.len())?;
        let order = score_order(scores, ids);
        let len = scores.len();
        Ok((0..n)
            .map(|k| order[((2 * k + 1) * len) / (2 * n)])
            .collect())
    }
}

/// Uniform draw of `n` distinct pairs.
#[derive(Debug, Default)]
pub struct RandomSampler;

impl Named for RandomSampler {
    fn name(&self) -> &str {
        "random"
    }
}

const SAMPLER_STREAM: u64 = 0x15_0000;

impl IsppSampler for RandomSampler {
    fn select(&self, scores: &[f64], _ids: &[&str], n: usize, seed: u64) -> Result<Vec<usize>> {
        check_n(n, scores.len())?;
        let mut rng = rng::stream(seed, SAMPLER_STREAM);
        Ok(index::sample(&mut rng, scores.len(), n).into_vec())
    }
}

pub fn samplers() -> Registry<dyn IsppSampler> {
    let mut r: Registry<dyn IsppSampler> = Registry::new("prompt sampler");
    r.register(Arc::new(IntervalSampler));
    r.register(Arc::new(RandomSampler));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::tests::plain;

    fn sorted_ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:04}")).collect()
    }

    #[test]
    fn interval_picks_quantile_midpoints() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let ids = sorted_ids(100);
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let s = IntervalSampler;
        assert_eq!(s.select(&scores, &ids, 10, 0).unwrap(), vec![5, 15, 25, 35, 45, 55, 65, 75, 85, 95]);
        assert_eq!(s.select(&scores, &ids, 1, 0).unwrap(), vec![50]);
        let all = s.select(&scores, &ids, 100, 0).unwrap();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(matches!(s.select(&scores, &ids, 101, 0), Err(Error::NotEnoughSamples { .. })));
    }

    #[test]
    fn interval_is_order_independent_and_sorted() {
        let samples: Vec<Sample> = (0..37)
            .map(|i| {
                let mut s = plain(&format!("{i:03}"), 0.0);
                s.norm_score = ((i * 17) % 37) as f64 / 36.0;
                s
            })
            .collect();
        let a = IntervalSampler.sample(&samples, 7, 0, "d").unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        let b = IntervalSampler.sample(&rev, 7, 0, "d").unwrap();
        assert_eq!(a.scores(), b.scores());
        assert!(a.scores().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ties_break_by_id() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let ids = ["d", "b", "a", "c"];
        assert_eq!(score_order(&scores, &ids), vec![2, 1, 3, 0]);
    }

    #[test]
    fn random_is_reproducible_and_distinct() {
        let scores: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ids = sorted_ids(50);
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        let a = RandomSampler.select(&scores, &ids, 10, 42).unwrap();
        let b = RandomSampler.select(&scores, &ids, 10, 42).unwrap();
        assert_eq!(a, b);
        let mut d = a.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 10);
        let mut perm = RandomSampler.select(&scores, &ids, 50, 1).unwrap();
        perm.sort();
        assert_eq!(perm, (0..50).collect::<Vec<_>>());
    }

    /// Each of 10 samples should be drawn 1000 times out of 10,000 single
    /// draws; every count must sit within 3 binomial standard deviations,
    /// and the chi-square statistic (9 dof) below its 0.999 quantile.
    #[test]
    fn random_single_draws_are_uniform() {
        let scores = [0.0; 10];
        let ids = ["a"; 10];
        let mut counts = [0usize; 10];
        for seed in 0..10_000u64 {
            counts[RandomSampler.select(&scores, &ids, 1, seed).unwrap()[0]] += 1;
        }
        let expected = 1000.0;
        let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
        let mut chi2 = 0.0;
        for c in counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    #[test]
    fn prompt_requires_normalized_scores() {
        let s = vec![plain("a", 3.0)];
        assert!(Ispp::from_samples(&s, &[0], "d", "interval").is_err());
        assert!(matches!(Ispp::from_samples(&s, &[], "d", "interval"), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn registry_has_both_strategies() {
        let r = samplers();
        assert_eq!(r.names(), vec!["interval", "random"]);
    }
}
