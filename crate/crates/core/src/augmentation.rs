//! Label augmentation that ties ground truth to the prompt scores.
//!
//! Random scaling divides the prompt scores and the ground truth by the
//! maximum of the joint list; random flipping maps every value `s` to
//! `alpha - s`. Both always act on the prompt and the ground truth
//! together, so the only way to predict the transformed target is to read
//! the transformed prompt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` prompt scores plus one ground-truth score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreList {
    pub prompt_scores: Vec<f64>,
    pub gt: f64,
}

impl ScoreList {
    pub fn new(prompt_scores: Vec<f64>, gt: f64) -> Result<Self> {
        if prompt_scores.iter().chain(std::iter::once(&gt)).any(|v| !v.is_finite()) {
            return Err(Error::Config("score list contains a non-finite value".into()));
        }
        Ok(Self { prompt_scores, gt })
    }

    /// Length of the full list, `n + 1`.
    pub fn len(&self) -> usize {
        self.prompt_scores.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn max(&self) -> f64 {
        self.prompt_scores.iter().cloned().fold(self.gt, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_p_rs")]
    pub p_rs: f64,
    #[serde(default = "default_p_rf")]
    pub p_rf: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_p_rs() -> f64 {
    0.5
}
fn default_p_rf() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rs: default_p_rs(),
            p_rf: default_p_rf(),
            alpha: default_alpha(),
            epsilon: default_epsilon(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_rs", self.p_rs), ("p_rf", self.p_rf)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        if !(self.epsilon > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("epsilon must be positive and alpha finite".into()));
        }
        Ok(())
    }

    /// Both strategies switched off.
    pub fn disabled() -> Self {
        Self {
            p_rs: 0.0,
            p_rf: 0.0,
            ..Self::default()
        }
    }
}

/// Which strategies fired for one draw and the exact transform applied.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Applied {
    /// `Some(alpha)` when flipping fired.
    pub flip: Option<f64>,
    /// `Some(max)`, the divisor, when scaling fired and was applied.
    pub scale: Option<f64>,
    /// Scaling fired but the list maximum was at or below epsilon.
    pub scale_skipped: bool,
}

impl Applied {
    /// The transform as a function of one score.
    pub fn apply(&self, s: f64) -> f64 {
        let s = match self.flip {
            Some(alpha) => alpha - s,
            None => s,
        };
        match self.scale {
            Some(max) => s / max,
            None => s,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip.is_none() && self.scale.is_none()
    }
}

/// Divides the whole list by its maximum. Returns `(list, false)` unchanged
/// when the maximum does not exceed `epsilon`.
pub fn random_scale(s: &ScoreList, epsilon: f64) -> (ScoreList, bool) {
    let max = s.max();
    if !(max > epsilon) {
        return (s.clone(), false);
    }
    (
        ScoreList {
            prompt_scores: s.prompt_scores.iter().map(|v| v / max).collect(),
            gt: s.gt / max,
        },
        true,
    )
}

pub fn random_flip(s: &ScoreList, alpha: f64) -> ScoreList {
    ScoreList {
        prompt_scores: s.prompt_scores.iter().map(|v| alpha - v).collect(),
        gt: alpha - s.gt,
    }
}

/// Draws the two Bernoulli decisions (flip first, then scale) and applies
/// them jointly to the prompt scores and every ground-truth value of a
/// batch. The scale factor comes from the maximum over the whole flipped
/// list.
pub fn augment_joint(
    prompt_scores: &[f64],
    gts: &[f64],
    cfg: &AugmentConfig,
    rng: &mut impl rand::Rng,
) -> (Vec<f64>, Vec<f64>, Applied) {
    let flip_fires = rng.random::<f64>() < cfg.p_rf;
    let scale_fires = rng.random::<f64>() < cfg.p_rs;
    let mut applied = Applied::default();
    let mut prompts = prompt_scores.to_vec();
    let mut targets = gts.to_vec();
    if flip_fires {
        applied.flip = Some(cfg.alpha);
        prompts.iter_mut().chain(targets.iter_mut()).for_each(|v| *v = cfg.alpha - *v);
    }
    if scale_fires {
        let max = prompts.iter().chain(&targets).cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > cfg.epsilon {
            applied.scale = Some(max);
            prompts.iter_mut().chain(targets.iter_mut()).for_each(|v| *v /= max);
        } else {
            applied.scale_skipped = true;
        }
    }
    (prompts, targets, applied)
}

pub fn apply_augmentation(s: &ScoreList, cfg: &AugmentConfig, rng: &mut impl rand::Rng) -> (ScoreList, Applied) {
    let (prompt_scores, gt, applied) = augment_joint(&s.prompt_scores, &[s.gt], cfg, rng);
    (
        ScoreList {
            prompt_scores,
            gt: gt[0],
        },
        applied,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::srocc;
    use crate::rng;
    use proptest::prelude::*;

    fn list(p: &[f64], gt: f64) -> ScoreList {
        ScoreList::new(p.to_vec(), gt).unwrap()
    }

    #[test]
    fn scale_examples() {
        let (out, ok) = random_scale(&list(&[2.0, 4.0, 5.0], 3.0), 1e-8);
        assert!(ok);
        assert_eq!(out.prompt_scores, vec![0.4, 0.8, 1.0]);
        assert_eq!(out.gt, 0.6);

        let fixed = list(&[0.3, 1.0], 0.2);
        assert_eq!(random_scale(&fixed, 1e-8).0, fixed);

        let zeros = list(&[0.0, 0.0], 0.0);
        assert_eq!(random_scale(&zeros, 1e-8), (zeros.clone(), false));
    }

    #[test]
    fn flip_examples() {
        let out = random_flip(&list(&[0.2, 0.7], 0.5), 1.0);
        assert_eq!(out.prompt_scores, vec![0.8, 1.0 - 0.7]);
        assert!((out.prompt_scores[1] - 0.3).abs() <= f64::EPSILON);
        assert_eq!(out.gt, 0.5);
        let ones = random_flip(&list(&[1.0, 1.0], 1.0), 1.0);
        assert_eq!(ones, list(&[0.0, 0.0], 0.0));
    }

    #[test]
    fn composition_flips_then_scales() {
        let cfg = AugmentConfig {
            p_rs: 1.0,
            p_rf: 1.0,
            ..Default::default()
        };
        let (out, applied) = apply_augmentation(&list(&[0.2, 0.4], 0.8), &cfg, &mut rng::stream(0, 0));
        assert_eq!(applied.flip, Some(1.0));
        // IEEE evaluation of (1 - s) / max(1 - S); decimal values 1.0, 0.75, 0.25
        assert_eq!(out.prompt_scores, vec![1.0, (1.0 - 0.4) / (1.0 - 0.2)]);
        assert_eq!(out.gt, (1.0 - 0.8) / (1.0 - 0.2));
        assert!((out.prompt_scores[1] - 0.75).abs() <= 2.0 * f64::EPSILON);
        assert!((out.gt - 0.25).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn disabled_is_identity() {
        let s = list(&[0.1, 0.9, 0.4], 0.3);
        let mut r = rng::stream(5, 0);
        for _ in 0..100 {
            let (out, applied) = apply_augmentation(&s, &AugmentConfig::disabled(), &mut r);
            assert_eq!(out, s);
            assert!(applied.is_identity());
        }
    }

    /// Binomial oracle: over 100,000 draws each firing count must lie within
    /// three standard deviations of `n * p`.
    #[test]
    fn firing_rates_match_probabilities() {
        let cfg = AugmentConfig::default();
        let s = list(&[0.2, 0.5], 0.7);
        let mut r = rng::stream(11, 0);
        let n = 100_000;
        let (mut flips, mut scales) = (0usize, 0usize);
        for _ in 0..n {
            let (_, a) = apply_augmentation(&s, &cfg, &mut r);
            flips += a.flip.is_some() as usize;
            scales += (a.scale.is_some() || a.scale_skipped) as usize;
        }
        for (count, p) in [(scales, 0.5), (flips, 0.1)] {
            let mean = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((count as f64 - mean).abs() < 3.0 * sd, "{count} vs {mean}");
        }
    }

    fn arb_list() -> impl Strategy<Value = ScoreList> {
        (proptest::collection::vec(0.0f64..=1.0, 1..12), 0.0f64..=1.0)
            .prop_map(|(p, g)| ScoreList { prompt_scores: p, gt: g })
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(s in arb_list(), alpha in -2.0f64..2.0) {
            let s = ScoreList {
                prompt_scores: s.prompt_scores.iter().map(|v| (v * 64.0).round() / 64.0).collect(),
                gt: (s.gt * 64.0).round() / 64.0,
            };
            let alpha = (alpha * 64.0).round() / 64.0;
            prop_assert_eq!(random_flip(&random_flip(&s, alpha), alpha), s);
        }

        #[test]
        fn joint_transform_is_shared(s in arb_list(), seed in 0u64..1000) {
            let cfg = AugmentConfig { p_rs: 0.5, p_rf: 0.5, ..Default::default() };
            let (out, applied) = apply_augmentation(&s, &cfg, &mut rng::stream(seed, 0));
            prop_assert_eq!(out.gt, applied.apply(s.gt));
            for (o, i) in out.prompt_scores.iter().zip(&s.prompt_scores) {
                prop_assert_eq!(*o, applied.apply(*i));
            }
            for v in out.prompt_scores.iter().chain(std::iter::once(&out.gt)) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn scale_keeps_ranks_and_flip_reverses_them(v in proptest::collection::vec(0.01f64..=1.0, 3..12)) {
            let s = ScoreList { prompt_scores: v[1..].to_vec(), gt: v[0] };
            let full = |l: &ScoreList| { let mut x = l.prompt_scores.clone(); x.push(l.gt); x };
            prop_assume!(full(&s).iter().any(|x| *x != v[0]));
            let (scaled, _) = random_scale(&s, 1e-8);
            prop_assert_eq!(srocc(&full(&s), &full(&scaled)), 1.0);
            prop_assert_eq!(srocc(&full(&s), &full(&random_flip(&s, 1.0))), -1.0);
            prop_assert_eq!(full(&scaled).iter().cloned().fold(f64::MIN, f64::max), 1.0);
        }
    }
}
