use std::sync::Arc;

use promptiqa_core::datasets::sampling::samplers;
use promptiqa_core::datasets::{Ispp, PromptPair};
use promptiqa_core::image::Image;
use promptiqa_core::model::{expand_score, ModelConfig, PromptIqa};
use promptiqa_core::rng;
use promptiqa_core::training::{lr_at, TrainConfig};
use proptest::prelude::*;
use rand::Rng as _;

fn noise(seed: u64) -> Arc<Image> {
    let mut r = rng::stream(seed, 11);
    Arc::new(Image::from_fn(16, 16, |_, _, _| r.random::<f64>()))
}

fn prompt(seeds: &[u64], scores: &[f64]) -> Ispp {
    Ispp {
        pairs: seeds
            .iter()
            .zip(scores)
            .map(|(&s, &v)| PromptPair {
                id: s.to_string(),
                image: noise(s),
                score: v,
            })
            .collect(),
        source_dataset: "p".into(),
        strategy: "test".into(),
    }
}

fn model(use_prompt: bool) -> PromptIqa {
    PromptIqa::new(
        ModelConfig {
            use_prompt,
            ..ModelConfig::miniature()
        },
        9,
    )
    .unwrap()
}

fn arb_prompt() -> impl Strategy<Value = (Vec<u64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u64..10_000, n),
            proptest::collection::vec(0.0f64..=1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn requirement_rows_follow_prompt_order((seeds, scores) in arb_prompt(), rot in 0usize..5) {
        let m = model(true);
        let q = noise(424_242);
        let a = m.features(&prompt(&seeds, &scores), &q).unwrap();
        let k = rot % seeds.len();
        let mut s2 = seeds.clone();
        let mut v2 = scores.clone();
        s2.rotate_left(k);
        v2.rotate_left(k);
        let b = m.features(&prompt(&s2, &v2), &q).unwrap();
        let n = seeds.len();
        for i in 0..n {
            let ra = a.requirement_feature.row_slice((i + k) % n);
            let rb = b.requirement_feature.row_slice(i);
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
        prop_assert!((a.score - b.score).abs() <= 1e-12);
    }

    #[test]
    fn prompts_cannot_be_ignored((seeds, scores) in arb_prompt(), which in 0usize..5) {
        let m = model(true);
        let q = vec![noise(7)];
        let i = which % scores.len();
        let mut moved = scores.clone();
        moved[i] = if moved[i] > 0.5 { moved[i] - 0.1 } else { moved[i] + 0.1 };
        let a = m.predict(Some(&prompt(&seeds, &scores)), &q).unwrap()[0];
        let b = m.predict(Some(&prompt(&seeds, &moved)), &q).unwrap()[0];
        prop_assert!(a != b);
    }

    #[test]
    fn no_prompt_output_ignores_the_prompt((seeds, scores) in arb_prompt()) {
        let m = model(false);
        let q = vec![noise(1), noise(2)];
        let bare = m.predict(None, &q).unwrap();
        let with = m.predict(Some(&prompt(&seeds, &scores)), &q).unwrap();
        prop_assert_eq!(bare.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), with.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn expansion_is_linear(s in -10.0f64..10.0, a in -4.0f64..4.0, n in 1usize..64) {
        let lhs = expand_score(a * s, n).unwrap();
        let rhs: Vec<f64> = expand_score(s, n).unwrap().iter().map(|v| a * v).collect();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn lr_stays_in_range_and_restarts(epoch in 0usize..1000, period in 1usize..100, lr in 1e-6f64..1.0) {
        let cfg = TrainConfig { lr, cosine_period_epochs: period, ..Default::default() };
        let v = lr_at(epoch, &cfg);
        prop_assert!((0.0..=lr).contains(&v));
        prop_assert_eq!(v.to_bits(), lr_at(epoch + period, &cfg).to_bits());
    }

    #[test]
    fn interval_prompts_are_sorted_and_distinct(scores in proptest::collection::vec(0.0f64..=1.0, 10..80), n in 1usize..10, seed in 0u64..100) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("s{i:03}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let idx = samplers().get("interval").unwrap().select(&scores, &id_refs, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| scores[w[0]] <= scores[w[1]]));
        let mut uniq = idx.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n);
    }

    #[test]
    fn random_prompts_are_reproducible(scores in proptest::collection::vec(0.0f64..=1.0, 10..40), seed in 0u64..1000) {
        let ids: Vec<String> = (0..scores.len()).map(|i| i.to_string()).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let s = samplers().get("random").unwrap();
        prop_assert_eq!(s.select(&scores, &id_refs, 5, seed).unwrap(), s.select(&scores, &id_refs, 5, seed).unwrap());
    }
}
