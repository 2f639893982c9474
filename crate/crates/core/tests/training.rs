use std::sync::Arc;

use promptiqa_core::augmentation::AugmentConfig;
use promptiqa_core::datasets::synthetic::{synth_requirement_dataset, SynthConfig};
use promptiqa_core::datasets::{normalize_labels, PromptPair, SplitProtocol};
use promptiqa_core::evaluation::{ispp_size_sweep, EvalOptions};
use promptiqa_core::model::checkpoint::Checkpoint;
use promptiqa_core::model::{ModelConfig, PromptIqa};
use promptiqa_core::training::{
    finetune_on_isps, run_training, FinetuneConfig, RunOptions, TrainConfig, TrainState, TrainingSet, CHECKPOINT_FILE,
    METRICS_FILE,
};

fn set(name: &str, requirement: &str, seed: u64) -> TrainingSet {
    let d = synth_requirement_dataset(&SynthConfig::new(name, requirement, 80, 0.0, seed)).unwrap();
    let protocol = SplitProtocol {
        repeats: 1,
        ..Default::default()
    };
    TrainingSet::from_dataset(&d.dataset, &protocol, 0).unwrap()
}

fn cfg(epochs: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 1e-3,
        cosine_period_epochs: epochs,
        n_prompts: 5,
        steps_per_epoch: Some(steps),
        train_sampler: "random".into(),
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn loss_halves_within_200_steps() {
    let sets = [set("id", "identity", 1)];
    let out = run_training(&sets, &ModelConfig::tiny(), &cfg(1, 200), &AugmentConfig::default(), RunOptions::default()).unwrap();
    let first = out.log[0].loss;
    let tail: f64 = out.log[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * first, "step 1 loss {first}, last 10 mean {tail}");
}

#[test]
fn identical_seeds_give_identical_losses() {
    let sets = [set("id", "identity", 1), set("fl", "flip", 2)];
    let run = || {
        run_training(&sets, &ModelConfig::miniature(), &cfg(2, 60), &AugmentConfig::default(), RunOptions::default())
            .unwrap()
            .log
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 120);
    assert!(a.iter().zip(&b).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits() && x.dataset == y.dataset));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let sets = [set("id", "identity", 1), set("fl", "flip", 2)];
    let aug = AugmentConfig::default();
    let mc = ModelConfig::miniature();
    let three = TrainConfig {
        cosine_period_epochs: 3,
        ..cfg(3, 10)
    };
    let one = TrainConfig { epochs: 1, ..three.clone() };
    let full = run_training(&sets, &mc, &three, &aug, RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = || RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let first = run_training(&sets, &mc, &one, &aug, opts()).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let resumed = run_training(
        &sets,
        &mc,
        &three,
        &aug,
        RunOptions {
            resume: Some(TrainState::from_checkpoint(&ck).unwrap()),
            ..opts()
        },
    )
    .unwrap();
    let bits = |log: &[promptiqa_core::training::LogRow]| log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first.log), bits(&full.log[..10]));
    assert_eq!(bits(&resumed.log), bits(&full.log[10..]));
    assert_eq!(resumed.state.model.params(), full.state.model.params());
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
}

#[test]
fn finetune_reduces_loss_on_its_pairs() {
    let d = synth_requirement_dataset(&SynthConfig::new("ft", "identity", 40, 0.0, 5)).unwrap().dataset;
    let base = PromptIqa::new(
        ModelConfig {
            use_prompt: false,
            ..ModelConfig::miniature()
        },
        1,
    )
    .unwrap();
    let samples = normalize_labels(&d.samples).unwrap();
    let pairs: Vec<PromptPair> = samples[..10]
        .iter()
        .map(|s| PromptPair {
            id: s.id.clone(),
            image: Arc::clone(&s.image),
            score: s.norm_score,
        })
        .collect();
    let (tuned, losses) = finetune_on_isps(&base, &pairs, &FinetuneConfig::default()).unwrap();
    assert_eq!(losses.len(), 50);
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
    assert!(tuned.params().same_layout(base.params()));
}

#[test]
fn sweeps_are_reproducible() {
    let d = synth_requirement_dataset(&SynthConfig::new("sw", "square", 60, 0.0, 8)).unwrap().dataset;
    let m = PromptIqa::new(ModelConfig::miniature(), 2).unwrap();
    let opts = EvalOptions {
        protocol: SplitProtocol {
            repeats: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ispp_size_sweep(&m, &d, &[3, 5, 100], &opts).unwrap().write_csv(&a).unwrap();
    ispp_size_sweep(&m, &d, &[3, 5, 100], &opts).unwrap().write_csv(&b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 4);
}
