//! `promptiqa`: train, evaluate and query prompt-conditioned IQA models.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 configuration error, 3 artifact
//! mismatch.

mod prompt_file;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail};
use clap::{Parser, Subcommand, ValueEnum};
use promptiqa_core::config::{DatasetRole, ExperimentConfig, LoadedDataset};
use promptiqa_core::datasets::manifest::{self, ManifestRow, Provenance};
use promptiqa_core::datasets::relabel::{fr_metrics, relabel_with_fr_metric, Polarity};
use promptiqa_core::datasets::sampling::samplers;
use promptiqa_core::datasets::synthetic::{synth_requirement_dataset, Degradation, SynthConfig};
use promptiqa_core::datasets::{min_max, Dataset, DatasetSpec, LabelType, Sample};
use promptiqa_core::evaluation::{
    evaluate_fixed, evaluate_with, generalization_suite, ispp_size_sweep, plot, prompt_effects, EvalOptions, EvalReport,
    ModelGrid, TrainingMode,
};
use promptiqa_core::image::Image;
use promptiqa_core::model::checkpoint::Checkpoint;
use promptiqa_core::model::PromptIqa;
use promptiqa_core::training::{run_training, RunOptions, TrainState, TrainingSet, CHECKPOINT_FILE, METRICS_FILE, VALIDATION_FILE};
use promptiqa_core::Error;

use prompt_file::{PromptEntry, PromptFile, SCHEMA};

const DETERMINISTIC_ENV: &str = "PROMPTIQA_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "promptiqa", version, about = "Prompt-conditioned no-reference image quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the config's datasets.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Evaluate)]
        mode: EvalMode,
        /// Prompt effects to apply (prompt-effect mode); defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
        /// Prompt sizes for the sweep; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Restrict to these datasets.
        #[arg(long = "dataset")]
        datasets: Vec<String>,
        /// Use this fixed prompt file instead of sampling one per repeat.
        #[arg(long)]
        ispp: Option<PathBuf>,
        /// Extra models for generalization mode, as `family:MODE=checkpoint`.
        #[arg(long = "model")]
        models: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a prompt from a manifest and save it as JSON.
    MakePrompts {
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value = "interval")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score images against a saved prompt.
    Predict {
        checkpoint: PathBuf,
        /// Prompt file; omit for prompt-free models.
        #[arg(long)]
        ispp: Option<PathBuf>,
        images: Vec<PathBuf>,
        /// Also write the CSV here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Replace a manifest's labels with a full-reference metric.
    Relabel {
        manifest: PathBuf,
        references: PathBuf,
        #[arg(long, default_value = "ssim")]
        metric: String,
        /// `higher_better` or `lower_better`; defaults to the metric's own.
        #[arg(long)]
        polarity: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write a synthetic requirement dataset to disk.
    MakeSynthetic {
        #[arg(long)]
        requirement: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, value_enum, default_value_t = Kind::Noise)]
        degradation: Kind,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Evaluate,
    PromptEffect,
    Sweep,
    Generalization,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Noise,
    Blur,
}

/// An error with an explicit exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::ConfigHashMismatch { .. } => 3,
                Error::Config(_)
                | Error::UnknownEntry { .. }
                | Error::NonMonotone(_)
                | Error::File { .. }
                | Error::NotEnoughSamples { .. }
                | Error::EmptyPrompt => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    if deterministic() {
        log::info!("{DETERMINISTIC_ENV} set; running deterministically");
    }
    match cmd {
        Command::Train { config, out, resume } => cmd_train(&config, out, resume),
        Command::Eval {
            checkpoint,
            config,
            mode,
            strategy,
            sizes,
            datasets,
            ispp,
            models,
            out,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            config,
            mode,
            strategy,
            sizes,
            datasets,
            ispp,
            models,
            out,
        }),
        Command::MakePrompts {
            manifest,
            n,
            strategy,
            seed,
            out,
        } => cmd_make_prompts(&manifest, n, &strategy, seed, &out),
        Command::Predict {
            checkpoint,
            ispp,
            images,
            out,
        } => cmd_predict(&checkpoint, ispp.as_deref(), &images, out.as_deref()),
        Command::Relabel {
            manifest,
            references,
            metric,
            polarity,
            out,
        } => cmd_relabel(&manifest, &references, &metric, polarity.as_deref(), &out),
        Command::MakeSynthetic {
            requirement,
            n,
            sigma,
            seed,
            size,
            degradation,
            out,
        } => {
            let degradation = match degradation {
                Kind::Noise => Degradation::Noise,
                Kind::Blur => Degradation::Blur,
            };
            let name = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "synthetic".into());
            let synth = synth_requirement_dataset(&SynthConfig {
                degradation,
                image_size: size,
                ..SynthConfig::new(&name, &requirement, n, sigma, seed)
            })?;
            let m = manifest::export_dataset(&synth.dataset, Some(&synth.references), &out)?;
            println!("{}", m.display());
            Ok(())
        }
    }
}

// Every code path is single-threaded and seeded, so runs are always
// reproducible; the variable is accepted and recorded for tooling that sets it.
fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// `<output_dir>/<name>-<short hash>`.
fn run_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir)).join(format!("{}-{}", cfg.name, cfg.short_hash()))
}

/// Writes the config with absolute data paths plus a small run record.
fn write_snapshot(cfg: &ExperimentConfig, config_path: &Path, dir: &Path) -> anyhow::Result<()> {
    let base = config_dir(config_path);
    let mut snap = cfg.clone();
    for d in &mut snap.datasets {
        for p in [&mut d.manifest, &mut d.references].into_iter().flatten() {
            let abs = prompt_file::resolve(&base, p);
            *p = fs::canonicalize(&abs).unwrap_or(abs).to_string_lossy().into_owned();
        }
    }
    fs::write(dir.join("config.toml"), snap.to_toml()?)?;
    let record = serde_json::json!({
        "config_hash": cfg.hash(),
        "config_path": config_path.display().to_string(),
        "deterministic": deterministic(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn cmd_train(config_path: &Path, out: Option<PathBuf>, resume: bool) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let loaded = cfg.load_datasets(&config_dir(config_path))?;
    let sets = loaded
        .iter()
        .filter(|l| l.role == DatasetRole::Train)
        .map(|l| TrainingSet::from_dataset(&l.dataset, &cfg.split, 0))
        .collect::<promptiqa_core::Result<Vec<_>>>()?;
    let dir = run_dir(&cfg, out);
    fs::create_dir_all(&dir)?;
    let resume_state = if resume {
        let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        ck.check_config(&cfg.model_config())?;
        Some(TrainState::from_checkpoint(&ck)?)
    } else {
        for f in [METRICS_FILE, VALIDATION_FILE, CHECKPOINT_FILE] {
            let p = dir.join(f);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        None
    };
    write_snapshot(&cfg, config_path, &dir)?;
    log::info!("training {} into {}", cfg.name, dir.display());
    let outcome = run_training(
        &sets,
        &cfg.model,
        &cfg.train,
        &cfg.augment,
        RunOptions {
            out_dir: Some(dir.clone()),
            resume: resume_state,
            init_seed: None,
        },
    )?;
    if let Some(last) = outcome.log.last() {
        log::info!("finished at step {} with loss {:.5}", last.step, last.loss);
    }
    println!("{}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

struct EvalArgs {
    checkpoint: PathBuf,
    config: PathBuf,
    mode: EvalMode,
    strategy: Vec<String>,
    sizes: Vec<usize>,
    datasets: Vec<String>,
    ispp: Option<PathBuf>,
    models: Vec<String>,
    out: Option<PathBuf>,
}

fn load_checked(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<PromptIqa> {
    let ck = Checkpoint::load(path)?;
    ck.check_config(&cfg.model_config()).map_err(|e| match e {
        Error::ConfigHashMismatch { expected, found } => anyhow!(Exit(
            3,
            format!(
                "{} was trained with model config hash {found} but {} expects {expected}",
                path.display(),
                cfg.name
            )
        )),
        e => e.into(),
    })?;
    Ok(ck.model()?)
}

fn select<'a>(loaded: &'a [LoadedDataset], names: &[String]) -> anyhow::Result<Vec<&'a LoadedDataset>> {
    for n in names {
        if !loaded.iter().any(|l| l.dataset.name() == n) {
            return Err(Exit(2, format!("no dataset named `{n}` in the config")).into());
        }
    }
    Ok(loaded
        .iter()
        .filter(|l| names.is_empty() || names.contains(&l.dataset.spec.name))
        .collect())
}

fn repeats_chart(report: &EvalReport, title: &str) -> String {
    let mut keys: Vec<(String, String)> = report.rows.iter().map(|r| (r.dataset.clone(), r.strategy.clone())).collect();
    keys.dedup();
    let keys: Vec<_> = keys.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let series: Vec<(String, Vec<(f64, f64)>)> = keys
        .iter()
        .map(|(d, s)| {
            let pts = report
                .rows
                .iter()
                .filter(|r| &r.dataset == d && &r.strategy == s)
                .map(|r| (r.repeat as f64, r.srocc))
                .collect();
            (format!("{d}/{s}"), pts)
        })
        .collect();
    let refs: Vec<(&str, Vec<(f64, f64)>)> = series.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    plot::line_chart(title, "repeat", "SROCC", &refs)
}

fn write_report(report: &EvalReport, dir: &Path, stem: &str, title: &str) -> anyhow::Result<()> {
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    report.write_json_summary(&dir.join(format!("{stem}.json")))?;
    fs::write(dir.join(format!("{stem}.svg")), repeats_chart(report, title))?;
    for m in report.medians() {
        println!("{}\t{}\t{}\tsrocc {:.4}\tplcc {:.4}", m.dataset, m.mode, m.strategy, m.srocc, m.plcc);
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let model = load_checked(&a.checkpoint, &cfg)?;
    let loaded = cfg.load_datasets(&config_dir(&a.config))?;
    let chosen = select(&loaded, &a.datasets)?;
    let dir = run_dir(&cfg, a.out.clone());
    fs::create_dir_all(&dir)?;
    write_snapshot(&cfg, &a.config, &dir)?;
    let hash = cfg.short_hash();
    let opts = EvalOptions {
        protocol: cfg.split.clone(),
        sampler: cfg.eval.sampler.clone(),
        n_prompts: cfg.eval.n_prompts,
        seed: cfg.eval.seed,
    };
    match a.mode {
        EvalMode::Evaluate => {
            let mut report = EvalReport::default();
            if let Some(path) = &a.ispp {
                let pf = PromptFile::load(path)?;
                let ispp = pf.to_ispp(&config_dir(path))?;
                for l in &chosen {
                    report.extend(evaluate_fixed(&model, &l.dataset, &opts.protocol, &ispp)?);
                }
            } else {
                let standard = prompt_effects().get("standard")?;
                for l in &chosen {
                    report.extend(evaluate_with(&model, &l.dataset, &opts, standard.as_ref(), "eval")?);
                }
            }
            write_report(&report, &dir, &format!("eval-{hash}"), "Evaluation")
        }
        EvalMode::PromptEffect => {
            let names = if a.strategy.is_empty() { cfg.eval.strategies.clone() } else { a.strategy.clone() };
            let registry = prompt_effects();
            let effects = names.iter().map(|n| registry.get(n)).collect::<promptiqa_core::Result<Vec<_>>>()?;
            let mut report = EvalReport::default();
            for l in &chosen {
                for e in &effects {
                    report.extend(evaluate_with(&model, &l.dataset, &opts, e.as_ref(), "prompt_effect")?);
                }
            }
            write_report(&report, &dir, &format!("prompt-effect-{hash}"), "Prompt effects")
        }
        EvalMode::Sweep => {
            let sizes = if a.sizes.is_empty() { cfg.eval.sizes.clone() } else { a.sizes.clone() };
            for l in &chosen {
                let sweep = ispp_size_sweep(&model, &l.dataset, &sizes, &opts)?;
                let stem = format!("sweep-{}-{hash}", l.dataset.name());
                sweep.write_csv(&dir.join(format!("{stem}.csv")))?;
                fs::write(dir.join(format!("{stem}.svg")), sweep.svg(&format!("Prompt size sweep: {}", l.dataset.name())))?;
                for p in &sweep.points {
                    println!("{}\tn={}\tsrocc {:.4}\tplcc {:.4}\t{}", l.dataset.name(), p.n, p.srocc, p.plcc, p.status);
                }
            }
            Ok(())
        }
        EvalMode::Generalization => {
            let modes = cfg
                .eval
                .modes
                .iter()
                .map(|m| m.parse::<TrainingMode>())
                .collect::<promptiqa_core::Result<Vec<_>>>()?;
            let n_train = loaded.iter().filter(|l| l.role == DatasetRole::Train).count();
            let own_mode = if n_train > 1 { TrainingMode::Mdt } else { TrainingMode::Sdt };
            let extras = a
                .models
                .iter()
                .map(|spec| parse_model_spec(spec))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut grid = ModelGrid::default();
            grid.insert("PromptIQA", own_mode, &model);
            for (family, mode, m) in &extras {
                grid.insert(family, *mode, m);
            }
            let eval_only: Vec<Dataset> = chosen
                .iter()
                .filter(|l| a.datasets.is_empty() && l.role == DatasetRole::Eval || !a.datasets.is_empty())
                .map(|l| l.dataset.clone())
                .collect();
            let targets = if eval_only.is_empty() {
                chosen.iter().map(|l| l.dataset.clone()).collect()
            } else {
                eval_only
            };
            let report = generalization_suite(&grid, &targets, &modes, &opts, &cfg.eval.finetune)?;
            report.write_csv(&dir.join(format!("generalization-{hash}.csv")))?;
            fs::write(dir.join(format!("generalization-grid-{hash}.csv")), report.grid_csv())?;
            fs::write(
                dir.join(format!("generalization-{hash}.json")),
                serde_json::to_string_pretty(&report.rows)? + "\n",
            )?;
            print!("{}", report.grid_csv());
            Ok(())
        }
    }
}

fn parse_model_spec(spec: &str) -> anyhow::Result<(String, TrainingMode, PromptIqa)> {
    let bad = || Exit(2, format!("--model expects `family:MODE=checkpoint`, got `{spec}`"));
    let (key, path) = spec.split_once('=').ok_or_else(bad)?;
    let (family, mode) = key.split_once(':').ok_or_else(bad)?;
    let mode: TrainingMode = mode.parse()?;
    let model = Checkpoint::load(Path::new(path))?.model()?;
    Ok((family.to_string(), mode, model))
}

fn cmd_make_prompts(manifest_path: &Path, n: usize, strategy: &str, seed: u64, out: &Path) -> anyhow::Result<()> {
    let sampler = samplers().get(strategy)?;
    let rows = manifest::read_manifest(manifest_path)?;
    let raw: Vec<f64> = rows.iter().map(|r| r.raw_score).collect();
    let norm = min_max(&raw)?;
    let ids: Vec<&str> = rows.iter().map(|r| r.id.as_str()).collect();
    let idx = sampler.select(&norm, &ids, n, seed)?;
    let entries = idx
        .iter()
        .map(|&i| {
            let p = manifest::resolve(manifest_path, &rows[i].image_path);
            let p = fs::canonicalize(&p).unwrap_or(p);
            PromptEntry {
                id: rows[i].id.clone(),
                image_path: p.to_string_lossy().into_owned(),
                score: norm[i],
            }
        })
        .collect();
    let source = fs::canonicalize(manifest_path).unwrap_or_else(|_| manifest_path.to_path_buf());
    let pf = PromptFile {
        schema: SCHEMA.into(),
        strategy: strategy.into(),
        seed,
        n,
        source_manifest: source.to_string_lossy().into_owned(),
        entries,
    };
    pf.save(out)?;
    println!("{}", out.display());
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_predict(checkpoint: &Path, ispp: Option<&Path>, images: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let prompt = match ispp {
        Some(p) => Some(PromptFile::load(p)?.to_ispp(&config_dir(p))?),
        None if model.uses_prompt() => return Err(Exit(2, "this model needs a prompt; pass --ispp".into()).into()),
        None => None,
    };
    if images.is_empty() {
        return Err(Exit(2, "no images given".into()).into());
    }
    // Score readable images in one batch; keep per-row failures.
    let loaded: Vec<Result<Arc<Image>, String>> =
        images.iter().map(|p| Image::load(p).map(Arc::new).map_err(|e| e.to_string())).collect();
    let ok: Vec<Arc<Image>> = loaded.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let mut scores = if ok.is_empty() { Vec::new() } else { model.predict(prompt.as_ref(), &ok)? }.into_iter();
    let mut csv = String::from("image_path,score\n");
    let mut failed = 0;
    for (path, r) in images.iter().zip(&loaded) {
        let cell = match r {
            Ok(_) => format!("{}", scores.next().expect("one score per image")),
            Err(e) => {
                failed += 1;
                format!("ERROR: {e}")
            }
        };
        csv.push_str(&format!("{},{}\n", csv_field(&path.display().to_string()), csv_field(&cell)));
    }
    std::io::stdout().write_all(csv.as_bytes())?;
    if let Some(o) = out {
        fs::write(o, &csv)?;
    }
    if failed > 0 {
        bail!("{failed} of {} images could not be scored", images.len());
    }
    Ok(())
}

fn cmd_relabel(manifest_path: &Path, refs_path: &Path, metric: &str, polarity: Option<&str>, out: &Path) -> anyhow::Result<()> {
    let metric = fr_metrics().get(metric)?;
    let polarity: Polarity = match polarity {
        Some(p) => p.parse()?,
        None => metric.polarity(),
    };
    let rows = manifest::read_manifest(manifest_path)?;
    let ref_rows = manifest::read_references(refs_path)?;
    let known: BTreeSet<&str> = ref_rows.iter().map(|r| r.group_id.as_str()).collect();
    let unjoined: BTreeSet<&str> = rows
        .iter()
        .filter(|r| !known.contains(r.group_id.as_str()))
        .map(|r| if r.group_id.is_empty() { "<empty>" } else { r.group_id.as_str() })
        .collect();
    if !unjoined.is_empty() {
        let list: Vec<&str> = unjoined.into_iter().collect();
        bail!(Exit(1, format!("groups without a reference image: {}", list.join(", "))));
    }
    let references = manifest::load_references(refs_path)?;
    let mut samples = Vec::with_capacity(rows.len());
    for r in &rows {
        let img = Image::load(manifest::resolve(manifest_path, &r.image_path))?;
        samples.push(Sample::new(r.id.clone(), Arc::new(img), r.raw_score).with_group(r.group_id.clone()));
    }
    let raw: Vec<f64> = rows.iter().map(|r| r.raw_score).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spec = DatasetSpec {
        name: "source".into(),
        label_type: LabelType::Mos,
        score_lo: lo,
        score_hi: if hi > lo { hi } else { lo + 1.0 },
        has_reference_groups: true,
        shortest_side: None,
    };
    // Labels are replaced wholesale, so the source's label type is irrelevant.
    let source = Dataset::new(spec, samples)?;
    let relabelled = relabel_with_fr_metric(&source, &references, metric.as_ref(), polarity)?;
    fs::create_dir_all(out)?;
    let new_rows: Vec<ManifestRow> = rows
        .iter()
        .zip(&relabelled.samples)
        .map(|(r, s)| {
            let p = manifest::resolve(manifest_path, &r.image_path);
            ManifestRow {
                id: r.id.clone(),
                image_path: fs::canonicalize(&p).unwrap_or(p).to_string_lossy().into_owned(),
                raw_score: s.raw_score,
                group_id: r.group_id.clone(),
            }
        })
        .collect();
    let out_manifest = out.join("manifest.csv");
    manifest::write_manifest(&out_manifest, &new_rows)?;
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).to_string_lossy().into_owned();
    manifest::write_provenance(
        &out.join("provenance.json"),
        &Provenance {
            metric: metric.name().to_string(),
            polarity,
            label_type: polarity.label_type(),
            source_manifest: canon(manifest_path),
            references_manifest: canon(refs_path),
        },
    )?;
    println!("{}", out_manifest.display());
    Ok(())
}
