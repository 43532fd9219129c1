//! Run configuration and the command implementations behind the binary:
//! corpus generation, the three training phases, evaluation, and plotting,
//! each writing its artifacts into a phase subdirectory of one run directory
//! with a frozen copy of the effective configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{export_corpus, import_corpus, Corpus, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{read_curves, run_adaptation_experiment, summarize, write_curves};
use crate::meta::{adapt, meta_train, pretrain, reset_speaker_lut};
use crate::metrics::write_jsonl;
use crate::model::ModelConfig;
use crate::plot::write_plots;
use crate::rng::child_rng;
use crate::syndata::{make_corpus, Generator, GeneratorConfig};

/// Environment variables with this prefix override config fields; `__`
/// separates nesting levels, e.g. `METATTS_TRAIN__SEED=7`.
pub const ENV_PREFIX: &str = "METATTS_";

/// Everything one pipeline run needs, serialized as a single TOML file.
///
/// The training schedule (pre-training steps, meta iterations, snapshot
/// marks) lives in [`TrainConfig`]; the two extra fields here are the
/// adaptation budget and the evaluation experiment's seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Run directory; each command writes into a phase subdirectory of it.
    pub output_dir: PathBuf,
    /// Adaptation step budget for `adapt` and the evaluation experiment.
    pub adapt_steps: usize,
    /// Experiment seeds; each yields one (speaker, mode) grid of cells.
    pub eval_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            adapt_steps: 1000,
            eval_seeds: vec![1, 2, 3],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.mel_bins != self.generator.bins {
            return Err(Error::Config(format!(
                "model.mel_bins = {} but generator.bins = {}",
                self.model.mel_bins, self.generator.bins
            )));
        }
        if self.model.alphabet != self.generator.alphabet {
            return Err(Error::Config(format!(
                "model.alphabet = {} but generator.alphabet = {}",
                self.model.alphabet, self.generator.alphabet
            )));
        }
        if self.generator.utts_per_pseudo < 2 * self.train.n_shots {
            return Err(Error::Config(format!(
                "episodes draw 2·n_shots = {} utterances per pseudo-speaker, \
                 but utts_per_pseudo = {}",
                2 * self.train.n_shots,
                self.generator.utts_per_pseudo
            )));
        }
        if self.adapt_steps == 0 {
            return Err(Error::Config("adapt_steps must be ≥ 1".into()));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval_seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Applies the global CLI overrides: `--seed` rewrites both the corpus
    /// and training root seeds, `--out` the run directory.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.generator.seed = s;
            self.train.seed = s;
        }
        if let Some(dir) = out {
            self.output_dir = dir;
        }
    }

    fn corpus_dir(&self) -> PathBuf {
        self.output_dir.join("corpus")
    }

    /// Default input paths, matching where the producing command writes.
    pub fn default_path(&self, artifact: &str) -> PathBuf {
        self.output_dir.join(artifact)
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    // Values use TOML literal syntax (7, 0.5, true, [10, 50]); anything that
    // does not parse is taken as a bare string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn override_path(table: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let segments: Vec<String> = dotted.split("__").map(str::to_lowercase).collect();
    let mut node = table;
    for seg in &segments[..segments.len() - 1] {
        let entry = node
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override {dotted}: {seg} is not a config section"))
        })?;
    }
    node.insert(segments.last().unwrap().clone(), parse_env_value(raw));
    Ok(())
}

/// Builds a validated [`RunConfig`] from TOML text plus environment-style
/// overrides. Unknown fields, either source, are rejected.
pub fn parse_run_config<'a>(
    text: &str,
    env: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config file: {e}")))?;
    for (key, value) in env {
        if let Some(path) = key.strip_prefix(ENV_PREFIX) {
            override_path(&mut table, path, value)?;
        }
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the config file (or the built-in defaults when `path` is `None`)
/// and applies `METATTS_*` overrides from the process environment.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let env: Vec<(String, String)> = std::env::vars().collect();
    parse_run_config(&text, env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

/// Freezes the effective config at `<output_dir>/config.toml`. A pre-existing
/// frozen config must match exactly unless `force` rewrites it; this pins a
/// run directory to one configuration.
pub fn freeze_config(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("config.toml");
    if path.exists() && !force {
        let existing: RunConfig = toml::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::Config(format!("frozen config {}: {e}", path.display())))?;
        if &existing != cfg {
            return Err(Error::Config(format!(
                "{} was created with a different configuration; pass --force to replace it",
                cfg.output_dir.display()
            )));
        }
        return Ok(path);
    }
    let text =
        toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    fs::write(&path, text)?;
    Ok(path)
}

/// Creates (or re-creates, with `force`) one phase subdirectory; refuses to
/// overwrite existing artifacts otherwise.
fn phase_dir(cfg: &RunConfig, name: &str, force: bool) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    if dir.exists() && dir.read_dir()?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} already contains artifacts; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_split(dir: &Path, split: SplitTag) -> Result<Corpus> {
    let sub = dir.join(split.to_string());
    let corpus = import_corpus(&sub)
        .map_err(|e| Error::Data(format!("corpus split {}: {e}", sub.display())))?;
    if corpus.split_tag != split {
        return Err(Error::Data(format!(
            "{} holds the {} split, expected {split}",
            sub.display(),
            corpus.split_tag
        )));
    }
    Ok(corpus)
}

fn check_corpus_model(corpus: &Corpus, model: &ModelConfig) -> Result<()> {
    if corpus.bins != model.mel_bins || corpus.alphabet != model.alphabet {
        return Err(Error::Config(format!(
            "corpus ({} bins, alphabet {}) does not match the model ({} bins, alphabet {})",
            corpus.bins, corpus.alphabet, model.mel_bins, model.alphabet
        )));
    }
    Ok(())
}

/// Rewrites a loaded checkpoint's training section to the active config so
/// command behavior follows the config file, not the producing run.
fn with_active_train(mut ckpt: Checkpoint, cfg: &RunConfig) -> Checkpoint {
    ckpt.train = cfg.train.clone();
    ckpt
}

/// Generates the four corpus splits under `<run>/corpus/`, one manifest per
/// split carrying the generator seed.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    freeze_config(cfg, force)?;
    let dir = phase_dir(cfg, "corpus", force)?;
    let (_, set) = make_corpus(&cfg.generator)?;
    let splits = [
        (&set.pretrain, SplitTag::Pretrain),
        (&set.meta_train, SplitTag::MetaTrain),
        (&set.meta_val, SplitTag::MetaVal),
        (&set.meta_test, SplitTag::MetaTest),
    ];
    let mut written = Vec::new();
    for (corpus, tag) in splits {
        let sub = dir.join(tag.to_string());
        fs::create_dir_all(&sub)?;
        export_corpus(corpus, &sub, Some(cfg.generator.seed))?;
        // Read-back validation: the artifact on disk must round-trip.
        load_split(&dir, tag)?;
        written.push(sub.join("manifest.json"));
    }
    Ok(written)
}

/// Multi-speaker pre-training on the pretrain split; writes `theta_t.ckpt`
/// and the per-step metrics stream.
pub fn cmd_pretrain(cfg: &RunConfig, corpus: Option<&Path>, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    freeze_config(cfg, force)?;
    let corpus_dir = corpus.map(Path::to_path_buf).unwrap_or(cfg.corpus_dir());
    let split = load_split(&corpus_dir, SplitTag::Pretrain)?;
    check_corpus_model(&split, &cfg.model)?;
    let (ckpt, records) = pretrain(&split, &cfg.model, &cfg.train)?;
    let dir = phase_dir(cfg, "pretrain", force)?;
    let ckpt_path = dir.join("theta_t.ckpt");
    ckpt.save(&ckpt_path)?;
    Checkpoint::load(&ckpt_path)?;
    let metrics_path = dir.join("metrics.jsonl");
    write_jsonl(&metrics_path, &records)?;
    Ok(vec![ckpt_path, metrics_path])
}

/// Speaker-LUT reset followed by episodic meta-learning; writes
/// `theta_m.ckpt` and the meta/meta_val metrics stream.
pub fn cmd_meta(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    corpus: Option<&Path>,
    force: bool,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    freeze_config(cfg, force)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or(cfg.default_path("pretrain/theta_t.ckpt"));
    let theta_t = with_active_train(Checkpoint::load(&ckpt_path)?, cfg);
    let corpus_dir = corpus.map(Path::to_path_buf).unwrap_or(cfg.corpus_dir());
    let train_split = load_split(&corpus_dir, SplitTag::MetaTrain)?;
    let val_split = load_split(&corpus_dir, SplitTag::MetaVal)?;
    check_corpus_model(&train_split, &cfg.model)?;
    let reset = reset_speaker_lut(&theta_t)?;
    let (theta_m, records) = meta_train(&reset, &train_split, &val_split)?;
    let dir = phase_dir(cfg, "meta", force)?;
    let out_ckpt = dir.join("theta_m.ckpt");
    theta_m.save(&out_ckpt)?;
    Checkpoint::load(&out_ckpt)?;
    let metrics_path = dir.join("metrics.jsonl");
    write_jsonl(&metrics_path, &records)?;
    Ok(vec![out_ckpt, metrics_path])
}

/// Few-shot adaptation to every held-out speaker, writing one adapted
/// checkpoint and one metrics trace per speaker. `baseline` selects the
/// θ_T-with-random-LUT arm (and then requires a θ_T input checkpoint).
#[allow(clippy::too_many_arguments)]
pub fn cmd_adapt(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    corpus: Option<&Path>,
    baseline: bool,
    steps: Option<usize>,
    snapshots: Option<&[usize]>,
    force: bool,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    freeze_config(cfg, force)?;
    // --snapshots is a per-invocation parameter (like --steps), applied after
    // the run's configuration is pinned.
    let mut cfg = cfg.clone();
    if let Some(marks) = snapshots {
        cfg.train.snapshots = marks.to_vec();
        cfg.train.validate()?;
    }
    let default_ckpt = if baseline {
        "pretrain/theta_t.ckpt"
    } else {
        "meta/theta_m.ckpt"
    };
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or(cfg.default_path(default_ckpt));
    let ckpt = with_active_train(Checkpoint::load(&ckpt_path)?, &cfg);
    let corpus_dir = corpus.map(Path::to_path_buf).unwrap_or(cfg.corpus_dir());
    let test_split = load_split(&corpus_dir, SplitTag::MetaTest)?;
    check_corpus_model(&test_split, &cfg.model)?;
    let steps = steps.unwrap_or(cfg.adapt_steps);
    if steps == 0 {
        return Err(Error::Config("adaptation needs at least one step".into()));
    }

    let dir = phase_dir(&cfg, "adapt", force)?;
    let mut written = Vec::new();
    for &speaker_id in &test_split.speaker_ids {
        let utts: Vec<_> = test_split
            .utterances
            .iter()
            .filter(|u| u.speaker_id == speaker_id)
            .collect();
        if utts.len() < cfg.train.n_shots {
            return Err(Error::Data(format!(
                "speaker {speaker_id} has {} utterances, needs {} shots",
                utts.len(),
                cfg.train.n_shots
            )));
        }
        let mut rng = child_rng(cfg.train.seed, &format!("adapt-samples-{speaker_id}"));
        let samples: Vec<_> = index_sample(&mut rng, utts.len(), cfg.train.n_shots)
            .iter()
            .map(|i| utts[i].clone())
            .collect();
        let outcome = adapt(&ckpt, &samples, steps, baseline)?;
        let ckpt_out = dir.join(format!("speaker_{speaker_id}.ckpt"));
        outcome.final_checkpoint.save(&ckpt_out)?;
        let trace_out = dir.join(format!("speaker_{speaker_id}.metrics.jsonl"));
        write_jsonl(&trace_out, &outcome.trace)?;
        written.push(ckpt_out);
        written.push(trace_out);
    }
    Ok(written)
}

/// The meta-vs-baseline adaptation experiment; writes `curves.json` and the
/// per-step aggregate `summary.json`.
pub fn cmd_eval(
    cfg: &RunConfig,
    theta_m: Option<&Path>,
    theta_t: Option<&Path>,
    corpus: Option<&Path>,
    steps: Option<usize>,
    force: bool,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    freeze_config(cfg, force)?;
    let m_path = theta_m
        .map(Path::to_path_buf)
        .unwrap_or(cfg.default_path("meta/theta_m.ckpt"));
    let t_path = theta_t
        .map(Path::to_path_buf)
        .unwrap_or(cfg.default_path("pretrain/theta_t.ckpt"));
    let theta_m = with_active_train(Checkpoint::load(&m_path)?, cfg);
    let theta_t = with_active_train(Checkpoint::load(&t_path)?, cfg);
    let corpus_dir = corpus.map(Path::to_path_buf).unwrap_or(cfg.corpus_dir());
    let test_split = load_split(&corpus_dir, SplitTag::MetaTest)?;
    let train_split = load_split(&corpus_dir, SplitTag::MetaTrain)?;
    check_corpus_model(&test_split, &cfg.model)?;
    // The embedding oracle needs the generator profiles, which rebuild
    // deterministically from the frozen generator config.
    let generator = Generator::new(cfg.generator.clone())?;
    let curves = run_adaptation_experiment(
        &theta_m,
        &theta_t,
        &generator,
        &test_split,
        &train_split,
        steps.unwrap_or(cfg.adapt_steps),
        &cfg.eval_seeds,
    )?;
    let summary = summarize(&curves)?;
    let dir = phase_dir(cfg, "eval", force)?;
    let curves_path = dir.join("curves.json");
    write_curves(&curves_path, &curves)?;
    read_curves(&curves_path)?;
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(vec![curves_path, summary_path])
}

/// Renders the two curve images (similarity and MCD vs step, both arms
/// overlaid) from a curves file.
pub fn cmd_plot(cfg: &RunConfig, curves: Option<&Path>, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    freeze_config(cfg, force)?;
    let curves_path = curves
        .map(Path::to_path_buf)
        .unwrap_or(cfg.default_path("eval/curves.json"));
    let curves = read_curves(&curves_path)
        .map_err(|e| Error::Data(format!("curves {}: {e}", curves_path.display())))?;
    let dir = phase_dir(cfg, "plots", force)?;
    let (sim, mcd) = write_plots(&curves, &dir)?;
    Ok(vec![sim, mcd])
}
