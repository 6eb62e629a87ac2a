use std::path::{Path, PathBuf};

use cfdarts::autodiff::ComputeGraph;
use cfdarts::coreset::{self, CoreSelection};
use cfdarts::corruption::{corrupt_split, CorruptionSpec};
use cfdarts::data::{self, FailureSet, LabeledDataset, Manifest, Splits};
use cfdarts::pipeline::{self, PhaseTimings, PipelineConfig, SearchedModel, SelectionMode};
use cfdarts::searchspace::{ArchitectureParams, DiscreteArch};
use cfdarts::tensor::derive_seed;

use crate::artifacts::{read_input, read_input_text, ArtifactKind, OutputDir, RunManifest};
use crate::error::CliError;
use crate::Common;

pub const SPLITS_FILE: &str = "splits.txt";
pub const MODEL_FILE: &str = "model.json";
pub const ALPHA_FILE: &str = "alpha.json";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const REPORT_FILE: &str = "report.txt";

pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &c.config {
        None => PipelineConfig::default(),
        Some(path) => {
            let text = read_input_text(path)?;
            PipelineConfig::from_toml(&text).map_err(|e| CliError::Config {
                path: path.clone(),
                reason: e.to_string(),
            })?
        }
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<LabeledDataset, CliError> {
    Ok(LabeledDataset::from_bytes(&read_input(path)?)?)
}

fn load_splits(dir: &Path) -> Result<Splits, CliError> {
    let listing = dir.join(SPLITS_FILE);
    let manifest = Manifest::parse(&read_input_text(&listing)?)?;
    let split = |name: &str| -> Result<LabeledDataset, CliError> {
        let path = manifest
            .get(name)
            .ok_or_else(|| CliError::Format(format!("{} lists no {name} split", listing.display())))?;
        load_dataset(&if path.is_relative() { dir.join(path) } else { path.to_path_buf() })
    };
    Ok(Splits {
        train: split("train")?,
        val: split("val")?,
        test: split("test")?,
    })
}

fn load_model(path: &Path) -> Result<ComputeGraph, CliError> {
    serde_json::from_str(&read_input_text(path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn load_searched(dir: &Path) -> Result<SearchedModel, CliError> {
    let alpha_path = dir.join(ALPHA_FILE);
    let alpha: ArchitectureParams =
        serde_json::from_str(&read_input_text(&alpha_path)?).map_err(|e| CliError::Format(format!("{}: {e}", alpha_path.display())))?;
    Ok(SearchedModel {
        model: load_model(&dir.join(MODEL_FILE))?,
        arch: DiscreteArch::parse(&read_input_text(&dir.join(GENOTYPE_FILE))?)?,
        alpha,
        traces: Vec::new(),
        timings: PhaseTimings::default(),
    })
}

fn json<T: serde::Serialize>(value: &T) -> String {
    format!("{}\n", serde_json::to_string(value).expect("value serializes"))
}

fn add_searched(out: &mut OutputDir, m: &SearchedModel) {
    out.add(ArtifactKind::Model, MODEL_FILE, json(&m.model));
    out.add(ArtifactKind::Alpha, ALPHA_FILE, json(&m.alpha));
    out.add(ArtifactKind::Genotype, GENOTYPE_FILE, m.arch.to_text());
    for (i, t) in m.traces.iter().enumerate() {
        out.add(ArtifactKind::Trace, &format!("trace{}.csv", i + 1), t.to_csv());
    }
}

pub fn gen_data(c: &Common, log: &Log) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let ws = pipeline::prepare_data(&cfg)?;
    let mut out = OutputDir::new(&c.out, c.config.as_deref());
    let mut listing = Manifest::default();
    for (name, split) in [("train", &ws.splits.train), ("val", &ws.splits.val), ("test", &ws.splits.test)] {
        let file = format!("{name}.cfds");
        out.add(ArtifactKind::Dataset, &file, split.to_bytes());
        listing.entries.push((name.to_string(), PathBuf::from(file)));
    }
    out.add(ArtifactKind::Dataset, SPLITS_FILE, listing.to_text());
    out.commit()?;
    let s = &ws.splits;
    log.note(format!(
        "wrote {} / {} / {} examples to {}",
        s.train.len(),
        s.val.len(),
        s.test.len(),
        c.out.display()
    ));
    Ok(())
}

pub fn corrupt(spec: &str, input: &Path, out_dir: &Path, log: &Log) -> Result<(), CliError> {
    let spec: CorruptionSpec = spec.parse()?;
    let clean = load_dataset(input)?;
    let corrupted = corrupt_split(&clean, &spec)?;
    let file = format!("{}.cfds", corrupted.name);
    let mut out = OutputDir::new(out_dir, None);
    out.add(ArtifactKind::Dataset, &file, corrupted.to_bytes());
    out.commit()?;
    log.note(format!("wrote {}", out_dir.join(file).display()));
    Ok(())
}

pub fn search(c: &Common, data_dir: &Path, log: &Log) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let splits = load_splits(data_dir)?;
    log.note("searching on clean splits");
    let m = pipeline::train_initial(&cfg, &splits, pipeline::run_seed(cfg.seed, 0))?;
    let acc = cfdarts::bilevel::accuracy(&m.model, &splits.test).map_err(pipeline::PipelineError::from)?;
    let mut out = OutputDir::new(&c.out, c.config.as_deref());
    add_searched(&mut out, &m);
    out.commit()?;
    log.note(format!("clean test accuracy {:.2}%", 100.0 * acc));
    Ok(())
}

pub fn collect(model: &Path, input: &Path, spec: Option<&str>, out_dir: &Path, log: &Log) -> Result<(), CliError> {
    let spec = spec.map(str::parse::<CorruptionSpec>).transpose()?;
    let model = load_model(model)?;
    let data = load_dataset(input)?;
    let failures = pipeline::collect_failures(&model, &data, spec)?;
    let mut out = OutputDir::new(out_dir, None);
    out.add(ArtifactKind::Failures, "failures.txt", failures.to_text());
    out.commit()?;
    log.note(format!("{} of {} examples misclassified", failures.len(), data.len()));
    Ok(())
}

pub struct SelectArgs {
    pub model: PathBuf,
    pub train: PathBuf,
    pub failures: PathBuf,
    pub corrupted: PathBuf,
    pub budget: usize,
    pub mode: SelectionMode,
    pub seed: u64,
}

fn failure_examples(failures: &Path, corrupted: &Path) -> Result<(FailureSet, LabeledDataset), CliError> {
    let set = FailureSet::parse(&read_input_text(failures)?)?;
    let data = load_dataset(corrupted)?;
    let examples = data.select_ids(&set.ids)?;
    Ok((set, examples))
}

pub fn select(a: &SelectArgs, out_dir: &Path, log: &Log) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let train = load_dataset(&a.train)?;
    let (_, fails) = failure_examples(&a.failures, &a.corrupted)?;
    let selection = if a.budget == 0 || fails.is_empty() {
        CoreSelection {
            ids: Vec::new(),
            radii: Vec::new(),
            budget: a.budget,
        }
    } else {
        let train_emb = coreset::embed_dataset(&model, &train)?;
        let fail_emb = coreset::embed_dataset(&model, &fails)?;
        match a.mode {
            SelectionMode::Kcenter => coreset::kcenter_greedy(&train_emb, &fail_emb, a.budget)?,
            SelectionMode::Random => coreset::random_selection(&train_emb, &fail_emb, a.budget, derive_seed(a.seed, "select"))?,
        }
    };
    let mut out = OutputDir::new(out_dir, None);
    out.add(ArtifactKind::Selection, "selection.csv", selection.to_csv());
    out.commit()?;
    log.note(format!("selected {} of {} failures", selection.ids.len(), fails.len()));
    Ok(())
}

pub fn refine(c: &Common, data_dir: &Path, initial: &Path, failures: &Path, corrupted: &Path, log: &Log) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let splits = load_splits(data_dir)?;
    let initial = load_searched(initial)?;
    let (set, fails) = failure_examples(failures, corrupted)?;
    log.note(format!("refining with {} failures", fails.len()));
    let (model, r) = pipeline::refine(&cfg, &initial, &splits, &fails, pipeline::run_seed(cfg.seed, 0))?;
    let held = data::exclude(&set, &r.used)?;
    let mut out = OutputDir::new(&c.out, c.config.as_deref());
    add_searched(&mut out, &model);
    for (i, s) in r.selections.iter().enumerate() {
        out.add(ArtifactKind::Selection, &format!("selection{}.csv", i + 1), s.to_csv());
    }
    out.add(ArtifactKind::Failures, "held_out.txt", held.to_text());
    out.commit()?;
    log.note(format!("{} failures held out for evaluation", held.len()));
    Ok(())
}

pub fn run(c: &Common, log: &Log) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    log.note(format!(
        "running {} variants over {} seeds",
        cfg.pipeline.variants.len(),
        cfg.pipeline.num_seeds
    ));
    let report = pipeline::run_experiment(&cfg)?;
    let mut out = OutputDir::new(&c.out, c.config.as_deref());
    out.add(ArtifactKind::Config, "config.toml", cfg.to_toml());
    out.add(ArtifactKind::Report, "report.csv", report.to_csv());
    out.add(ArtifactKind::Report, REPORT_FILE, report.to_table());
    out.add(ArtifactKind::Genotype, "genotypes.txt", report.genotypes());
    out.add(ArtifactKind::Timings, "timings.csv", report.timings_csv());
    out.commit()?;
    for r in report.runs.iter().filter(|r| r.error.is_some()) {
        log.note(format!(
            "{} seed {} failed: {}",
            r.variant.key(),
            r.seed,
            r.error.as_deref().unwrap_or("")
        ));
    }
    log.note(report.to_table());
    Ok(())
}

pub fn report(run_dir: &Path) -> Result<(), CliError> {
    let manifest = RunManifest::load(run_dir)?.ok_or_else(|| CliError::MissingFile(run_dir.join(crate::artifacts::MANIFEST_FILE)))?;
    manifest.verify(run_dir)?;
    if manifest.find(REPORT_FILE).is_none() {
        return Err(CliError::NoReport(run_dir.to_path_buf()));
    }
    print!("{}", read_input_text(&run_dir.join(REPORT_FILE))?);
    Ok(())
}
