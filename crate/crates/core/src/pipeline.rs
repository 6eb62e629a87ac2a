//! End-to-end procedure: initial search and training, failure collection on
//! a corrupted test split, core set selection, failure-guided re-search,
//! retraining and evaluation, repeated over seeds and variants.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{ComputeGraph, SlotTag};
use crate::bilevel::{self, BilevelError, SearchConfig, SearchTrace};
use crate::coreset::{self, CoreSelection, CoresetError};
use crate::corruption::{corrupt_split, CorruptionError, CorruptionSpec};
use crate::data::{self, DataError, FailureSet, LabeledDataset, Splits, SyntheticStyle};
use crate::searchspace::{
    build_supernet, derive_architecture, materialize, ArchitectureParams, CellSpec, DiscreteArch, NetConfig, OperationSet, SearchSpaceError,
};
use crate::tensor::{derive_seed, digest_u64, mix_seed};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("no failures to refine on: the model classifies every corrupted example correctly")]
    NoFailures,
    #[error("held-out split {split} contains {count} examples used during refinement")]
    Leak { split: String, count: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Coreset(#[from] CoresetError),
    #[error(transparent)]
    Bilevel(#[from] BilevelError),
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
}

impl From<crate::autodiff::GraphError> for PipelineError {
    fn from(e: crate::autodiff::GraphError) -> Self {
        PipelineError::Bilevel(e.into())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Kcenter,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Final weights from the clean training split only.
    #[default]
    Plain,
    /// Final weights from the training split plus the selected failures.
    FailureAugmented,
}

/// Rows of an experiment report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Initial,
    Rf,
    RfE,
    Cf,
    CfE,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Initial, Variant::Rf, Variant::RfE, Variant::Cf, Variant::CfE];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Initial => "initial",
            Variant::Rf => "rf",
            Variant::RfE => "rf_e",
            Variant::Cf => "cf",
            Variant::CfE => "cf_e",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Variant::Initial => "Initial",
            Variant::Rf => "RF-DARTS",
            Variant::RfE => "RF-DARTSE",
            Variant::Cf => "CF-DARTS",
            Variant::CfE => "CF-DARTSE",
        }
    }

    pub fn selection(self) -> Option<SelectionMode> {
        match self {
            Variant::Initial => None,
            Variant::Rf | Variant::RfE => Some(SelectionMode::Random),
            Variant::Cf | Variant::CfE => Some(SelectionMode::Kcenter),
        }
    }

    pub fn retrain(self) -> RetrainMode {
        match self {
            Variant::RfE | Variant::CfE => RetrainMode::FailureAugmented,
            _ => RetrainMode::Plain,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub style: SyntheticStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 200,
            height: 16,
            width: 16,
            seed: 0,
            style: SyntheticStyle::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Corruption whose failures guide the re-search.
    pub spec: CorruptionSpec,
    /// Further corruptions evaluated on the full test split.
    pub extra: Vec<CorruptionSpec>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        use crate::corruption::CorruptionKind::*;
        let at = |kind| CorruptionSpec {
            kind,
            severity: 3,
            seed: 1,
        };
        Self {
            spec: at(GaussianNoise),
            extra: vec![at(ImpulseNoise), at(BoxBlur), at(Contrast)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoresetConfig {
    pub budget: usize,
    pub selection: SelectionMode,
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self {
            budget: 32,
            selection: SelectionMode::Kcenter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpaceConfig {
    pub intermediates: usize,
    pub num_cells: usize,
    pub channels: usize,
    pub share_alpha: bool,
    pub ops: OperationSet,
    /// In-edges kept per intermediate node when deriving.
    pub retain_k: usize,
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self {
            intermediates: 4,
            num_cells: 2,
            channels: 8,
            share_alpha: true,
            ops: OperationSet::default(),
            retain_k: 2,
            input_mean: 0.5,
            input_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: usize,
    pub retrain: RetrainMode,
    /// Start each re-search from the previous search's alpha instead of zeros.
    pub warm_start_alpha: bool,
    pub num_seeds: usize,
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            retrain: RetrainMode::Plain,
            warm_start_alpha: true,
            num_seeds: 3,
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// Full run configuration; each section maps to one module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub corruption: CorruptionConfig,
    pub coreset: CoresetConfig,
    pub searchspace: SearchSpaceConfig,
    pub bilevel: SearchConfig,
    pub retrain: RetrainConfig,
    pub pipeline: RunConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.pipeline.iterations == 0 {
            return bad("pipeline.iterations must be at least 1".into());
        }
        if self.pipeline.num_seeds == 0 {
            return bad("pipeline.num_seeds must be at least 1".into());
        }
        if self.data.per_class < 3 {
            return bad("data.per_class must be at least 3".into());
        }
        if self.retrain.batch_size == 0 {
            return bad("retrain.batch_size must be positive".into());
        }
        self.bilevel.validate()?;
        self.retrain_config(0).validate()?;
        let net = self.net()?;
        if self.searchspace.retain_k == 0 || self.searchspace.retain_k > net.cell.inputs {
            return bad(format!(
                "searchspace.retain_k must lie in 1..={}, got {}",
                net.cell.inputs, self.searchspace.retain_k
            ));
        }
        build_supernet(&net, 0)?;
        Ok(())
    }

    pub fn net(&self) -> Result<NetConfig, PipelineError> {
        let s = &self.searchspace;
        Ok(NetConfig {
            cell: CellSpec::new(s.intermediates)?,
            ops: s.ops.clone(),
            num_cells: s.num_cells,
            channels: s.channels,
            num_classes: self.data.num_classes,
            input_dims: [1, self.data.height, self.data.width],
            share_alpha: s.share_alpha,
            input_mean: s.input_mean,
            input_std: s.input_std,
        })
    }

    /// Weight-training settings used for every retraining.
    pub fn retrain_config(&self, seed: u64) -> SearchConfig {
        let r = &self.retrain;
        SearchConfig {
            batch_size: r.batch_size,
            lr_w: r.lr,
            momentum_w: r.momentum,
            weight_decay_w: r.weight_decay,
            grad_clip: r.grad_clip,
            seed,
            ..self.bilevel.clone()
        }
    }

    pub fn search_config(&self, seed: u64) -> SearchConfig {
        SearchConfig {
            seed,
            ..self.bilevel.clone()
        }
    }

    /// Short stable hash of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        format!("{:016x}", digest_u64(h))
    }

    /// A profile that keeps a full three-seed experiment to a few minutes
    /// on one core.
    pub fn desk_fast() -> Self {
        Self {
            data: DataConfig {
                per_class: 200,
                height: 12,
                width: 12,
                ..DataConfig::default()
            },
            coreset: CoresetConfig {
                budget: 16,
                ..CoresetConfig::default()
            },
            searchspace: SearchSpaceConfig {
                channels: 4,
                ..SearchSpaceConfig::default()
            },
            bilevel: SearchConfig {
                epochs: 10,
                steps_per_epoch: 20,
                batch_size: 16,
                ..SearchConfig::default()
            },
            retrain: RetrainConfig {
                epochs: 20,
                batch_size: 16,
                ..RetrainConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Seed for run `index` of an experiment.
pub fn run_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, &format!("run{index}"))
}

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub coreset: f64,
    pub search: f64,
    pub retrain: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.coreset + self.search + self.retrain
    }

    fn add(&mut self, other: &PhaseTimings) {
        self.coreset += other.coreset;
        self.search += other.search;
        self.retrain += other.retrain;
    }
}

/// Clean splits plus the corrupted test splits.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub splits: Splits,
    pub corrupted_test: LabeledDataset,
    pub extra: Vec<(CorruptionSpec, LabeledDataset)>,
}

pub fn prepare_data(config: &PipelineConfig) -> Result<Workspace, PipelineError> {
    let d = &config.data;
    let splits = data::generate_synthetic_with(&d.style, d.num_classes, d.per_class, d.height, d.width, d.seed)?;
    let corrupted_test = corrupt_split(&splits.test, &config.corruption.spec)?;
    let extra = config
        .corruption
        .extra
        .iter()
        .map(|spec| Ok((*spec, corrupt_split(&splits.test, spec)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(Workspace {
        splits,
        corrupted_test,
        extra,
    })
}

/// A searched, derived and retrained network.
#[derive(Clone, Debug)]
pub struct SearchedModel {
    pub model: ComputeGraph,
    pub arch: DiscreteArch,
    pub alpha: ArchitectureParams,
    pub traces: Vec<SearchTrace>,
    pub timings: PhaseTimings,
}

/// Bilevel search on the clean splits, derivation, and retraining of the
/// derived network on the training split.
pub fn train_initial(config: &PipelineConfig, splits: &Splits, seed: u64) -> Result<SearchedModel, PipelineError> {
    let net = config.net()?;
    let clock = Instant::now();
    let mut supernet = build_supernet(&net, derive_seed(seed, "initial/supernet"))?;
    let trace = bilevel::search(
        &mut supernet,
        &splits.train,
        &splits.val,
        &config.search_config(derive_seed(seed, "initial/search")),
    )?;
    let alpha = trace.final_alpha.clone();
    let arch = derive_architecture(&alpha, config.searchspace.retain_k)?;
    let search = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let model = retrain(config, &arch, &splits.train, None, derive_seed(seed, "initial/retrain"))?;
    Ok(SearchedModel {
        model,
        arch,
        alpha,
        traces: vec![trace],
        timings: PhaseTimings {
            search,
            retrain: clock.elapsed().as_secs_f64(),
            coreset: 0.0,
        },
    })
}

/// Materializes `arch` with fresh weights and trains them on `train`, plus
/// `augment` when given.
pub fn retrain(
    config: &PipelineConfig,
    arch: &DiscreteArch,
    train: &LabeledDataset,
    augment: Option<&LabeledDataset>,
    seed: u64,
) -> Result<ComputeGraph, PipelineError> {
    let net = config.net()?;
    let mut model = materialize(arch, &net, derive_seed(seed, "init"))?;
    let joined;
    let data = match augment {
        Some(extra) if !extra.is_empty() => {
            joined = train.concat(extra)?;
            &joined
        }
        _ => train,
    };
    bilevel::train_weights(
        &mut model,
        data,
        config.retrain.epochs,
        &config.retrain_config(derive_seed(seed, "train")),
    )?;
    Ok(model)
}

pub fn model_hash(model: &ComputeGraph) -> u64 {
    mix_seed(model.tag_hash(SlotTag::Weight), model.tag_hash(SlotTag::Arch))
}

/// Ids of `corrupted` examples the model gets wrong, in split order.
pub fn collect_failures(
    model: &ComputeGraph,
    corrupted: &LabeledDataset,
    spec: Option<CorruptionSpec>,
) -> Result<FailureSet, PipelineError> {
    let pred = bilevel::predict(model, corrupted)?;
    let ids = pred
        .iter()
        .enumerate()
        .filter(|(i, p)| **p != corrupted.label(*i) as usize)
        .map(|(i, _)| corrupted.id(i))
        .collect();
    Ok(FailureSet {
        parent: corrupted.name.clone(),
        corruption: spec,
        model_hash: model_hash(model),
        ids,
    })
}

/// Result of the failure-guided re-search, before final retraining.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub arch: DiscreteArch,
    pub alpha: ArchitectureParams,
    /// Selection of each iteration.
    pub selections: Vec<CoreSelection>,
    /// Every failure example that entered a search, in first-use order.
    pub used: Vec<u64>,
    pub traces: Vec<SearchTrace>,
    pub timings: PhaseTimings,
    /// Set when the budget is 0 and refinement is a plain re-search.
    pub degenerate: bool,
}

/// Embeds the failures, selects a core set, splits it into training and
/// validation halves and re-runs the search on the augmented splits, for
/// `iterations` rounds. Round 1 embeds with the initial model; later rounds
/// embed with the previous round's supernet.
pub fn refine_search(
    config: &PipelineConfig,
    initial: &SearchedModel,
    splits: &Splits,
    failures: &LabeledDataset,
    mode: SelectionMode,
    seed: u64,
) -> Result<Refinement, PipelineError> {
    if failures.is_empty() {
        return Err(PipelineError::NoFailures);
    }
    let net = config.net()?;
    let budget = config.coreset.budget;
    let mut timings = PhaseTimings::default();
    let mut alpha = initial.alpha.clone();
    let mut embedder = initial.model.clone();
    let mut selections = Vec::new();
    let mut used: Vec<u64> = Vec::new();
    let mut traces = Vec::new();
    for iter in 1..=config.pipeline.iterations {
        let tag = |what: &str| derive_seed(seed, &format!("refine/iter{iter}/{what}"));
        let clock = Instant::now();
        let train_emb = coreset::embed_dataset(&embedder, &splits.train)?;
        let fail_emb = coreset::embed_dataset(&embedder, failures)?;
        let selection = match mode {
            SelectionMode::Kcenter => coreset::kcenter_greedy(&train_emb, &fail_emb, budget)?,
            SelectionMode::Random => coreset::random_selection(&train_emb, &fail_emb, budget, tag("select"))?,
        };
        let (fail_t, fail_v) = coreset::split_coreset(&selection, tag("split"));
        timings.coreset += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let train = splits.train.concat(&failures.select_ids(&fail_t)?)?;
        let val = splits.val.concat(&failures.select_ids(&fail_v)?)?;
        let mut supernet = build_supernet(&net, tag("supernet"))?;
        if config.pipeline.warm_start_alpha {
            supernet.set_alpha(&alpha)?;
        }
        let trace = bilevel::search(&mut supernet, &train, &val, &config.search_config(tag("search")))?;
        alpha = trace.final_alpha.clone();
        timings.search += clock.elapsed().as_secs_f64();

        for id in &selection.ids {
            if !used.contains(id) {
                used.push(*id);
            }
        }
        selections.push(selection);
        traces.push(trace);
        embedder = supernet.graph;
    }
    let arch = derive_architecture(&alpha, config.searchspace.retain_k)?;
    Ok(Refinement {
        arch,
        alpha,
        selections,
        used,
        traces,
        timings,
        degenerate: budget == 0,
    })
}

/// Re-search followed by retraining per `config.pipeline.retrain`.
pub fn refine(
    config: &PipelineConfig,
    initial: &SearchedModel,
    splits: &Splits,
    failures: &LabeledDataset,
    seed: u64,
) -> Result<(SearchedModel, Refinement), PipelineError> {
    let r = refine_search(config, initial, splits, failures, config.coreset.selection, seed)?;
    let clock = Instant::now();
    let model = retrain_refined(config, &r, splits, failures, config.pipeline.retrain, seed)?;
    let mut timings = r.timings;
    timings.retrain = clock.elapsed().as_secs_f64();
    Ok((
        SearchedModel {
            model,
            arch: r.arch.clone(),
            alpha: r.alpha.clone(),
            traces: r.traces.clone(),
            timings,
        },
        r,
    ))
}

/// Final weights for a refined architecture. Both modes share the weight
/// initialization and batch seed so they differ only in the training data.
pub fn retrain_refined(
    config: &PipelineConfig,
    r: &Refinement,
    splits: &Splits,
    failures: &LabeledDataset,
    mode: RetrainMode,
    seed: u64,
) -> Result<ComputeGraph, PipelineError> {
    let augment = match mode {
        RetrainMode::Plain => None,
        RetrainMode::FailureAugmented => Some(failures.select_ids(&r.used)?),
    };
    retrain(
        config,
        &r.arch,
        &splits.train,
        augment.as_ref(),
        derive_seed(seed, "refine/retrain"),
    )
}

/// Top-1 accuracy per named split.
pub fn evaluate(model: &ComputeGraph, splits: &[(String, &LabeledDataset)]) -> Result<Vec<(String, f64)>, PipelineError> {
    splits
        .iter()
        .map(|(name, d)| Ok((name.clone(), bilevel::accuracy(model, d)?)))
        .collect()
}

/// Errors unless `held_out` is disjoint from `used`.
pub fn check_held_out(split: &str, held_out: &LabeledDataset, used: &[u64]) -> Result<(), PipelineError> {
    let used: HashSet<u64> = used.iter().copied().collect();
    let count = held_out.ids().iter().filter(|id| used.contains(id)).count();
    if count > 0 {
        return Err(PipelineError::Leak {
            split: split.to_string(),
            count,
        });
    }
    Ok(())
}

pub const CLEAN: &str = "clean";
pub const FAIL_HELD_OUT: &str = "fail_held_out";

/// One variant at one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub variant: Variant,
    pub seed: u64,
    /// `(column, accuracy)` in report column order; empty splits and failed
    /// runs have no entry.
    pub accuracies: Vec<(String, f64)>,
    pub failures: usize,
    pub held_out: usize,
    pub genotype: String,
    pub timings: PhaseTimings,
    pub error: Option<String>,
}

impl EvaluationReport {
    pub fn accuracy(&self, column: &str) -> Option<f64> {
        self.accuracies.iter().find(|(c, _)| c == column).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub master_seed: u64,
    pub columns: Vec<String>,
    pub variants: Vec<Variant>,
    pub runs: Vec<EvaluationReport>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &EvaluationReport> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Mean and std of `column` over the successful runs of `variant`.
    pub fn summary(&self, variant: Variant, column: &str) -> (f64, f64) {
        let values: Vec<f64> = self.runs_of(variant).filter_map(|r| r.accuracy(column)).collect();
        mean_std(&values)
    }

    /// Per-run rows followed by mean and std rows per variant.
    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,row,seed,failures,held_out,{},error\n", self.columns.join(","));
        let cells = |r: &EvaluationReport| -> String {
            self.columns
                .iter()
                .map(|c| r.accuracy(c).map_or_else(String::new, |v| format!("{v:.6}")))
                .collect::<Vec<_>>()
                .join(",")
        };
        for v in &self.variants {
            for r in self.runs_of(*v) {
                out.push_str(&format!(
                    "{},run,{},{},{},{},{}\n",
                    v.key(),
                    r.seed,
                    r.failures,
                    r.held_out,
                    cells(r),
                    r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
                ));
            }
            for (row, pick) in [("mean", 0), ("std", 1)] {
                let stats: Vec<String> = self
                    .columns
                    .iter()
                    .map(|c| {
                        let s = self.summary(*v, c);
                        let x = if pick == 0 { s.0 } else { s.1 };
                        if x.is_finite() {
                            format!("{x:.6}")
                        } else {
                            String::new()
                        }
                    })
                    .collect();
                out.push_str(&format!("{},{row},,,,{},\n", v.key(), stats.join(",")));
            }
        }
        out
    }

    /// Fixed-width table in percent: a mean row and a std row per variant.
    pub fn to_table(&self) -> String {
        let name_w = 12;
        let col_w = self.columns.iter().map(|c| c.len()).max().unwrap_or(0).max(8) + 2;
        let mut out = format!("{:<name_w$}{:<6}", "method", "");
        for c in &self.columns {
            out.push_str(&format!("{c:>col_w$}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(name_w + 6 + col_w * self.columns.len()));
        out.push('\n');
        for v in &self.variants {
            for (label, pick) in [("mean", 0), ("std", 1)] {
                let name = if pick == 0 { v.title() } else { "" };
                out.push_str(&format!("{name:<name_w$}{label:<6}"));
                for c in &self.columns {
                    let s = self.summary(*v, c);
                    let x = if pick == 0 { s.0 } else { s.1 };
                    let cell = if x.is_finite() {
                        format!("{:.2}", 100.0 * x)
                    } else {
                        "n/a".to_string()
                    };
                    out.push_str(&format!("{cell:>col_w$}"));
                }
                out.push('\n');
            }
        }
        out.push_str(&format!("config {} seed {}\n", self.fingerprint, self.master_seed));
        out
    }

    /// `variant,seed,coreset_s,search_s,retrain_s,total_s`; kept apart from
    /// the deterministic report.
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("variant,seed,coreset_s,search_s,retrain_s,total_s\n");
        for r in &self.runs {
            let t = r.timings;
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.variant.key(),
                r.seed,
                t.coreset,
                t.search,
                t.retrain,
                t.total()
            ));
        }
        out
    }

    /// Genotype text of every successful run, in report order.
    pub fn genotypes(&self) -> String {
        let mut out = String::new();
        for r in self.runs.iter().filter(|r| r.error.is_none()) {
            out.push_str(&format!("# {} seed {}\n{}", r.variant.key(), r.seed, r.genotype));
        }
        out
    }
}

pub fn report_columns(config: &PipelineConfig) -> Vec<String> {
    let mut cols = vec![CLEAN.to_string(), FAIL_HELD_OUT.to_string()];
    cols.extend(config.corruption.extra.iter().map(CorruptionSpec::label));
    cols
}

fn eval_row(
    variant: Variant,
    seed: u64,
    model: &SearchedModel,
    ws: &Workspace,
    held_out: &LabeledDataset,
    failures: usize,
    timings: PhaseTimings,
) -> Result<EvaluationReport, PipelineError> {
    let mut named: Vec<(String, &LabeledDataset)> = vec![(CLEAN.into(), &ws.splits.test), (FAIL_HELD_OUT.into(), held_out)];
    named.extend(ws.extra.iter().map(|(s, d)| (s.label(), d)));
    named.retain(|(_, d)| !d.is_empty());
    Ok(EvaluationReport {
        variant,
        seed,
        accuracies: evaluate(&model.model, &named)?,
        failures,
        held_out: held_out.len(),
        genotype: model.arch.to_text(),
        timings,
        error: None,
    })
}

fn failed_row(variant: Variant, seed: u64, failures: usize, err: &PipelineError) -> EvaluationReport {
    EvaluationReport {
        variant,
        seed,
        accuracies: Vec::new(),
        failures,
        held_out: 0,
        genotype: String::new(),
        timings: PhaseTimings::default(),
        error: Some(err.to_string()),
    }
}

/// Runs every configured variant at one seed. Variants sharing a
/// selection mode share one re-search.
pub fn run_seed_variants(config: &PipelineConfig, ws: &Workspace, seed: u64) -> Result<Vec<EvaluationReport>, PipelineError> {
    let variants = &config.pipeline.variants;
    let initial = train_initial(config, &ws.splits, seed)?;
    let failure_set = collect_failures(&initial.model, &ws.corrupted_test, Some(config.corruption.spec))?;
    let failures = ws.corrupted_test.select_ids(&failure_set.ids)?;
    let mut rows = Vec::new();
    if variants.contains(&Variant::Initial) {
        rows.push(eval_row(
            Variant::Initial,
            seed,
            &initial,
            ws,
            &failures,
            failures.len(),
            initial.timings,
        )?);
    }
    for mode in [SelectionMode::Random, SelectionMode::Kcenter] {
        let wanted: Vec<Variant> = variants.iter().copied().filter(|v| v.selection() == Some(mode)).collect();
        if wanted.is_empty() {
            continue;
        }
        let refined = refine_search(config, &initial, &ws.splits, &failures, mode, seed);
        for v in wanted {
            let row = refined.as_ref().map_err(|e| PipelineError::Config(e.to_string())).and_then(|r| {
                let clock = Instant::now();
                let model = retrain_refined(config, r, &ws.splits, &failures, v.retrain(), seed)?;
                let mut timings = initial.timings;
                timings.add(&r.timings);
                timings.retrain += clock.elapsed().as_secs_f64();
                let held = data::exclude(&failure_set, &r.used)?;
                let held_out = ws.corrupted_test.select_ids(&held.ids)?;
                check_held_out(FAIL_HELD_OUT, &held_out, &r.used)?;
                let searched = SearchedModel {
                    model,
                    arch: r.arch.clone(),
                    alpha: r.alpha.clone(),
                    traces: Vec::new(),
                    timings,
                };
                eval_row(v, seed, &searched, ws, &held_out, failures.len(), timings)
            });
            rows.push(row.unwrap_or_else(|e| failed_row(v, seed, failures.len(), &e)));
        }
    }
    rows.sort_by_key(|r| variants.iter().position(|v| *v == r.variant));
    Ok(rows)
}

/// The configured variant matrix over `num_seeds` seeds.
pub fn run_experiment(config: &PipelineConfig) -> Result<ExperimentReport, PipelineError> {
    config.validate()?;
    let ws = prepare_data(config)?;
    let mut runs = Vec::new();
    for k in 0..config.pipeline.num_seeds {
        let seed = run_seed(config.seed, k);
        match run_seed_variants(config, &ws, seed) {
            Ok(rows) => runs.extend(rows),
            Err(e) => runs.extend(config.pipeline.variants.iter().map(|v| failed_row(*v, seed, 0, &e))),
        }
    }
    Ok(ExperimentReport {
        fingerprint: config.fingerprint(),
        master_seed: config.seed,
        columns: report_columns(config),
        variants: config.pipeline.variants.clone(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            data: DataConfig {
                per_class: 20,
                height: 8,
                width: 8,
                ..DataConfig::default()
            },
            coreset: CoresetConfig {
                budget: 4,
                ..CoresetConfig::default()
            },
            searchspace: SearchSpaceConfig {
                intermediates: 2,
                num_cells: 1,
                channels: 2,
                ..SearchSpaceConfig::default()
            },
            bilevel: SearchConfig {
                epochs: 1,
                steps_per_epoch: 3,
                batch_size: 8,
                ..SearchConfig::default()
            },
            retrain: RetrainConfig {
                epochs: 1,
                batch_size: 8,
                ..RetrainConfig::default()
            },
            pipeline: RunConfig {
                num_seeds: 1,
                ..RunConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    /// Linear model `[1, 1, k] -> k` logits with the given weight matrix.
    fn linear(k: usize, weight: Vec<f64>, bias: Vec<f64>) -> ComputeGraph {
        let mut g = ComputeGraph::new(&[1, 1, k]);
        let x = g.flatten(g.input()).unwrap();
        let w = g.param("w", SlotTag::Weight, Tensor::new(vec![k, k], weight));
        let b = g.param("b", SlotTag::Weight, Tensor::from_vec(bias));
        let y = g.affine(x, w, b).unwrap();
        g.set_output(y);
        g
    }

    fn one_hot_set(k: usize, labels: &[u32]) -> LabeledDataset {
        let mut images = vec![0.0f32; labels.len() * k];
        for (i, l) in labels.iter().enumerate() {
            images[i * k + *l as usize] = 1.0;
        }
        let ids = (0..labels.len() as u64).collect();
        LabeledDataset::new("onehot", [1, 1, k], k, images, labels.to_vec(), ids).unwrap()
    }

    fn identity(k: usize) -> Vec<f64> {
        (0..k * k).map(|i| if i % (k + 1) == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn constant_model_fails_three_quarters() {
        let n = 25;
        let labels: Vec<u32> = (0..4 * n).map(|i| (i % 4) as u32).collect();
        let data = one_hot_set(4, &labels);
        let model = linear(4, vec![0.0; 16], vec![1.0, 0.0, 0.0, 0.0]);
        let f = collect_failures(&model, &data, None).unwrap();
        assert_eq!(f.ids.len(), 3 * n);
        assert!(f.ids.iter().all(|id| id % 4 != 0));
        assert_eq!(f.model_hash, model_hash(&model));
        let acc = bilevel::accuracy(&model, &data).unwrap();
        assert!((acc + f.ids.len() as f64 / data.len() as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_scores_one_everywhere() {
        let a = one_hot_set(4, &[0, 1, 2, 3, 3]);
        let b = one_hot_set(4, &[2, 2, 1]);
        let model = linear(4, identity(4), vec![0.0; 4]);
        let acc = evaluate(&model, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        assert_eq!(acc, vec![("a".to_string(), 1.0), ("b".to_string(), 1.0)]);
        assert!(collect_failures(&model, &a, None).unwrap().ids.is_empty());
    }

    #[test]
    fn random_guess_near_chance() {
        let (k, n) = (4usize, 4000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images: Vec<f32> = (0..n * k).map(|_| rng.gen::<f32>()).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
        let data = LabeledDataset::new("noise", [1, 1, k], k, images, labels, (0..n as u64).collect()).unwrap();
        let weight = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = linear(k, weight, vec![0.0; k]);
        let acc = bilevel::accuracy(&model, &data).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn config_toml_round_trips() {
        for cfg in [PipelineConfig::default(), PipelineConfig::desk_fast(), tiny()] {
            let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.fingerprint(), cfg.fingerprint());
        }
        assert_ne!(tiny().fingerprint(), PipelineConfig::default().fingerprint());
    }

    #[test]
    fn desk_profile_written_out() {
        let text = r#"
seed = 0

[data]
per_class = 200
height = 12
width = 12

[data.style]
frequencies = [2.5]
orientations = 2
gains = [1.0, 2.5]

[corruption]
spec = "gaussian_noise:3:1"
extra = ["impulse_noise:3:1", "box_blur:3:1", "contrast:3:1"]

[coreset]
budget = 16
selection = "kcenter"

[searchspace]
channels = 4

[bilevel]
epochs = 10
steps_per_epoch = 20
batch_size = 16

[retrain]
epochs = 20
batch_size = 16

[pipeline]
num_seeds = 3
variants = ["initial", "rf", "rf_e", "cf", "cf_e"]
"#;
        assert_eq!(PipelineConfig::from_toml(text).unwrap(), PipelineConfig::desk_fast());
    }

    #[test]
    fn partial_and_bad_configs() {
        let cfg = PipelineConfig::from_toml("seed = 7\n[coreset]\nbudget = 5\n").unwrap();
        assert_eq!((cfg.seed, cfg.coreset.budget), (7, 5));
        assert_eq!(cfg.retrain, RetrainConfig::default());
        assert!(matches!(
            PipelineConfig::from_toml("[coreset]\nbudgett = 5\n"),
            Err(PipelineError::Parse(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[pipeline]\nnum_seeds = 0\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[searchspace]\nretain_k = 3\n"),
            Err(PipelineError::Config(_))
        ));
        let v: Variant = "cf_e".parse().unwrap();
        assert_eq!(
            (v.selection(), v.retrain()),
            (Some(SelectionMode::Kcenter), RetrainMode::FailureAugmented)
        );
        assert!("cfe".parse::<Variant>().is_err());
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn initial_model_is_seeded_and_fails_its_own_failures() {
        let cfg = tiny();
        let ws = prepare_data(&cfg).unwrap();
        let a = train_initial(&cfg, &ws.splits, 11).unwrap();
        let b = train_initial(&cfg, &ws.splits, 11).unwrap();
        assert_eq!(a.arch.to_text(), b.arch.to_text());
        assert_eq!(model_hash(&a.model), model_hash(&b.model));
        let f = collect_failures(&a.model, &ws.corrupted_test, Some(cfg.corruption.spec)).unwrap();
        let fails = ws.corrupted_test.select_ids(&f.ids).unwrap();
        if !fails.is_empty() {
            assert_eq!(bilevel::accuracy(&a.model, &fails).unwrap(), 0.0);
        }
        let acc = bilevel::accuracy(&a.model, &ws.corrupted_test).unwrap();
        assert!((acc + f.ids.len() as f64 / ws.corrupted_test.len() as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_holds_out_used_failures() {
        let cfg = tiny();
        let ws = prepare_data(&cfg).unwrap();
        let initial = train_initial(&cfg, &ws.splits, 2).unwrap();
        let fails = pseudo_failures(&ws);
        let r = refine_search(&cfg, &initial, &ws.splits, &fails, SelectionMode::Kcenter, 5).unwrap();
        assert_eq!(r.selections.len(), 1);
        assert_eq!(r.used.len(), cfg.coreset.budget.min(fails.len()));
        let held = data::exclude(
            &FailureSet {
                parent: fails.name.clone(),
                corruption: None,
                model_hash: 0,
                ids: fails.ids().to_vec(),
            },
            &r.used,
        )
        .unwrap();
        let held_out = fails.select_ids(&held.ids).unwrap();
        check_held_out(FAIL_HELD_OUT, &held_out, &r.used).unwrap();
        assert!(check_held_out(FAIL_HELD_OUT, &fails, &r.used).is_err());
        let again = refine_search(&cfg, &initial, &ws.splits, &fails, SelectionMode::Kcenter, 5).unwrap();
        assert_eq!(again.used, r.used);
        assert_eq!(again.traces[0].content_hash(), r.traces[0].content_hash());
        assert!(matches!(
            refine_search(&cfg, &initial, &ws.splits, &fails.subset(&[]), SelectionMode::Random, 5),
            Err(PipelineError::NoFailures)
        ));
    }

    /// The first dozen corrupted test examples, standing in for a failure set.
    fn pseudo_failures(ws: &Workspace) -> LabeledDataset {
        let idx: Vec<usize> = (0..12).collect();
        ws.corrupted_test.subset(&idx)
    }

    #[test]
    fn single_seed_experiment_is_reproducible() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.genotypes(), b.genotypes());
        assert_eq!(a.runs.len(), Variant::ALL.len());
        for v in Variant::ALL {
            for c in &a.columns {
                let (m, s) = a.summary(v, c);
                if m.is_finite() {
                    assert_eq!(s, 0.0, "{v} {c}");
                }
            }
        }
        let initial = a.runs_of(Variant::Initial).next().unwrap();
        if initial.failures > 0 {
            assert_eq!(initial.accuracy(FAIL_HELD_OUT), Some(0.0));
        }
        let table = a.to_table();
        assert!(table.contains("CF-DARTSE"));
        assert!(table.ends_with(&format!("config {} seed {}\n", cfg.fingerprint(), cfg.seed)));
    }

    #[test]
    fn initial_only_run_times_no_selection() {
        let mut cfg = tiny();
        cfg.pipeline.variants = vec![Variant::Initial];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.runs[0].timings.coreset, 0.0);
        assert!(report.timings_csv().lines().count() == 2);
    }

    #[test]
    fn desk_initial_model_learns_clean_task() {
        let cfg = PipelineConfig::desk_fast();
        let ws = prepare_data(&cfg).unwrap();
        let initial = train_initial(&cfg, &ws.splits, run_seed(cfg.seed, 0)).unwrap();
        let acc = bilevel::accuracy(&initial.model, &ws.splits.test).unwrap();
        assert!(acc >= 0.85, "clean accuracy {acc}");
    }
}
