//! Experiment pipelines: seeded end-to-end runs, comparison tables against
//! the retrained reference, backdoor-defense runs, stability sweeps, and the
//! file formats the CLI emits.
//!
//! Output is fully determined by (config, seeds): sub-seeds are derived with
//! a stable mixer, methods run sequentially, and files are written atomically
//! (temp + rename).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    gen_blobs, poison_backdoor, split_forget_retain, write_dataset_csv, BlobConfig, DataBundle,
    DatagenError, ForgetSpec,
};
use crate::linalg::DenseMatrix;
use crate::metrics::{self, evaluate_model, mix, MetricsError, MetricsReport, ProbeConfig};
use crate::nnet::{save_checkpoint, MlpModel, NnetError};
use crate::unlearn::{
    retrain_oracle, run_method, run_method_with_hook, train_from_scratch, Method, TrainConfig,
    UnlearnConfig, UnlearnError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {detail}")]
    InvalidConfig { detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

impl HarnessError {
    /// CLI exit code: 1 for config problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::InvalidConfig { .. } => 1,
            _ => 2,
        }
    }
}

/// Backdoor-poisoning parameters for the defense pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackdoorConfig {
    pub trigger_dims: Vec<usize>,
    pub trigger_value: f64,
    pub target_label: usize,
    pub fraction: f64,
}

/// Stability-sweep parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityConfig {
    #[serde(default = "default_multipliers")]
    pub budget_multipliers: Vec<usize>,
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
}

fn default_multipliers() -> Vec<usize> {
    vec![1, 5]
}

fn default_sample_every() -> usize {
    25
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig { budget_multipliers: default_multipliers(), sample_every: default_sample_every() }
    }
}

/// Optional pipeline toggles.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Flags {
    #[serde(default)]
    pub emit_features: bool,
    #[serde(default)]
    pub run_backdoor: bool,
    #[serde(default)]
    pub run_stability: bool,
}

/// Everything one experiment needs: data recipe, training recipe, what to
/// forget, the methods to compare, and the seed protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: BlobConfig,
    pub train: TrainConfig,
    pub forget: ForgetSpec,
    pub methods: Vec<UnlearnConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub backdoor: Option<BackdoorConfig>,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
    /// Rotate the forget target (class/subclass/backdoor label) across
    /// seeds, round-robin. Mirrors averaging over distinct forget targets.
    #[serde(default = "default_true")]
    pub rotate_targets: bool,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::InvalidConfig { detail: format!("cannot read {path:?}: {e}") })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::InvalidConfig { detail: format!("cannot parse {path:?}: {e}") })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig { detail: "at least one seed required".into() });
        }
        if self.methods.is_empty() {
            return Err(HarnessError::InvalidConfig { detail: "at least one method required".into() });
        }
        for m in &self.methods {
            if m.total_iterations < 1 {
                return Err(HarnessError::InvalidConfig {
                    detail: format!("{}: total_iterations must be >= 1", m.method.name()),
                });
            }
            let num_layers = self.train.hidden_dims.len() + 1;
            if matches!(m.method, Method::EuK | Method::CfK) && m.k_layers >= num_layers {
                return Err(HarnessError::InvalidConfig {
                    detail: format!("{}: k_layers must be < {num_layers}", m.method.name()),
                });
            }
            m.validate(num_layers)
                .map_err(|e| HarnessError::InvalidConfig { detail: e.to_string() })?;
        }
        if self.train.epochs < 1 {
            return Err(HarnessError::InvalidConfig { detail: "train.epochs must be >= 1".into() });
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(m.method.name()) {
                return Err(HarnessError::InvalidConfig {
                    detail: format!("duplicate method {}", m.method.name()),
                });
            }
        }
        Ok(())
    }

    /// Forget spec for the i-th seed under target rotation.
    pub fn spec_for_seed_index(&self, idx: usize) -> ForgetSpec {
        if !self.rotate_targets {
            return self.forget;
        }
        let num_subclasses = self.data.num_classes * self.data.subclasses_per_class;
        match self.forget {
            ForgetSpec::Class { target } => {
                ForgetSpec::Class { target: (target + idx) % self.data.num_classes }
            }
            ForgetSpec::Subclass { target } => {
                ForgetSpec::Subclass { target: (target + idx) % num_subclasses }
            }
            ForgetSpec::Poisoned => ForgetSpec::Poisoned,
        }
    }
}

/// One table row: a method evaluated under one seed. `report` is empty when
/// the method failed (the run continues without it).
#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub method: String,
    pub seed: u64,
    pub report: Option<MetricsReport>,
}

/// Metric columns, in the fixed emission order.
pub const METRIC_COLUMNS: [&str; 10] =
    ["da", "lp_forget", "lp_retain", "lp_sub", "f1", "nmi", "acc_forget", "acc_retain", "mia", "asr"];

/// Comparison table: per-(method, seed) rows ordered Original, Retrained,
/// then methods, plus per-method means and per-metric winner flags.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    pub method_order: Vec<String>,
    pub means: Vec<MethodMean>,
    pub winners: Vec<Winner>,
}

/// Column-wise means for one method (metrics and absolute diffs).
#[derive(Debug, Clone, Serialize)]
pub struct MethodMean {
    pub method: String,
    pub metrics: Vec<Option<f64>>,
    pub diffs: Vec<Option<f64>>,
}

/// The method(s) with the smallest mean absolute diff for a metric; ties are
/// flagged jointly.
#[derive(Debug, Clone, Serialize)]
pub struct Winner {
    pub metric: String,
    pub methods: Vec<String>,
}

fn report_metric(report: &MetricsReport, column: &str) -> Option<f64> {
    match column {
        "da" => Some(report.da),
        "lp_forget" => report.lp_forget,
        "lp_retain" => Some(report.lp_retain),
        "lp_sub" => report.lp_sub,
        "f1" => Some(report.f1),
        "nmi" => Some(report.nmi),
        "acc_forget" => Some(report.acc_forget),
        "acc_retain" => Some(report.acc_retain),
        "mia" => Some(report.mia),
        "asr" => report.asr,
        _ => None,
    }
}

fn report_diff(report: &MetricsReport, column: &str) -> Option<f64> {
    let d = report.diffs.as_ref()?;
    match column {
        "da" => Some(d.da),
        "lp_forget" => d.lp_forget,
        "lp_retain" => Some(d.lp_retain),
        "lp_sub" => d.lp_sub,
        "f1" => Some(d.f1),
        "nmi" => Some(d.nmi),
        "acc_forget" => Some(d.acc_forget),
        "acc_retain" => Some(d.acc_retain),
        "mia" => Some(d.mia),
        "asr" => d.asr,
        _ => None,
    }
}

impl ComparisonTable {
    fn new(method_order: Vec<String>) -> Self {
        ComparisonTable { rows: Vec::new(), method_order, means: Vec::new(), winners: Vec::new() }
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a TableRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Render the fixed-column CSV (per-seed rows, then per-method means).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed");
        for c in METRIC_COLUMNS {
            out.push_str(&format!(",{c}"));
        }
        for c in METRIC_COLUMNS {
            out.push_str(&format!(",diff_{c}"));
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for method in &self.method_order {
            for row in self.rows_for(method) {
                out.push_str(&format!("{},{}", row.method, row.seed));
                for c in METRIC_COLUMNS {
                    out.push_str(&format!(",{}", cell(row.report.as_ref().and_then(|r| report_metric(r, c)))));
                }
                for c in METRIC_COLUMNS {
                    out.push_str(&format!(",{}", cell(row.report.as_ref().and_then(|r| report_diff(r, c)))));
                }
                out.push('\n');
            }
        }
        for mean in &self.means {
            out.push_str(&format!("{},mean", mean.method));
            for v in &mean.metrics {
                out.push_str(&format!(",{}", cell(*v)));
            }
            for v in &mean.diffs {
                out.push_str(&format!(",{}", cell(*v)));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct MethodBlock<'a> {
            method: &'a str,
            rows: Vec<&'a MetricsReport>,
            mean: Option<&'a MethodMean>,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            methods: Vec<MethodBlock<'a>>,
            winners: &'a [Winner],
        }
        let methods = self
            .method_order
            .iter()
            .map(|m| MethodBlock {
                method: m,
                rows: self.rows_for(m).filter_map(|r| r.report.as_ref()).collect(),
                mean: self.means.iter().find(|x| &x.method == m),
            })
            .collect();
        let doc = Doc { methods, winners: &self.winners };
        serde_json::to_string_pretty(&doc).expect("table serialization cannot fail") + "\n"
    }

    /// Mean absolute diff of one method for one column, over available rows.
    pub fn mean_abs_diff(&self, method: &str, column: &str) -> Option<f64> {
        let values: Vec<f64> =
            self.rows_for(method).filter_map(|r| r.report.as_ref().and_then(|x| report_diff(x, column))).collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    pub fn mean_metric(&self, method: &str, column: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .rows_for(method)
            .filter_map(|r| r.report.as_ref().and_then(|x| report_metric(x, column)))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Fill per-method means and per-metric winner flags (argmin of the mean
/// absolute diff, original and retrained excluded; ties flagged jointly).
pub fn compare_to_retrained(table: &mut ComparisonTable) {
    table.means = table
        .method_order
        .iter()
        .map(|m| MethodMean {
            method: m.clone(),
            metrics: METRIC_COLUMNS.iter().map(|c| table.mean_metric(m, c)).collect(),
            diffs: METRIC_COLUMNS.iter().map(|c| table.mean_abs_diff(m, c)).collect(),
        })
        .collect();

    table.winners = METRIC_COLUMNS
        .iter()
        .filter_map(|&column| {
            let candidates: Vec<(String, f64)> = table
                .method_order
                .iter()
                .filter(|m| m.as_str() != "original" && m.as_str() != "retrained")
                .filter_map(|m| table.mean_abs_diff(m, column).map(|d| (m.clone(), d)))
                .collect();
            let best = candidates.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
            if !best.is_finite() {
                return None;
            }
            let methods: Vec<String> = candidates
                .into_iter()
                .filter(|(_, d)| (d - best).abs() <= 1e-12)
                .map(|(m, _)| m)
                .collect();
            Some(Winner { metric: column.to_string(), methods })
        })
        .collect();
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_table_files(table: &ComparisonTable, dir: &Path) -> Result<(), HarnessError> {
    write_atomic(&dir.join("table.csv"), &table.to_csv())?;
    write_atomic(&dir.join("table.json"), &table.to_json())?;
    Ok(())
}

/// Header plus one row per sample: id, split, partition, features.
pub fn write_features_csv(
    model: &MlpModel,
    bundle: &DataBundle,
    path: &Path,
) -> Result<(), HarnessError> {
    let c = model.feature_dim();
    let mut out = String::from("sample_id,split,partition");
    for i in 0..c {
        out.push_str(&format!(",f_{i}"));
    }
    out.push('\n');
    let all = bundle.all_train_indices();
    let (train_x, _) = bundle.gather_train(&all);
    let train_feats = model.forward(&train_x)?.features;
    let mut partition = vec!["retain"; bundle.train_len()];
    for &i in &bundle.retain_prime_indices {
        partition[i] = "retain_prime";
    }
    for &i in &bundle.forget_indices {
        partition[i] = "forget";
    }
    for i in 0..bundle.train_len() {
        out.push_str(&format!("{i},train,{}", partition[i]));
        for j in 0..c {
            out.push_str(&format!(",{}", train_feats.get(i, j)));
        }
        out.push('\n');
    }
    let test_feats = model.forward(&bundle.test_x)?.features;
    for i in 0..bundle.test_x.rows() {
        out.push_str(&format!("{},test,none", bundle.train_len() + i));
        for j in 0..c {
            out.push_str(&format!(",{}", test_feats.get(i, j)));
        }
        out.push('\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

/// Build the seed's data bundle for the main (class/subclass) pipeline.
fn build_bundle(cfg: &ExperimentConfig, seed: u64, spec: ForgetSpec) -> Result<DataBundle, HarnessError> {
    let bundle = gen_blobs(&cfg.data, seed)?;
    Ok(split_forget_retain(bundle, spec, mix(seed, "retain_prime"))?)
}

/// Build the seed's poisoned bundle for the backdoor pipeline.
fn build_poisoned_bundle(
    cfg: &ExperimentConfig,
    seed: u64,
    seed_idx: usize,
) -> Result<(DataBundle, usize), HarnessError> {
    let bd = cfg.backdoor.as_ref().ok_or(HarnessError::InvalidConfig {
        detail: "backdoor section missing from config".into(),
    })?;
    let target = if cfg.rotate_targets {
        (bd.target_label + seed_idx) % cfg.data.num_classes
    } else {
        bd.target_label
    };
    let bundle = gen_blobs(&cfg.data, seed)?;
    let bundle = poison_backdoor(
        bundle,
        &bd.trigger_dims,
        bd.trigger_value,
        target,
        bd.fraction,
        mix(seed, "poison"),
    )?;
    Ok((bundle, target))
}

/// Models shared by one seed of any pipeline.
pub struct SeedModels {
    pub bundle: DataBundle,
    pub original: MlpModel,
    pub retrained: MlpModel,
}

/// Train the original and retrained models for one seed.
pub fn prepare_seed(cfg: &ExperimentConfig, bundle: DataBundle, seed: u64) -> Result<SeedModels, HarnessError> {
    let original = train_from_scratch(&bundle, &bundle.all_train_indices(), &cfg.train, mix(seed, "theta_o"))?;
    let audit_before = bundle.audit().snapshot();
    let retrained = retrain_oracle(&bundle, &cfg.train, mix(seed, "theta_r"))?;
    let audit_after = bundle.audit().snapshot();
    assert_eq!(audit_after.forget, audit_before.forget, "retraining must never read the forget set");
    Ok(SeedModels { bundle, original, retrained })
}

fn unlearn_seed_for(seed: u64, method: Method) -> u64 {
    mix(mix(seed, "unlearn"), method.name())
}

fn run_methods_for_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    models: &SeedModels,
    reference: &MetricsReport,
    table: &mut ComparisonTable,
) -> Result<(), HarnessError> {
    for m in &cfg.methods {
        let mut m_cfg = m.clone();
        m_cfg.seed = unlearn_seed_for(seed, m.method);
        let before = models.bundle.audit().snapshot();
        let outcome = if m.method == Method::Retrain {
            // The reference model is the method's exact output: same recipe,
            // same seed, zero data access here.
            Ok((models.retrained.clone(), crate::unlearn::PhaseTrace::default()))
        } else {
            run_method(models.original.clone(), &models.bundle, &m_cfg)
        };
        let after = models.bundle.audit().snapshot();
        if m.method != Method::Retrain {
            assert_eq!(
                after.retain_other, before.retain_other,
                "{} read retain samples outside retain_prime",
                m.method.name()
            );
        }
        match outcome {
            Ok((unlearned, trace)) => {
                let report =
                    evaluate_model(&unlearned, &models.bundle, m.method.name(), seed, Some(reference))?;
                write_atomic(
                    &cfg.output_dir.join(format!("trace_{}_{}.csv", m.method.name(), seed)),
                    &trace.to_csv(),
                )?;
                if cfg.flags.emit_features {
                    write_features_csv(
                        &unlearned,
                        &models.bundle,
                        &cfg.output_dir.join(format!("features_{}_{}.csv", m.method.name(), seed)),
                    )?;
                }
                table.rows.push(TableRow { method: m.method.name().into(), seed, report: Some(report) });
            }
            Err(e) => {
                log::warn!("method {} failed on seed {seed}: {e}", m.method.name());
                table.rows.push(TableRow { method: m.method.name().into(), seed, report: None });
            }
        }
    }
    Ok(())
}

fn evaluate_seed_pair(
    cfg: &ExperimentConfig,
    seed: u64,
    models: &SeedModels,
    table: &mut ComparisonTable,
) -> Result<MetricsReport, HarnessError> {
    let mut reference = evaluate_model(&models.retrained, &models.bundle, "retrained", seed, None)?;
    let self_ref = reference.clone();
    reference.fill_diffs(&self_ref);
    let original = evaluate_model(&models.original, &models.bundle, "original", seed, Some(&reference))?;
    if cfg.flags.emit_features {
        write_features_csv(
            &models.original,
            &models.bundle,
            &cfg.output_dir.join(format!("features_original_{seed}.csv")),
        )?;
        write_features_csv(
            &models.retrained,
            &models.bundle,
            &cfg.output_dir.join(format!("features_retrained_{seed}.csv")),
        )?;
    }
    table.rows.push(TableRow { method: "original".into(), seed, report: Some(original) });
    table.rows.push(TableRow { method: "retrained".into(), seed, report: Some(reference.clone()) });
    Ok(reference)
}

fn method_order(cfg: &ExperimentConfig) -> Vec<String> {
    let mut order = vec!["original".to_string(), "retrained".to_string()];
    order.extend(cfg.methods.iter().map(|m| m.method.name().to_string()));
    order
}

/// The main pipeline: per seed, generate data, train the original and
/// retrained models, run every configured method, and evaluate everything
/// against the retrained reference. Partial rows are flushed to disk if a
/// seed fails part-way.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ComparisonTable, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut table = ComparisonTable::new(method_order(cfg));
    for (idx, &seed) in cfg.seeds.iter().enumerate() {
        let spec = cfg.spec_for_seed_index(idx);
        let result: Result<(), HarnessError> = (|| {
            let bundle = build_bundle(cfg, seed, spec)?;
            let models = prepare_seed(cfg, bundle, seed)?;
            if cfg.flags.emit_features {
                write_dataset_csv(&models.bundle, &cfg.output_dir.join(format!("dataset_{seed}.csv")))?;
            }
            let reference = evaluate_seed_pair(cfg, seed, &models, &mut table)?;
            run_methods_for_seed(cfg, seed, &models, &reference, &mut table)
        })();
        if let Err(e) = result {
            compare_to_retrained(&mut table);
            let _ = write_table_files(&table, &cfg.output_dir);
            return Err(e);
        }
    }
    compare_to_retrained(&mut table);
    write_table_files(&table, &cfg.output_dir)?;
    Ok(table)
}

/// Backdoor-defense pipeline: poison, train on the poisoned set, unlearn the
/// poisoned samples with every method, and report ASR / clean accuracy / DA.
pub fn run_backdoor(cfg: &ExperimentConfig) -> Result<ComparisonTable, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut table = ComparisonTable::new(method_order(cfg));
    for (idx, &seed) in cfg.seeds.iter().enumerate() {
        let result: Result<(), HarnessError> = (|| {
            let (bundle, _target) = build_poisoned_bundle(cfg, seed, idx)?;
            let models = prepare_seed(cfg, bundle, seed)?;
            let reference = evaluate_seed_pair(cfg, seed, &models, &mut table)?;
            run_methods_for_seed(cfg, seed, &models, &reference, &mut table)
        })();
        if let Err(e) = result {
            compare_to_retrained(&mut table);
            let _ = write_table_files(&table, &cfg.output_dir);
            return Err(e);
        }
    }
    compare_to_retrained(&mut table);
    write_table_files(&table, &cfg.output_dir)?;
    Ok(table)
}

/// One sampled learning curve.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityCurve {
    pub method: String,
    pub seed: u64,
    pub iterations: Vec<usize>,
    pub lp_retain: Vec<f64>,
    pub lp_forget: Vec<f64>,
}

impl StabilityCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,lp_retain,lp_forget\n");
        for i in 0..self.iterations.len() {
            out.push_str(&format!("{},{:.6},{:.6}\n", self.iterations[i], self.lp_retain[i], self.lp_forget[i]));
        }
        out
    }

    /// Value at an iteration (exact match on a sample point).
    pub fn lp_retain_at(&self, iteration: usize) -> Option<f64> {
        self.iterations.iter().position(|&i| i == iteration).map(|p| self.lp_retain[p])
    }
}

/// Stability sweep: run the alignment method and the reversed-gradient
/// baseline at an extended budget, sampling linear-probe accuracies every
/// `sample_every` iterations (including iteration 0).
pub fn run_stability(cfg: &ExperimentConfig) -> Result<Vec<StabilityCurve>, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let stab = cfg.stability.clone().unwrap_or_default();
    if stab.sample_every == 0 || stab.budget_multipliers.is_empty() {
        return Err(HarnessError::InvalidConfig { detail: "bad stability section".into() });
    }
    let max_mult = *stab.budget_multipliers.iter().max().unwrap();

    let mut curves = Vec::new();
    for method in [Method::Muda, Method::Neggrad] {
        let base = cfg
            .methods
            .iter()
            .find(|m| m.method == method)
            .ok_or_else(|| HarnessError::InvalidConfig {
                detail: format!("stability sweep needs a {} entry in methods", method.name()),
            })?
            .clone();
        for (idx, &seed) in cfg.seeds.iter().enumerate() {
            let spec = cfg.spec_for_seed_index(idx);
            let bundle = build_bundle(cfg, seed, spec)?;
            let original =
                train_from_scratch(&bundle, &bundle.all_train_indices(), &cfg.train, mix(seed, "theta_o"))?;

            let mut m_cfg = base.clone();
            m_cfg.seed = unlearn_seed_for(seed, method);
            m_cfg.total_iterations = base.total_iterations * max_mult;

            let mut curve = StabilityCurve {
                method: method.name().into(),
                seed,
                iterations: Vec::new(),
                lp_retain: Vec::new(),
                lp_forget: Vec::new(),
            };
            let probe_seed = mix(mix(seed, method.name()), "stability_probe");
            {
                let mut hook = |iter: usize, model: &MlpModel| {
                    if iter % stab.sample_every != 0 {
                        return;
                    }
                    let (lp_r, lp_f) = stability_probes(model, &bundle, spec, probe_seed)
                        .expect("stability probes on a live model");
                    curve.iterations.push(iter);
                    curve.lp_retain.push(lp_r);
                    curve.lp_forget.push(lp_f);
                };
                run_method_with_hook(original, &bundle, &m_cfg, &mut hook)?;
            }
            write_atomic(
                &cfg.output_dir.join(format!("stability_{}_{}.csv", method.name(), seed)),
                &curve.to_csv(),
            )?;
            curves.push(curve);
        }
    }
    Ok(curves)
}

/// LP(D_r) and LP(D_f) for a model snapshot, with probe seeds held fixed so
/// curve points are comparable across iterations.
fn stability_probes(
    model: &MlpModel,
    bundle: &DataBundle,
    spec: ForgetSpec,
    probe_seed: u64,
) -> Result<(f64, f64), MetricsError> {
    let (retain_x, retain_y) = bundle.gather_train(&bundle.retain_indices);
    let all = bundle.all_train_indices();
    let (train_x, train_y) = bundle.gather_train(&all);
    let retain_feats = model.forward(&retain_x)?.features;
    let train_feats = model.forward(&train_x)?.features;
    let test_feats = model.forward(&bundle.test_x)?.features;

    let forget_target = match spec {
        ForgetSpec::Class { target } => target,
        _ => {
            return Err(MetricsError::ShapeMismatch {
                context: "stability sweep expects class unlearning".into(),
            })
        }
    };
    let n_test = bundle.test_y.len();
    let retain_idx: Vec<usize> = (0..n_test).filter(|&i| bundle.test_y[i] != forget_target).collect();
    let forget_idx: Vec<usize> = (0..n_test).filter(|&i| bundle.test_y[i] == forget_target).collect();

    let gather = |idx: &[usize]| {
        let mut m = DenseMatrix::zeros(idx.len(), test_feats.cols());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..test_feats.cols() {
                m.set(r, c, test_feats.get(i, c));
            }
            y.push(bundle.test_y[i]);
        }
        (m, y)
    };
    let (er_x, er_y) = gather(&retain_idx);
    let (ef_x, ef_y) = gather(&forget_idx);

    let lp_r = metrics::linear_probe(
        &retain_feats,
        &retain_y,
        &er_x,
        &er_y,
        &ProbeConfig { seed: mix(probe_seed, "lp_retain"), ..ProbeConfig::default() },
    )?;
    let lp_f = metrics::linear_probe(
        &train_feats,
        &train_y,
        &ef_x,
        &ef_y,
        &ProbeConfig { seed: mix(probe_seed, "lp_forget"), ..ProbeConfig::default() },
    )?;
    Ok((lp_r, lp_f))
}

/// Train-only pipeline: write the original model checkpoint per seed.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    for (idx, &seed) in cfg.seeds.iter().enumerate() {
        let spec = cfg.spec_for_seed_index(idx);
        let bundle = build_bundle(cfg, seed, spec)?;
        let model = train_from_scratch(&bundle, &bundle.all_train_indices(), &cfg.train, mix(seed, "theta_o"))?;
        save_checkpoint(&model, &cfg.output_dir.join(format!("theta_o_{seed}.ckpt")))?;
        if cfg.flags.emit_features {
            write_dataset_csv(&bundle, &cfg.output_dir.join(format!("dataset_{seed}.csv")))?;
            write_features_csv(&model, &bundle, &cfg.output_dir.join(format!("features_original_{seed}.csv")))?;
        }
    }
    Ok(())
}

/// Unlearn-only pipeline: per seed, train the original model, run every
/// configured method, and write unlearned checkpoints plus traces.
pub fn run_unlearn(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    for (idx, &seed) in cfg.seeds.iter().enumerate() {
        let spec = cfg.spec_for_seed_index(idx);
        let bundle = build_bundle(cfg, seed, spec)?;
        let original =
            train_from_scratch(&bundle, &bundle.all_train_indices(), &cfg.train, mix(seed, "theta_o"))?;
        save_checkpoint(&original, &cfg.output_dir.join(format!("theta_o_{seed}.ckpt")))?;
        for m in &cfg.methods {
            let mut m_cfg = m.clone();
            m_cfg.seed = unlearn_seed_for(seed, m.method);
            let outcome = if m.method == Method::Retrain {
                retrain_oracle(&bundle, &cfg.train, mix(seed, "theta_r"))
                    .map(|m| (m, crate::unlearn::PhaseTrace::default()))
            } else {
                run_method(original.clone(), &bundle, &m_cfg)
            };
            match outcome {
                Ok((unlearned, trace)) => {
                    save_checkpoint(
                        &unlearned,
                        &cfg.output_dir.join(format!("theta_{}_{}.ckpt", m.method.name(), seed)),
                    )?;
                    write_atomic(
                        &cfg.output_dir.join(format!("trace_{}_{}.csv", m.method.name(), seed)),
                        &trace.to_csv(),
                    )?;
                }
                Err(e) => log::warn!("method {} failed on seed {seed}: {e}", m.method.name()),
            }
        }
    }
    Ok(())
}
