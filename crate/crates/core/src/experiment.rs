//! Config-driven experiment runner covering the three studies (overlap,
//! modality, dimensionality) plus plain single runs, at phantom scale or on
//! user-supplied NIfTI datasets.
//!
//! Every random choice derives from the master seed, so a (config, seed)
//! pair reproduces identical metric files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{build_spec, count_parameters, ArchitectureSpec, Dimensionality, Family};
use crate::error::{Error, Result};
use crate::fusion::segment_case;
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::sampling::{extract_training_samples, plan_grid, OverlapLevel, TrainingSample};
use crate::stats::{evaluate_case, wilcoxon_signed_rank, SignificanceResult, TestSide};
use crate::train::{split_dataset, train_model, TrainConfig, TrainReport};
use crate::volume::Case;

/// Significance threshold marked with an asterisk in reports.
pub const SIGNIFICANCE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Overlap,
    Modality,
    Dimensionality,
    SingleRun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic phantoms generated on the fly.
    Phantom {
        count: usize,
        dims: [usize; 3],
        noise_sigma: f32,
        modalities: usize,
    },
    /// Directory of NIfTI cases as written by the `phantom` CLI verb:
    /// `<id>_<modality><i>.nii.gz`, `<id>_gt.nii.gz`, `<id>_mask.nii.gz`.
    Directory { path: PathBuf, modalities: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f32>,
    #[serde(default)]
    pub max_samples_per_epoch: Option<usize>,
    #[serde(default)]
    pub fan_in_lr_cap: Option<usize>,
}

fn default_max_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    2
}
fn default_val_fraction() -> f64 {
    0.2
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            val_fraction: default_val_fraction(),
            batch_size: None,
            learning_rate: None,
            max_samples_per_epoch: None,
            fan_in_lr_cap: None,
        }
    }
}

impl TrainSettings {
    fn to_config(&self, family: Family, seed: u64) -> TrainConfig {
        let defaults = TrainConfig::default_for(family);
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            seed,
            max_samples_per_epoch: self.max_samples_per_epoch,
            fan_in_lr_cap: self.fan_in_lr_cap.or(defaults.fan_in_lr_cap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalScheme {
    /// Leave-one-out over all cases.
    Loocv,
    /// Train on all but the last `test_cases` cases, test on those.
    FixedSplit { test_cases: usize },
}

impl Default for EvalScheme {
    fn default() -> Self {
        EvalScheme::FixedSplit { test_cases: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: StudyKind,
    pub families: Vec<Family>,
    pub dims: Vec<Dimensionality>,
    pub overlap_train: OverlapLevel,
    pub overlap_test: OverlapLevel,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub evaluation: EvalScheme,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn modality_count(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Phantom { modalities, .. } => *modalities,
            DatasetConfig::Directory { modalities, .. } => *modalities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("at least one family is required".into()));
        }
        if self.dims.is_empty() {
            return Err(Error::Config(
                "at least one dimensionality is required".into(),
            ));
        }
        if self.study == StudyKind::Modality && self.modality_count() < 2 {
            return Err(Error::Config(
                "the modality study requires a dataset with >= 2 modalities".into(),
            ));
        }
        if let DatasetConfig::Phantom { count, .. } = &self.dataset {
            let min = match self.evaluation {
                EvalScheme::Loocv => 3,
                EvalScheme::FixedSplit { test_cases } => test_cases + 2,
            };
            if *count < min {
                return Err(Error::Config(format!(
                    "dataset of {count} cases is too small for the evaluation scheme (needs >= {min})"
                )));
            }
        }
        Ok(())
    }
}

/// One training/testing configuration in a study's cross-product.
#[derive(Debug, Clone, Serialize)]
pub struct Setting {
    pub label: String,
    pub family: Family,
    pub dim: Dimensionality,
    pub overlap_train: OverlapLevel,
    pub overlap_test: OverlapLevel,
    /// Modality indices fed to the network (None = all).
    pub modality_subset: Option<Vec<usize>>,
}

impl Setting {
    fn modality_label(&self, total: usize) -> String {
        match &self.modality_subset {
            None => format!("all{total}"),
            Some(idx) => format!(
                "m{}",
                idx.iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join("")
            ),
        }
    }
}

/// Build the settings cross-product for a study.
pub fn expand_settings(config: &ExperimentConfig) -> Vec<Setting> {
    let mut settings = Vec::new();
    let base = |family: Family, dim: Dimensionality| -> Setting {
        Setting {
            label: String::new(),
            family,
            dim,
            overlap_train: config.overlap_train,
            overlap_test: config.overlap_test,
            modality_subset: None,
        }
    };
    match config.study {
        StudyKind::Overlap => {
            for &family in &config.families {
                for &dim in &config.dims {
                    for level in [OverlapLevel::Null, OverlapLevel::Medium, OverlapLevel::High] {
                        let mut s = base(family, dim);
                        s.overlap_train = level;
                        s.overlap_test = level;
                        settings.push(s);
                    }
                }
            }
        }
        StudyKind::Modality => {
            let m = config.modality_count();
            for &family in &config.families {
                for &dim in &config.dims {
                    settings.push(base(family, dim)); // all modalities
                    for i in 0..m {
                        let mut s = base(family, dim);
                        s.modality_subset = Some(vec![i]);
                        settings.push(s);
                    }
                }
            }
        }
        StudyKind::Dimensionality | StudyKind::SingleRun => {
            for &family in &config.families {
                for &dim in &config.dims {
                    settings.push(base(family, dim));
                }
            }
        }
    }
    let total = config.modality_count();
    for s in &mut settings {
        s.label = format!(
            "{}_{}_tr-{}_te-{}_{}",
            s.family.name(),
            s.dim.name(),
            s.overlap_train.name(),
            s.overlap_test.name(),
            s.modality_label(total)
        );
    }
    settings
}

/// One metrics.csv row.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub case_id: String,
    pub family: Family,
    pub dim: Dimensionality,
    pub overlap_train: OverlapLevel,
    pub overlap_test: OverlapLevel,
    pub modalities: String,
    pub class_name: String,
    pub dsc: f64,
    pub setting: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SettingSummary {
    pub setting: String,
    pub parameter_count: usize,
    /// class -> (mean, std) over test cases.
    pub per_class: BTreeMap<String, (f64, f64)>,
    pub train_reports: Vec<TrainReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairwiseComparison {
    pub setting_a: String,
    pub setting_b: String,
    pub result: SignificanceResult,
    /// True when p < 0.01 (the asterisk convention in reports).
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProvenanceRecord {
    pub master_seed: u64,
    pub specs: BTreeMap<String, ArchitectureSpec>,
    pub plans: BTreeMap<String, serde_json::Value>,
    pub fold_seeds: BTreeMap<String, Vec<u64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsBundle {
    pub study: StudyKind,
    pub rows: Vec<MetricRow>,
    pub settings: Vec<SettingSummary>,
    pub pairwise: Vec<PairwiseComparison>,
    pub provenance: ProvenanceRecord,
}

/// splitmix64-style derivation of per-fold seeds from the master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)))
        .wrapping_add(0x517cc1b727220a95u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Materialize the dataset (generated phantoms or a NIfTI directory),
/// preprocessed (mask + intensity standardization).
pub fn load_dataset(config: &ExperimentConfig) -> Result<Vec<Case>> {
    let cases = match &config.dataset {
        DatasetConfig::Phantom {
            count,
            dims,
            noise_sigma,
            modalities,
        } => (0..*count)
            .map(|i| {
                generate_phantom(&PhantomConfig::new(
                    derive_seed(config.seed, 0xda7a, i as u64),
                    *dims,
                    *noise_sigma,
                    *modalities,
                ))
            })
            .collect::<Result<Vec<_>>>()?,
        DatasetConfig::Directory { path, modalities } => {
            crate::nifti::load_case_directory(path, *modalities)?
        }
    };
    cases.iter().map(|c| c.preprocessed()).collect()
}

/// Folds as (train indices, test indices) pairs.
fn folds_for(config: &ExperimentConfig, n: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    match config.evaluation {
        EvalScheme::Loocv => {
            if n < 3 {
                return Err(Error::Config(format!(
                    "leave-one-out requires >= 3 cases, got {n}"
                )));
            }
            Ok((0..n)
                .map(|i| ((0..n).filter(|&j| j != i).collect(), vec![i]))
                .collect())
        }
        EvalScheme::FixedSplit { test_cases } => {
            if test_cases == 0 || test_cases + 2 > n {
                return Err(Error::Config(format!(
                    "fixed split with {test_cases} test cases needs >= {} cases, got {n}",
                    test_cases + 2
                )));
            }
            let split = n - test_cases;
            Ok(vec![((0..split).collect(), (split..n).collect())])
        }
    }
}

/// Extract training samples for one case under a spec's geometry.
pub fn samples_for_case(
    case: &Case,
    spec: &ArchitectureSpec,
    level: OverlapLevel,
) -> Result<Vec<TrainingSample>> {
    let plan = plan_grid(case.dims(), spec.output_size, level)?;
    Ok(extract_training_samples(case, &plan, spec.input_size, spec.output_size)?.collect())
}

/// Train one model on the given cases (already modality-selected and
/// preprocessed) and return it with its report.
pub fn train_on_cases(
    spec: &ArchitectureSpec,
    cases: &[Case],
    level: OverlapLevel,
    config: &TrainConfig,
) -> Result<(crate::nn::model::Model, TrainReport)> {
    let (train_cases, val_cases) = split_dataset(cases, config.val_fraction, config.seed)?;
    let mut train_samples = Vec::new();
    for c in &train_cases {
        train_samples.extend(samples_for_case(c, spec, level)?);
    }
    let mut val_samples = Vec::new();
    for c in &val_cases {
        val_samples.extend(samples_for_case(c, spec, level)?);
    }
    let mut model =
        crate::nn::model::Model::instantiate(spec, derive_seed(config.seed, 0x1417, 0))?;
    let report = train_model(&mut model, &train_samples, &val_samples, config)?;
    Ok((model, report))
}

/// Execute the full experiment: every setting, every fold, metrics and
/// pairwise significance.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsBundle> {
    config.validate()?;
    let cases = load_dataset(config)?;
    let settings = expand_settings(config);
    let folds = folds_for(config, cases.len())?;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut provenance = ProvenanceRecord {
        master_seed: config.seed,
        specs: BTreeMap::new(),
        plans: BTreeMap::new(),
        fold_seeds: BTreeMap::new(),
    };

    for (si, setting) in settings.iter().enumerate() {
        let in_channels = setting
            .modality_subset
            .as_ref()
            .map(|v| v.len())
            .unwrap_or_else(|| config.modality_count());
        let spec = build_spec(setting.family, setting.dim, in_channels, None)?;
        provenance.specs.insert(setting.label.clone(), spec.clone());
        let plan_doc =
            plan_grid(cases[0].dims(), spec.output_size, setting.overlap_test)?.provenance_json();
        provenance.plans.insert(setting.label.clone(), plan_doc);

        let mut setting_rows: Vec<MetricRow> = Vec::new();
        let mut reports = Vec::new();
        let mut fold_seeds = Vec::new();
        for (fi, (train_idx, test_idx)) in folds.iter().enumerate() {
            let fold_seed = derive_seed(config.seed, si as u64, fi as u64);
            fold_seeds.push(fold_seed);
            let subset = |idx: &[usize]| -> Result<Vec<Case>> {
                idx.iter()
                    .map(|&i| match &setting.modality_subset {
                        Some(m) => cases[i].select_modalities(m),
                        None => Ok(cases[i].clone()),
                    })
                    .collect()
            };
            let train_cases = subset(train_idx)?;
            let test_cases = subset(test_idx)?;
            let train_config = config.train.to_config(setting.family, fold_seed);
            let (model, report) =
                train_on_cases(&spec, &train_cases, setting.overlap_train, &train_config)?;
            reports.push(report);
            for test in &test_cases {
                let seg = segment_case(&model, test, setting.overlap_test)?;
                let gt = test.require_ground_truth()?;
                let dsc = evaluate_case(&test.case_id, gt, &seg)?;
                for (class_id, value) in &dsc.per_class {
                    let class_name = crate::volume::TissueClass::from_id(*class_id as usize)
                        .expect("tissue class")
                        .name()
                        .to_string();
                    setting_rows.push(MetricRow {
                        case_id: test.case_id.clone(),
                        family: setting.family,
                        dim: setting.dim,
                        overlap_train: setting.overlap_train,
                        overlap_test: setting.overlap_test,
                        modalities: setting.modality_label(config.modality_count()),
                        class_name,
                        dsc: *value,
                        setting: setting.label.clone(),
                    });
                }
            }
        }
        provenance
            .fold_seeds
            .insert(setting.label.clone(), fold_seeds);

        let mut per_class: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for class in ["csf", "gm", "wm"] {
            let vals: Vec<f64> = setting_rows
                .iter()
                .filter(|r| r.class_name == class)
                .map(|r| r.dsc)
                .collect();
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                per_class.insert(class.to_string(), (mean, var.sqrt()));
            }
        }
        summaries.push(SettingSummary {
            setting: setting.label.clone(),
            parameter_count: count_parameters(&spec)?,
            per_class,
            train_reports: reports,
        });
        rows.extend(setting_rows);
    }

    // Pairwise Wilcoxon between settings, paired by (case, class) and
    // pooled over the three tissue classes.
    let mut pairwise = Vec::new();
    for i in 0..settings.len() {
        for j in i + 1..settings.len() {
            let (a, b) = paired_dsc(&rows, &settings[i].label, &settings[j].label);
            if a.is_empty() {
                continue;
            }
            let result = wilcoxon_signed_rank(&a, &b, TestSide::TwoSided)?;
            pairwise.push(PairwiseComparison {
                setting_a: settings[i].label.clone(),
                setting_b: settings[j].label.clone(),
                significant: result.p_value < SIGNIFICANCE_THRESHOLD,
                result,
            });
        }
    }

    Ok(MetricsBundle {
        study: config.study,
        rows,
        settings: summaries,
        pairwise,
        provenance,
    })
}

/// DSC vectors paired by (case, class) for two settings.
fn paired_dsc(rows: &[MetricRow], a: &str, b: &str) -> (Vec<f64>, Vec<f64>) {
    let index = |label: &str| -> BTreeMap<(String, String), f64> {
        rows.iter()
            .filter(|r| r.setting == label)
            .map(|r| ((r.case_id.clone(), r.class_name.clone()), r.dsc))
            .collect()
    };
    let ma = index(a);
    let mb = index(b);
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for (key, &x) in &ma {
        if let Some(&y) = mb.get(key) {
            va.push(x);
            vb.push(y);
        }
    }
    (va, vb)
}
