//! Experiment configuration and the stages that chain the library into the
//! full study: train, snapshot, fit, compress, evaluate, sweep over
//! dictionary size and rank, and compare against pruning.
//!
//! All randomness derives from one global seed through named sub-seeds, so
//! each stage can be rerun in isolation. Every file written carries the
//! hash of the resolved configuration.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_image_set, split_train_val, verify_sha256, ImageSet};
use crate::dictionary::{Dictionary, DictionaryKind, DEFAULT_RBF_EPSILON};
use crate::edmd::{compression_ratio, factors_pay_off, original_intermediate_params, KoopmanModel, ParamAccounting};
use crate::error::{Error, PathContext, Result};
use crate::linalg::{cumulative_rank, norm2};
use crate::mlp::{
    accuracy_of, argmax, collect_snapshots, evaluate, filter_correct, train, EpochMetrics, Mlp, SnapshotSet, Taps,
    TrainConfig, DEFAULT_LAYER_SIZES,
};
use crate::pruning::{finetune, prune, PruneMethod, PruneSpec, UnitSelection, FINETUNE_EPOCHS};

pub const DEFAULT_BIN_WIDTH: f64 = 0.02;
pub const STALE_MARKER: &str = "STALE";
/// Column and file names excluded from determinism audits.
pub const TIMING_COLUMN: &str = "wall_time_s";
pub const TIMINGS_FILE: &str = "timings.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub snapshots: SnapshotConfig,
    #[serde(default)]
    pub dictionary: DictionarySpec,
    #[serde(default)]
    pub svd: SvdConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub tt: TtConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Hex SHA-256 keyed by `train_images`, `train_labels`, `test_images`, `test_labels`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sha256: BTreeMap<String, String>,
    /// Held out from snapshot fitting and used to pick sweep settings.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Train the network on the whole training file, validation part included.
    #[serde(default = "default_true")]
    pub train_on_validation: bool,
}

fn default_true() -> bool {
    true
}

fn default_val_fraction() -> f64 {
    0.2
}

impl DatasetConfig {
    /// The four standard IDX file names inside `dir`.
    pub fn standard(name: impl Into<String>, dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            name: name.into(),
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
            sha256: BTreeMap::new(),
            val_fraction: default_val_fraction(),
            train_on_validation: true,
        }
    }

    fn files(&self) -> [(&'static str, &Path); 4] {
        [
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("test_images", &self.test_images),
            ("test_labels", &self.test_labels),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub layer_sizes: Vec<usize>,
    pub last_pre_activation: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layer_sizes: DEFAULT_LAYER_SIZES.to_vec(),
            last_pre_activation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnapshotConfig {
    /// Keep only samples the trained network classifies correctly.
    pub correct_only: bool,
    /// Seeded subset of at most this many pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pairs: Option<usize>,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        Self {
            correct_only: true,
            max_pairs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionarySpec {
    pub kind: DictionaryKind,
    /// Total size `L` (RBF dictionaries).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    /// Maximum degree (monomial dictionaries).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_degree: Option<u32>,
    pub epsilon: f64,
    pub with_constant: bool,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            kind: DictionaryKind::RbfPlusIdentity,
            len: Some(231),
            max_degree: None,
            epsilon: DEFAULT_RBF_EPSILON,
            with_constant: false,
        }
    }
}

impl DictionarySpec {
    pub fn rbf(len: usize) -> Self {
        Self {
            len: Some(len),
            ..Self::default()
        }
    }

    pub fn monomial(max_degree: u32) -> Self {
        Self {
            kind: DictionaryKind::MonomialTotalDegree,
            len: None,
            max_degree: Some(max_degree),
            ..Self::default()
        }
    }

    /// Builds the dictionary; RBF centers are drawn from `inputs`.
    pub fn build(&self, inputs: ArrayView2<f64>, seed: u64) -> Result<Dictionary> {
        let dim = inputs.ncols();
        match self.kind {
            DictionaryKind::RbfPlusIdentity => {
                let len = self.len.ok_or_else(|| Error::arg("an RBF dictionary needs `len`"))?;
                if self.with_constant {
                    Dictionary::rbf_with_constant(len, inputs, self.epsilon, seed)
                } else {
                    Dictionary::rbf(len, inputs, self.epsilon, seed)
                }
            }
            DictionaryKind::MonomialTotalDegree => Dictionary::monomial_total_degree(
                dim,
                self.max_degree.ok_or_else(|| Error::arg("a monomial dictionary needs `max_degree`"))?,
            ),
            DictionaryKind::MonomialPerVariable => Dictionary::monomial_per_variable(
                dim,
                self.max_degree.ok_or_else(|| Error::arg("a monomial dictionary needs `max_degree`"))?,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvdConfig {
    /// Rank kept by the `compress` stage; none keeps the dense map.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Cumulative contribution reported by the singular-value report.
    pub report_threshold: f64,
    /// Sum squared singular values (energy) rather than the values themselves.
    pub squared: bool,
    pub accounting: ParamAccounting,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            rank: None,
            report_threshold: 0.99,
            squared: true,
            accounting: ParamAccounting::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Dictionary sizes; the kind and width come from `[dictionary]`.
    pub lens: Vec<usize>,
    pub ranks: Vec<usize>,
    /// Also evaluate the uncompressed map for every size.
    pub include_full: bool,
    pub bin_width: f64,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lens: (21..=120).collect(),
            ranks: (1..=20).collect(),
            include_full: true,
            bin_width: DEFAULT_BIN_WIDTH,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub ratios: Vec<f64>,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub selection: UnitSelection,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratios: (1..=20).map(|i| i as f64 * 0.05).collect(),
            finetune: true,
            finetune_epochs: FINETUNE_EPOCHS,
            selection: UnitSelection::Even,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtConfig {
    pub n_max: Vec<u32>,
    pub tol: f64,
    pub snapshots: usize,
    pub test_points: usize,
    /// Center hidden states and divide by `spread` standard deviations before lifting.
    pub standardize: bool,
    pub spread: f64,
}

impl Default for TtConfig {
    fn default() -> Self {
        Self {
            n_max: vec![1, 2, 3, 4],
            tol: crate::tt::DEFAULT_TT_TOL,
            snapshots: 10_000,
            test_points: 100,
            standardize: true,
            spread: crate::tt::DEFAULT_TT_SPREAD,
        }
    }
}

/// `u64` from the first 8 bytes of `SHA-256("{global}/{name}")`.
pub fn sub_seed(global: u64, name: &str) -> u64 {
    let digest = Sha256::digest(format!("{global}/{name}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

impl ExperimentConfig {
    pub fn new(output_dir: impl Into<PathBuf>, dataset: DatasetConfig) -> Self {
        Self {
            seed: 0,
            output_dir: output_dir.into(),
            dataset,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            snapshots: SnapshotConfig::default(),
            dictionary: DictionarySpec::default(),
            svd: SvdConfig::default(),
            sweep: SweepConfig::default(),
            prune: PruneConfig::default(),
            tt: TtConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Resolved TOML with the output directory blanked, so that the same
    /// experiment written to two places hashes (and reads) the same.
    pub fn resolved_toml(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::from(".");
        c.to_toml()
    }

    /// SHA-256 of [`resolved_toml`](Self::resolved_toml), hex.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.resolved_toml()?.as_bytes())))
    }

    pub fn sub_seed(&self, name: &str) -> u64 {
        sub_seed(self.seed, name)
    }

    /// Field checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dataset.val_fraction) {
            return Err(Error::arg(format!("val_fraction {} not in [0, 1)", self.dataset.val_fraction)));
        }
        for key in self.dataset.sha256.keys() {
            if !self.dataset.files().iter().any(|(k, _)| k == key) {
                return Err(Error::arg(format!("unknown checksum key `{key}`")));
            }
        }
        if self.network.layer_sizes.len() < 3 || self.network.layer_sizes.contains(&0) {
            return Err(Error::arg("layer_sizes needs at least three positive sizes"));
        }
        self.train.validate()?;
        if self.snapshots.max_pairs == Some(0) {
            return Err(Error::arg("max_pairs must be positive"));
        }
        let d = &self.dictionary;
        match d.kind {
            DictionaryKind::RbfPlusIdentity if d.len.is_none() => return Err(Error::arg("RBF dictionary needs `len`")),
            DictionaryKind::MonomialTotalDegree | DictionaryKind::MonomialPerVariable if d.max_degree.is_none() => {
                return Err(Error::arg("monomial dictionary needs `max_degree`"))
            }
            _ => {}
        }
        if !(d.epsilon > 0.0) {
            return Err(Error::arg("RBF epsilon must be positive"));
        }
        if self.svd.rank == Some(0) || self.sweep.ranks.contains(&0) {
            return Err(Error::arg("SVD ranks start at 1"));
        }
        if !(self.svd.report_threshold > 0.0 && self.svd.report_threshold <= 1.0) {
            return Err(Error::arg("report_threshold must be in (0, 1]"));
        }
        if self.sweep.lens.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::arg("sweep lens must be nondecreasing"));
        }
        if !(self.sweep.bin_width > 0.0) || self.sweep.workers == 0 {
            return Err(Error::arg("bin_width and workers must be positive"));
        }
        if self.prune.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::arg("prune ratios must lie in (0, 1]"));
        }
        if self.tt.n_max.contains(&0) || !(self.tt.tol > 0.0 && self.tt.tol <= 1.0) {
            return Err(Error::arg("tt n_max must be positive and tol in (0, 1]"));
        }
        if !(self.tt.spread > 0.0) {
            return Err(Error::arg("tt spread must be positive"));
        }
        if self.tt.snapshots == 0 || self.tt.test_points == 0 {
            return Err(Error::arg("tt snapshot and test counts must be positive"));
        }
        Ok(())
    }

    /// Fails unless every dataset file exists (and matches its checksum).
    pub fn check_files(&self) -> Result<()> {
        for (key, path) in self.dataset.files() {
            if !path.is_file() {
                return Err(Error::arg(format!("dataset file `{}` ({key}) not found", path.display())));
            }
            if let Some(expected) = self.dataset.sha256.get(key) {
                verify_sha256(path, expected)?;
            }
        }
        Ok(())
    }

    pub fn taps(&self, net: &Mlp) -> Result<Taps> {
        let mut taps = Taps::standard(net)?;
        taps.last_pre_activation = self.network.last_pre_activation;
        Ok(taps)
    }

    fn train_config(&self, name: &str) -> TrainConfig {
        TrainConfig {
            seed: self.sub_seed(name),
            ..self.train.clone()
        }
    }
}

/// Training split, optional validation split, test set. `network_train`
/// is what the network is trained on: the whole training file, or `train`
/// alone when validation data must stay unseen.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: ImageSet,
    pub val: Option<ImageSet>,
    pub test: ImageSet,
    network_train: Option<ImageSet>,
}

impl Datasets {
    pub fn network_train(&self) -> &ImageSet {
        self.network_train.as_ref().unwrap_or(&self.train)
    }
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    config.check_files()?;
    let ds = &config.dataset;
    let full = load_image_set(&ds.train_images, &ds.train_labels, format!("{}-train", ds.name))?;
    let test = load_image_set(&ds.test_images, &ds.test_labels, format!("{}-test", ds.name))?;
    if ds.val_fraction > 0.0 {
        let (train, val) = split_train_val(&full, ds.val_fraction, config.sub_seed("split"))?;
        Ok(Datasets {
            train,
            val: Some(val),
            test,
            network_train: ds.train_on_validation.then_some(full),
        })
    } else {
        Ok(Datasets {
            train: full,
            val: None,
            test,
            network_train: None,
        })
    }
}

pub fn train_network(config: &ExperimentConfig, set: &ImageSet) -> Result<(Mlp, Vec<EpochMetrics>)> {
    let mut net = Mlp::new(&config.network.layer_sizes, config.sub_seed("init"))?;
    let history = train(&mut net, set, &config.train_config("train"))?;
    Ok((net, history))
}

/// Snapshot pairs from `set`, filtered and capped per config.
pub fn make_snapshots(config: &ExperimentConfig, net: &Mlp, taps: &Taps, set: &ImageSet) -> Result<SnapshotSet> {
    let source = if config.snapshots.correct_only {
        filter_correct(net, set)?
    } else {
        set.clone()
    };
    let snaps = collect_snapshots(net, &source, taps)?;
    Ok(match config.snapshots.max_pairs {
        Some(cap) if cap < snaps.len() => snaps.select(&seeded_subset(snaps.len(), cap, config.sub_seed("snapshots"))),
        _ => snaps,
    })
}

/// `count` sorted distinct indices below `n`.
pub fn seeded_subset(n: usize, count: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(count.min(n));
    idx.sort_unstable();
    idx
}

pub fn fit_model(config: &ExperimentConfig, spec: &DictionarySpec, snaps: &SnapshotSet) -> Result<KoopmanModel> {
    let dict = spec.build(snaps.x.view(), config.sub_seed("centers"))?;
    KoopmanModel::fit(dict, snaps)
}

/// First-tap states and true last-tap states of a labeled set, computed once
/// so that many maps can be scored against them.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub first: Array2<f64>,
    pub last: Array2<f64>,
    pub labels: Vec<u8>,
}

impl EvalSet {
    pub fn new(net: &Mlp, taps: &Taps, set: &ImageSet) -> Result<Self> {
        let (first, last) = net.taps_batch(set.images.view(), taps)?;
        Ok(Self {
            first,
            last,
            labels: set.labels.clone(),
        })
    }

    /// Accuracy of the surrogate and mean prediction error, given mapped states.
    pub fn score(&self, net: &Mlp, taps: &Taps, predicted_last: &Array2<f64>) -> Result<(f64, f64)> {
        let logits = net.head(taps, predicted_last.view())?;
        let classes: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
        let err: f64 = (&self.last - predicted_last).rows().into_iter().map(|r| norm2(r)).sum();
        Ok((accuracy_of(&classes, &self.labels), err / self.labels.len().max(1) as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub dictionary: String,
    pub len: usize,
    pub rank: Option<usize>,
    pub param_count: usize,
    pub compression_ratio: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub prediction_error: f64,
}

pub fn evaluate_model(
    config: &ExperimentConfig,
    net: &Mlp,
    taps: &Taps,
    model: &KoopmanModel,
    val: Option<&EvalSet>,
    test: &EvalSet,
) -> Result<ModelMetrics> {
    let params = model.param_count(config.svd.accounting);
    let score = |set: &EvalSet| -> Result<(f64, f64)> { set.score(net, taps, &model.predict_batch(set.first.view())?) };
    let (test_accuracy, prediction_error) = score(test)?;
    let val_accuracy = val.map(|v| score(v).map(|s| s.0)).transpose()?;
    Ok(ModelMetrics {
        dictionary: model.dictionary().label(),
        len: model.lifted_len(),
        rank: model.rank(),
        param_count: params,
        compression_ratio: compression_ratio(params, original_intermediate_params(net, taps))?,
        val_accuracy,
        test_accuracy,
        prediction_error,
    })
}

/// One cell of the (L, s) grid; `rank: None` is the uncompressed map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub len: usize,
    pub rank: Option<usize>,
    pub param_count: usize,
    pub compression_ratio: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub prediction_error: f64,
    pub wall_time_s: f64,
    /// Factored storage would exceed the dense map; excluded from the frontier.
    pub blank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularValueCount {
    pub len: usize,
    pub count: usize,
    pub sigma_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub config_hash: String,
    /// Sorted by `(len, rank)` with the uncompressed cell first.
    pub rows: Vec<SweepRow>,
    pub singular_values: Vec<SingularValueCount>,
}

/// Smallest `s` whose leading singular values reach `threshold` of the total.
pub fn singular_value_count(sigma: &Array1<f64>, threshold: f64, squared: bool) -> usize {
    cumulative_rank(sigma.view(), threshold, squared)
}

/// Scores every `(L, s)` cell. Each `L` is one job: fit once, decompose
/// once, lift the evaluation states once, then apply each rank.
pub fn run_sweep(
    config: &ExperimentConfig,
    net: &Mlp,
    taps: &Taps,
    snaps: &SnapshotSet,
    val: &EvalSet,
    test: &EvalSet,
) -> Result<SweepResult> {
    if config.dictionary.kind != DictionaryKind::RbfPlusIdentity {
        return Err(Error::Unsupported("sweeps vary `len` and need an RBF dictionary".into()));
    }
    let d = snaps.dim();
    if let Some(&bad) = config.sweep.ranks.iter().find(|&&s| s > d) {
        return Err(Error::arg(format!("rank {bad} exceeds D = {d}")));
    }
    if val.labels.is_empty() {
        return Err(Error::arg("a sweep needs validation data (val_fraction > 0)"));
    }
    let original = original_intermediate_params(net, taps);
    let job = |len: usize| -> Result<(Vec<SweepRow>, SingularValueCount)> {
        let started = Instant::now();
        let spec = DictionarySpec {
            len: Some(len),
            ..config.dictionary.clone()
        };
        let full = fit_model(config, &spec, snaps)?;
        let svd = full.svd()?;
        let phi_val = full.dictionary().lift_batch(val.first.view())?;
        let phi_test = full.dictionary().lift_batch(test.first.view())?;
        let shared = started.elapsed().as_secs_f64();
        let mut rows = Vec::new();
        let ranks = config.sweep.include_full.then_some(None).into_iter().chain(config.sweep.ranks.iter().map(|&s| Some(s)));
        for rank in ranks {
            let cell = Instant::now();
            let model = match rank {
                None => full.clone(),
                Some(s) => full.with_svd(&svd, s)?,
            };
            let (val_accuracy, _) = val.score(net, taps, &model.apply_lifted(phi_val.view())?)?;
            let (test_accuracy, prediction_error) = test.score(net, taps, &model.apply_lifted(phi_test.view())?)?;
            let params = model.param_count(config.svd.accounting);
            rows.push(SweepRow {
                len,
                rank,
                param_count: params,
                compression_ratio: compression_ratio(params, original)?,
                val_accuracy,
                test_accuracy,
                prediction_error,
                wall_time_s: shared + cell.elapsed().as_secs_f64(),
                blank: rank.is_some_and(|s| !factors_pay_off(len, d, s)),
            });
        }
        let count = SingularValueCount {
            len,
            count: singular_value_count(&svd.s, config.svd.report_threshold, config.svd.squared),
            sigma_max: svd.s.first().copied().unwrap_or(0.0),
        };
        Ok((rows, count))
    };

    let lens = &config.sweep.lens;
    let outputs = run_jobs(lens.len(), config.sweep.workers, |i| job(lens[i]).map_err(|e| e.in_stage("sweep")))?;
    let mut rows = Vec::new();
    let mut singular_values = Vec::new();
    for (r, c) in outputs {
        rows.extend(r);
        singular_values.push(c);
    }
    rows.sort_by(|a, b| (a.len, a.rank).cmp(&(b.len, b.rank)));
    rows.dedup_by(|a, b| (a.len, a.rank) == (b.len, b.rank));
    singular_values.dedup_by_key(|c| c.len);
    Ok(SweepResult {
        config_hash: config.hash()?,
        rows,
        singular_values,
    })
}

/// Runs `f(0..n)` on up to `workers` threads; results come back in index order.
fn run_jobs<R: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<R>>>> = (0..n).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("no poisoned slots") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("no poisoned slots").expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint {
    /// Upper edge of the ratio bin.
    pub bin_upper: f64,
    pub row: SweepRow,
}

/// Flat CSV form of a [`FrontierPoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRecord {
    pub bin_upper: f64,
    pub len: usize,
    pub rank: Option<usize>,
    pub param_count: usize,
    pub compression_ratio: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub prediction_error: f64,
}

impl From<&FrontierPoint> for FrontierRecord {
    fn from(p: &FrontierPoint) -> Self {
        Self {
            bin_upper: p.bin_upper,
            len: p.row.len,
            rank: p.row.rank,
            param_count: p.row.param_count,
            compression_ratio: p.row.compression_ratio,
            val_accuracy: p.row.val_accuracy,
            test_accuracy: p.row.test_accuracy,
            prediction_error: p.row.prediction_error,
        }
    }
}

fn bin_of(ratio: f64, width: f64) -> usize {
    // tolerance keeps exact multiples of the width in their own bin
    ((ratio / width) - 1e-9).ceil().max(0.0) as usize
}

/// Best validation accuracy among cells whose ratio falls in a bin or any
/// lower one (so frontier accuracy never drops as the budget grows). Ties
/// prefer fewer parameters, then smaller `L`, then smaller rank. Blank
/// cells are skipped; one point per occupied bin.
pub fn select_best_per_ratio(rows: &[SweepRow], bin_width: f64) -> Result<Vec<FrontierPoint>> {
    if !(bin_width > 0.0) {
        return Err(Error::arg("bin width must be positive"));
    }
    let mut cells: Vec<&SweepRow> = rows.iter().filter(|r| !r.blank).collect();
    if cells.is_empty() {
        return Err(Error::arg("no sweep rows to select from"));
    }
    cells.sort_by(|a, b| a.compression_ratio.total_cmp(&b.compression_ratio));
    let better = |a: &SweepRow, b: &SweepRow| {
        a.val_accuracy > b.val_accuracy
            || (a.val_accuracy == b.val_accuracy && (a.param_count, a.len, a.rank) < (b.param_count, b.len, b.rank))
    };
    let mut out: Vec<FrontierPoint> = Vec::new();
    let mut best: Option<&SweepRow> = None;
    let mut i = 0;
    while i < cells.len() {
        let bin = bin_of(cells[i].compression_ratio, bin_width);
        while i < cells.len() && bin_of(cells[i].compression_ratio, bin_width) == bin {
            if best.is_none_or(|b| better(cells[i], b)) {
                best = Some(cells[i]);
            }
            i += 1;
        }
        out.push(FrontierPoint {
            bin_upper: bin as f64 * bin_width,
            row: best.expect("bin holds a row").clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub target_ratio: f64,
    pub compression_ratio: f64,
    pub test_accuracy: f64,
}

pub const KOOPMAN_METHOD: &str = "koopman";

pub fn method_name(method: PruneMethod, finetuned: bool) -> String {
    let base = match method {
        PruneMethod::Unstructured => "unstructured",
        PruneMethod::Structured => "structured",
    };
    if finetuned {
        format!("{base}-finetuned")
    } else {
        base.to_string()
    }
}

/// Pruning baselines at every configured ratio, optionally fine-tuned, next
/// to the proposed method's frontier. Ratios structured pruning cannot
/// reach are skipped.
pub fn compare_methods(
    config: &ExperimentConfig,
    net: &Mlp,
    taps: &Taps,
    train_set: &ImageSet,
    test: &ImageSet,
    frontier: &[FrontierPoint],
) -> Result<Vec<ComparisonRow>> {
    let scope = taps.inner_layers();
    let original = original_intermediate_params(net, taps);
    let mut rows: Vec<ComparisonRow> = frontier
        .iter()
        .map(|p| ComparisonRow {
            method: KOOPMAN_METHOD.into(),
            target_ratio: p.bin_upper,
            compression_ratio: p.row.compression_ratio,
            test_accuracy: p.row.test_accuracy,
        })
        .collect();
    for method in [PruneMethod::Unstructured, PruneMethod::Structured] {
        for &ratio in &config.prune.ratios {
            let spec = PruneSpec {
                selection: config.prune.selection,
                ..PruneSpec::new(method, ratio, scope.clone())
            };
            let pruned = match prune(net, &spec) {
                Ok(p) => p,
                Err(Error::Argument(_)) if method == PruneMethod::Structured => continue,
                Err(e) => return Err(e.in_stage("prune")),
            };
            let achieved = compression_ratio(pruned.scoped_params, original)?;
            rows.push(ComparisonRow {
                method: method_name(method, false),
                target_ratio: ratio,
                compression_ratio: achieved,
                test_accuracy: evaluate(&pruned.net, test)?,
            });
            if config.prune.finetune {
                let mut tuned = pruned.net.clone();
                let tc = TrainConfig {
                    epochs: config.prune.finetune_epochs,
                    ..config.train_config("finetune")
                };
                finetune(&mut tuned, train_set, &tc, pruned.mask.as_ref()).map_err(|e| e.in_stage("finetune"))?;
                rows.push(ComparisonRow {
                    method: method_name(method, true),
                    target_ratio: ratio,
                    compression_ratio: compression_ratio(crate::pruning::nonzero_params(&tuned, scope.clone()), original)?,
                    test_accuracy: evaluate(&tuned, test)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Accuracy of `method` at `ratio`, interpolated linearly between its
/// nearest points; `None` outside the method's ratio range.
pub fn accuracy_at(rows: &[ComparisonRow], method: &str, ratio: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| (r.compression_ratio, r.test_accuracy))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let hi = pts.iter().position(|p| p.0 >= ratio)?;
    if pts[hi].0 == ratio || hi == 0 {
        return (pts[hi].0 == ratio).then_some(pts[hi].1);
    }
    let (a, b) = (pts[hi - 1], pts[hi]);
    Some(a.1 + (b.1 - a.1) * (ratio - a.0) / (b.0 - a.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtRow {
    pub n_max: u32,
    /// Mean L2 error of the predicted last-tap states.
    pub prediction_error: f64,
    pub bytes: usize,
    pub pinv_max_rank: usize,
    pub output_max_rank: usize,
    /// `8 (N_max + 1)^D` bytes for the dense dictionary alone.
    pub dense_dictionary_bytes: f64,
    pub wall_time_s: f64,
}

/// Tensor-train predictors for each configured `N_max`, fitted on a seeded
/// subset of snapshots and scored on a seeded subset of test points.
pub fn run_tt(config: &ExperimentConfig, net: &Mlp, taps: &Taps, snaps: &SnapshotSet, test: &ImageSet) -> Result<Vec<TtRow>> {
    use crate::tt::TtKoopmanPredictor;
    let tc = &config.tt;
    let fit_set = snaps.select(&seeded_subset(snaps.len(), tc.snapshots, config.sub_seed("tt-snapshots")));
    let probe = test.subset(&seeded_subset(test.len(), tc.test_points, config.sub_seed("tt-test")), "tt-test");
    let eval = EvalSet::new(net, taps, &probe)?;
    let d = fit_set.dim();
    tc.n_max
        .iter()
        .map(|&n| {
            let started = Instant::now();
            let pred = if tc.standardize {
                TtKoopmanPredictor::fit_standardized(fit_set.x.view(), fit_set.y.view(), n, tc.tol, tc.spread)?
            } else {
                TtKoopmanPredictor::fit(fit_set.x.view(), fit_set.y.view(), n, tc.tol)?
            };
            let mut err = 0.0;
            for (x, y) in eval.first.rows().into_iter().zip(eval.last.rows()) {
                err += norm2((&pred.predict(x)? - &y).view());
            }
            let report = pred.memory_report();
            Ok(TtRow {
                n_max: n,
                prediction_error: err / eval.labels.len() as f64,
                bytes: report.total_bytes(),
                pinv_max_rank: report.pinv_ranks.iter().copied().max().unwrap_or(1),
                output_max_rank: report.output_ranks.iter().copied().max().unwrap_or(1),
                dense_dictionary_bytes: 8.0 * (n as f64 + 1.0).powi(d as i32),
                wall_time_s: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

// ---- persistence ----

/// Output directory of one configuration. A failed stage leaves a
/// `STALE` marker naming it; a successful one clears the marker.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
}

impl RunDir {
    pub fn create(config: &ExperimentConfig) -> Result<Self> {
        let root = config.output_dir.clone();
        std::fs::create_dir_all(&root).at(&root)?;
        let dir = Self {
            root,
            config_hash: config.hash()?,
        };
        let text = format!("# config_hash = \"{}\"\n{}", dir.config_hash, config.resolved_toml()?);
        dir.write("config.toml", text.as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).at(&path)
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        #[derive(Serialize)]
        struct Tagged<'a, S> {
            config_hash: &'a str,
            #[serde(flatten)]
            value: &'a S,
        }
        let text = serde_json::to_string_pretty(&Tagged {
            config_hash: &self.config_hash,
            value,
        })?;
        self.write(name, text.as_bytes())
    }

    pub fn write_csv<S: Serialize>(&self, name: &str, rows: &[S]) -> Result<()> {
        self.write(name, &csv_bytes(&self.config_hash, rows)?)
    }

    /// Rewrites `manifest.json`: the config hash and the SHA-256 of every
    /// other file, so binary artifacts are tied to the configuration too.
    /// Wall-clock fields are left out of the digests (see [`canonical_content`]).
    pub fn refresh_manifest(&self) -> Result<()> {
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&self.root).at(&self.root)? {
            let path = entry.at(&self.root)?.path();
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if path.is_file() && ![MANIFEST_FILE, TIMINGS_FILE, STALE_MARKER].contains(&name.as_str()) {
                let content = canonical_content(&name, &std::fs::read(&path).at(&path)?)?;
                files.insert(name, hex::encode(Sha256::digest(content)));
            }
        }
        #[derive(Serialize)]
        struct Manifest {
            files: BTreeMap<String, String>,
        }
        self.write_json(MANIFEST_FILE, &Manifest { files })
    }

    /// Runs `body` as stage `stage`, flagging the directory on failure.
    pub fn stage<R>(&self, stage: &'static str, body: impl FnOnce() -> Result<R>) -> Result<R> {
        match body() {
            Ok(r) => {
                let marker = self.path(STALE_MARKER);
                if marker.exists() {
                    std::fs::remove_file(&marker).at(&marker)?;
                }
                self.refresh_manifest()?;
                Ok(r)
            }
            Err(e) => {
                let e = match e {
                    Error::Stage { .. } => e,
                    other => other.in_stage(stage),
                };
                let _ = self.write(STALE_MARKER, format!("{e}\n").as_bytes());
                Err(e)
            }
        }
    }
}

/// CSV with a leading `# config_hash = "<hex>"` comment line.
pub fn csv_bytes<S: Serialize>(config_hash: &str, rows: &[S]) -> Result<Vec<u8>> {
    let mut out = format!("# config_hash = \"{config_hash}\"\n").into_bytes();
    let mut w = csv::Writer::from_writer(&mut out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    drop(w);
    Ok(out)
}

/// Inverse of [`csv_bytes`]: the hash (if present) and the rows.
pub fn parse_csv<D: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<(Option<String>, Vec<D>)> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
    let hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash = \""))
        .and_then(|l| l.strip_suffix('"'))
        .map(str::to_owned);
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let rows = r.deserialize().collect::<std::result::Result<Vec<D>, _>>()?;
    Ok((hash, rows))
}

pub fn sweep_to_csv(result: &SweepResult) -> Result<Vec<u8>> {
    csv_bytes(&result.config_hash, &result.rows)
}

/// Reads sweep rows back; singular-value counts live in their own file.
pub fn sweep_from_csv(bytes: &[u8]) -> Result<SweepResult> {
    let (hash, rows) = parse_csv(bytes)?;
    Ok(SweepResult {
        config_hash: hash.ok_or_else(|| Error::Format("sweep CSV lacks its config hash".into()))?,
        rows,
        singular_values: Vec::new(),
    })
}

/// Compares two run directories file by file, ignoring wall-clock timings.
pub fn audit_determinism(a: &Path, b: &Path) -> Result<usize> {
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in std::fs::read_dir(dir).at(dir)? {
            let entry = entry.at(dir)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.path().is_file() && name != TIMINGS_FILE && name != STALE_MARKER {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    };
    let (names_a, names_b) = (list(a)?, list(b)?);
    if names_a != names_b {
        return Err(Error::Determinism(format!("file sets differ: {names_a:?} vs {names_b:?}")));
    }
    for name in &names_a {
        let (pa, pb) = (a.join(name), b.join(name));
        let (ba, bb) = (std::fs::read(&pa).at(&pa)?, std::fs::read(&pb).at(&pb)?);
        if canonical_content(name, &ba)? != canonical_content(name, &bb)? {
            return Err(Error::Determinism(format!("`{name}` differs")));
        }
    }
    Ok(names_a.len())
}

/// File content without wall-clock measurements: the timing column of a
/// CSV, `wall_time_s` keys anywhere in a JSON document. Other files as is.
pub fn canonical_content(name: &str, bytes: &[u8]) -> Result<Vec<u8>> {
    if name.ends_with(".csv") {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
        let headers = r.headers()?.clone();
        let skip = headers.iter().position(|h| h == TIMING_COLUMN);
        let keep = |rec: &csv::StringRecord| -> csv::StringRecord {
            rec.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, v)| v).collect()
        };
        // the hash comment line is dropped by the reader, so keep it here
        let mut out = bytes.split(|&b| b == b'\n').next().filter(|l| l.starts_with(b"#")).unwrap_or(b"").to_vec();
        out.push(b'\n');
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&keep(&headers))?;
        for rec in r.records() {
            w.write_record(&keep(&rec?))?;
        }
        w.flush()?;
        drop(w);
        Ok(out)
    } else if name.ends_with(".json") {
        fn scrub(v: &mut serde_json::Value) {
            match v {
                serde_json::Value::Object(map) => {
                    map.remove(TIMING_COLUMN);
                    map.values_mut().for_each(scrub);
                }
                serde_json::Value::Array(items) => items.iter_mut().for_each(scrub),
                _ => {}
            }
        }
        let mut value: serde_json::Value = serde_json::from_slice(bytes)?;
        scrub(&mut value);
        Ok(serde_json::to_vec(&value)?)
    } else {
        Ok(bytes.to_vec())
    }
}

// ---- whole stages with their files ----

pub const NETWORK_FILE: &str = "network.bin";
pub const SNAPSHOTS_FILE: &str = "snapshots.bin";
pub const MODEL_FILE: &str = "koopman.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub history: Vec<EpochMetrics>,
    pub test_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Loads the network written by the train stage.
pub fn load_network(dir: &RunDir) -> Result<Mlp> {
    Mlp::load(dir.path(NETWORK_FILE))
}

pub fn stage_train(config: &ExperimentConfig, dir: &RunDir, data: &Datasets) -> Result<(Mlp, TrainingReport)> {
    dir.stage("train", || {
        let started = Instant::now();
        let (net, history) = train_network(config, data.network_train())?;
        net.save(dir.path(NETWORK_FILE))?;
        let report = TrainingReport {
            history,
            test_accuracy: evaluate(&net, &data.test)?,
            val_accuracy: data.val.as_ref().map(|v| evaluate(&net, v)).transpose()?,
        };
        dir.write_json("training.json", &report)?;
        record_timing(dir, "train", started)?;
        Ok((net, report))
    })
}

pub fn stage_snapshots(config: &ExperimentConfig, dir: &RunDir, net: &Mlp, data: &Datasets) -> Result<SnapshotSet> {
    dir.stage("snapshots", || {
        let taps = config.taps(net)?;
        let snaps = make_snapshots(config, net, &taps, &data.train)?;
        dir.write(SNAPSHOTS_FILE, &snaps.to_bytes())?;
        Ok(snaps)
    })
}

pub fn stage_fit(config: &ExperimentConfig, dir: &RunDir, snaps: &SnapshotSet) -> Result<KoopmanModel> {
    dir.stage("fit", || {
        let started = Instant::now();
        let model = fit_model(config, &config.dictionary, snaps)?;
        model.save(dir.path(MODEL_FILE))?;
        record_timing(dir, "fit", started)?;
        Ok(model)
    })
}

/// Truncates to `rank` (or `[svd].rank`), saves and scores the model.
pub fn stage_compress(
    config: &ExperimentConfig,
    dir: &RunDir,
    net: &Mlp,
    model: &KoopmanModel,
    data: &Datasets,
    rank: Option<usize>,
) -> Result<(KoopmanModel, ModelMetrics)> {
    dir.stage("compress", || {
        let taps = config.taps(net)?;
        let model = match rank.or(config.svd.rank) {
            Some(s) => {
                let m = model.truncate_svd(s)?;
                m.save(dir.path(&format!("koopman-rank{s}.bin")))?;
                m
            }
            None => model.clone(),
        };
        let val = data.val.as_ref().map(|v| EvalSet::new(net, &taps, v)).transpose()?;
        let test = EvalSet::new(net, &taps, &data.test)?;
        let metrics = evaluate_model(config, net, &taps, &model, val.as_ref(), &test)?;
        let name = match model.rank() {
            Some(s) => format!("metrics-rank{s}.json"),
            None => "metrics.json".into(),
        };
        dir.write_json(&name, &metrics)?;
        Ok((model, metrics))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub training: TrainingReport,
    pub snapshot_pairs: usize,
    pub metrics: ModelMetrics,
}

/// train → filter → snapshots → dictionary → fit → (truncate) → evaluate.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineReport> {
    config.validate()?;
    let dir = RunDir::create(config)?;
    let data = dir.stage("load", || load_datasets(config))?;
    let (net, training) = stage_train(config, &dir, &data)?;
    let snaps = stage_snapshots(config, &dir, &net, &data)?;
    let model = stage_fit(config, &dir, &snaps)?;
    let (_, metrics) = stage_compress(config, &dir, &net, &model, &data, None)?;
    let report = PipelineReport {
        training,
        snapshot_pairs: snaps.len(),
        metrics,
    };
    dir.write_json("pipeline.json", &report)?;
    Ok(report)
}

/// Sweep plus frontier and singular-value report files.
pub fn stage_sweep(config: &ExperimentConfig, dir: &RunDir, net: &Mlp, snaps: &SnapshotSet, data: &Datasets) -> Result<(SweepResult, Vec<FrontierPoint>)> {
    dir.stage("sweep", || {
        let taps = config.taps(net)?;
        let val = data
            .val
            .as_ref()
            .ok_or_else(|| Error::arg("a sweep needs validation data (val_fraction > 0)"))?;
        let val = EvalSet::new(net, &taps, val)?;
        let test = EvalSet::new(net, &taps, &data.test)?;
        let result = run_sweep(config, net, &taps, snaps, &val, &test)?;
        let frontier = select_best_per_ratio(&result.rows, config.sweep.bin_width)?;
        dir.write("sweep.csv", &sweep_to_csv(&result)?)?;
        dir.write_csv("frontier.csv", &frontier.iter().map(FrontierRecord::from).collect::<Vec<_>>())?;
        dir.write_csv("singular_values.csv", &result.singular_values)?;
        Ok((result, frontier))
    })
}

pub fn stage_compare(
    config: &ExperimentConfig,
    dir: &RunDir,
    net: &Mlp,
    data: &Datasets,
    frontier: &[FrontierPoint],
) -> Result<Vec<ComparisonRow>> {
    dir.stage("compare", || {
        let taps = config.taps(net)?;
        let rows = compare_methods(config, net, &taps, data.network_train(), &data.test, frontier)?;
        dir.write_csv("comparison.csv", &rows)?;
        Ok(rows)
    })
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub training: TrainingReport,
    pub sweep: SweepResult,
    pub frontier: Vec<FrontierPoint>,
    pub comparison: Vec<ComparisonRow>,
}

/// The compression study: train with a validation split, sweep, compare.
pub fn run_study(config: &ExperimentConfig) -> Result<StudyReport> {
    config.validate()?;
    let dir = RunDir::create(config)?;
    let data = dir.stage("load", || load_datasets(config))?;
    let (net, training) = stage_train(config, &dir, &data)?;
    let snaps = stage_snapshots(config, &dir, &net, &data)?;
    let (sweep, frontier) = stage_sweep(config, &dir, &net, &snaps, &data)?;
    let comparison = stage_compare(config, &dir, &net, &data, &frontier)?;
    Ok(StudyReport {
        training,
        sweep,
        frontier,
        comparison,
    })
}

pub fn load_snapshots(dir: &RunDir) -> Result<SnapshotSet> {
    let path = dir.path(SNAPSHOTS_FILE);
    SnapshotSet::from_bytes(&std::fs::read(&path).at(&path)?)
}

pub fn load_model(dir: &RunDir) -> Result<KoopmanModel> {
    KoopmanModel::load(dir.path(MODEL_FILE))
}

/// Frontier written by the sweep stage.
pub fn load_frontier(dir: &RunDir) -> Result<Vec<FrontierPoint>> {
    let path = dir.path("frontier.csv");
    let (_, records): (_, Vec<FrontierRecord>) = parse_csv(&std::fs::read(&path).at(&path)?)?;
    Ok(records
        .into_iter()
        .map(|r| FrontierPoint {
            bin_upper: r.bin_upper,
            row: SweepRow {
                len: r.len,
                rank: r.rank,
                param_count: r.param_count,
                compression_ratio: r.compression_ratio,
                val_accuracy: r.val_accuracy,
                test_accuracy: r.test_accuracy,
                prediction_error: r.prediction_error,
                wall_time_s: 0.0,
                blank: false,
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMetrics {
    pub method: String,
    pub target_ratio: f64,
    pub compression_ratio: f64,
    pub test_accuracy: f64,
    /// Filled in by the fine-tune stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetuned_test_accuracy: Option<f64>,
}

fn prune_stem(method: PruneMethod, ratio: f64) -> String {
    format!("pruned-{}-{ratio}", method_name(method, false))
}

/// Prunes the trained network and saves the result (plus its mask for
/// unstructured pruning).
pub fn stage_prune(
    config: &ExperimentConfig,
    dir: &RunDir,
    net: &Mlp,
    data: &Datasets,
    method: PruneMethod,
    ratio: f64,
) -> Result<PruneMetrics> {
    dir.stage("prune", || {
        let taps = config.taps(net)?;
        let spec = PruneSpec {
            selection: config.prune.selection,
            ..PruneSpec::new(method, ratio, taps.inner_layers())
        };
        let pruned = prune(net, &spec)?;
        let stem = prune_stem(method, ratio);
        pruned.net.save(dir.path(&format!("{stem}.bin")))?;
        if let Some(mask) = &pruned.mask {
            crate::pruning::save_mask(mask, dir.path(&format!("{stem}.mask")))?;
        }
        let metrics = PruneMetrics {
            method: method_name(method, false),
            target_ratio: ratio,
            compression_ratio: compression_ratio(pruned.scoped_params, original_intermediate_params(net, &taps))?,
            test_accuracy: evaluate(&pruned.net, &data.test)?,
            finetuned_test_accuracy: None,
        };
        dir.write_json(&format!("{stem}.json"), &metrics)?;
        Ok(metrics)
    })
}

/// Fine-tunes the output of [`stage_prune`] for the same method and ratio.
pub fn stage_finetune(
    config: &ExperimentConfig,
    dir: &RunDir,
    data: &Datasets,
    method: PruneMethod,
    ratio: f64,
) -> Result<PruneMetrics> {
    dir.stage("finetune", || {
        let stem = prune_stem(method, ratio);
        let mut net = Mlp::load(dir.path(&format!("{stem}.bin")))?;
        let mask_path = dir.path(&format!("{stem}.mask"));
        let mask = if mask_path.exists() {
            Some(crate::pruning::load_mask(&mask_path)?)
        } else {
            None
        };
        let json_path = dir.path(&format!("{stem}.json"));
        let text = std::fs::read_to_string(&json_path).at(&json_path)?;
        let mut metrics: PruneMetrics = serde_json::from_str(&text)?;
        let tc = TrainConfig {
            epochs: config.prune.finetune_epochs,
            ..config.train_config("finetune")
        };
        finetune(&mut net, data.network_train(), &tc, mask.as_ref())?;
        net.save(dir.path(&format!("finetuned-{}-{ratio}.bin", method_name(method, false))))?;
        metrics.finetuned_test_accuracy = Some(evaluate(&net, &data.test)?);
        dir.write_json(&format!("{stem}.json"), &metrics)?;
        Ok(metrics)
    })
}

pub fn stage_tt(config: &ExperimentConfig, dir: &RunDir, net: &Mlp, data: &Datasets) -> Result<Vec<TtRow>> {
    dir.stage("tt", || {
        let taps = config.taps(net)?;
        let snaps = match load_snapshots(dir) {
            Ok(s) => s,
            Err(_) => make_snapshots(config, net, &taps, &data.train)?,
        };
        let rows = run_tt(config, net, &taps, &snaps, &data.test)?;
        dir.write_csv("tt.csv", &rows)?;
        Ok(rows)
    })
}

/// Everything a run directory holds, gathered for display.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub training: Option<TrainingReport>,
    pub metrics: Vec<ModelMetrics>,
    pub frontier: Vec<FrontierRecord>,
    pub singular_values: Vec<SingularValueCount>,
    pub comparison: Vec<ComparisonRow>,
    pub tt: Vec<TtRow>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        if let Some(t) = &self.training {
            let _ = writeln!(out, "original network: test accuracy {:.4}", t.test_accuracy);
        }
        for m in &self.metrics {
            let rank = m.rank.map_or("none".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "{} L={} rank={rank}: test accuracy {:.4}, prediction error {:.4}, ratio {:.4}",
                m.dictionary, m.len, m.test_accuracy, m.prediction_error, m.compression_ratio
            );
        }
        if !self.singular_values.is_empty() {
            let counts: Vec<String> = self.singular_values.iter().map(|c| format!("{}:{}", c.len, c.count)).collect();
            let _ = writeln!(out, "singular values to threshold (L:count): {}", counts.join(" "));
        }
        for p in &self.frontier {
            let rank = p.rank.map_or("none".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "frontier ratio<={:.2}: L={} rank={rank} val {:.4} test {:.4}",
                p.bin_upper, p.len, p.val_accuracy, p.test_accuracy
            );
        }
        for c in &self.comparison {
            let _ = writeln!(out, "{} at {:.4}: test {:.4}", c.method, c.compression_ratio, c.test_accuracy);
        }
        for t in &self.tt {
            let _ = writeln!(
                out,
                "TT N_max={}: error {:.4}, {} bytes, max ranks {}/{}",
                t.n_max, t.prediction_error, t.bytes, t.pinv_max_rank, t.output_max_rank
            );
        }
        out
    }
}

/// Reads every known result file present in `dir`; writes `report.json`.
pub fn stage_report(dir: &RunDir) -> Result<RunReport> {
    dir.stage("report", || {
        fn csv_rows<D: serde::de::DeserializeOwned>(dir: &RunDir, name: &str) -> Result<Vec<D>> {
            let path = dir.path(name);
            if !path.exists() {
                return Ok(Vec::new());
            }
            Ok(parse_csv(&std::fs::read(&path).at(&path)?)?.1)
        }
        let mut report = RunReport::default();
        let training = dir.path("training.json");
        if training.exists() {
            report.training = Some(serde_json::from_slice(&std::fs::read(&training).at(&training)?)?);
        }
        let mut names: Vec<String> = std::fs::read_dir(&dir.root)
            .at(&dir.root)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .filter(|n| n.starts_with("metrics") && n.ends_with(".json"))
            .collect();
        names.sort();
        for name in names {
            let path = dir.path(&name);
            report.metrics.push(serde_json::from_slice(&std::fs::read(&path).at(&path)?)?);
        }
        report.frontier = csv_rows(dir, "frontier.csv")?;
        report.singular_values = csv_rows(dir, "singular_values.csv")?;
        report.comparison = csv_rows(dir, "comparison.csv")?;
        report.tt = csv_rows(dir, "tt.csv")?;
        dir.write_json("report.json", &report)?;
        Ok(report)
    })
}

fn record_timing(dir: &RunDir, stage: &str, started: Instant) -> Result<()> {
    let path = dir.path(TIMINGS_FILE);
    let mut map: BTreeMap<String, f64> = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    map.insert(stage.into(), started.elapsed().as_secs_f64());
    dir.write(TIMINGS_FILE, serde_json::to_string_pretty(&map)?.as_bytes())
}

/// Layers the surrogate replaces, for pruning in the same scope.
pub fn replaced_layers(config: &ExperimentConfig, net: &Mlp) -> Result<Range<usize>> {
    Ok(config.taps(net)?.inner_layers())
}
