//! Deterministic synthetic dataset generation: Gaussian subclass blobs,
//! forget/retain partitioning, and backdoor poisoning.
//!
//! Every operation is a pure function of (config, seed). The bundle also
//! carries a data-access audit so experiment code can assert which
//! partitions an unlearning method actually touched.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid counts: {context}")]
    InvalidCounts { context: String },
    #[error("forget target {target} not present in the dataset ({mode})")]
    TargetMissing { mode: String, target: usize },
    #[error("forget specification matches no training samples")]
    EmptyForgetSet,
    #[error("poison fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("trigger dimension {dim} out of range for input width {width}")]
    DimOutOfRange { dim: usize, width: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// What to forget: a whole class, one subclass, or the poisoned samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ForgetSpec {
    Class { target: usize },
    Subclass { target: usize },
    Poisoned,
}

impl ForgetSpec {
    /// The forget class for self-distillation, when the mode removes one.
    pub fn forget_class(&self) -> Option<usize> {
        match self {
            ForgetSpec::Class { target } => Some(*target),
            _ => None,
        }
    }
}

/// Which partition a training sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionTag {
    Forget,
    RetainPrime,
    RetainOther,
}

/// Monotone counters of per-partition training-row reads.
#[derive(Default)]
pub struct AccessAudit {
    forget: AtomicU64,
    retain_prime: AtomicU64,
    retain_other: AtomicU64,
}

/// Point-in-time copy of the audit counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditSnapshot {
    pub forget: u64,
    pub retain_prime: u64,
    pub retain_other: u64,
}

impl AccessAudit {
    pub fn snapshot(&self) -> AuditSnapshot {
        AuditSnapshot {
            forget: self.forget.load(Ordering::Relaxed),
            retain_prime: self.retain_prime.load(Ordering::Relaxed),
            retain_other: self.retain_other.load(Ordering::Relaxed),
        }
    }

    fn record(&self, tag: PartitionTag) {
        match tag {
            PartitionTag::Forget => &self.forget,
            PartitionTag::RetainPrime => &self.retain_prime,
            PartitionTag::RetainOther => &self.retain_other,
        }
        .fetch_add(1, Ordering::Relaxed);
    }
}

/// Triggered copy of the clean test split for attack-success evaluation.
/// Samples whose true label equals the attack target are excluded.
pub struct TriggeredTest {
    pub x: DenseMatrix,
    pub true_labels: Vec<usize>,
    pub target_label: usize,
}

/// Labeled dataset with train/test splits and forget/retain partitions.
pub struct DataBundle {
    pub train_x: DenseMatrix,
    pub train_y: Vec<usize>,
    pub test_x: DenseMatrix,
    pub test_y: Vec<usize>,
    pub train_subclass: Option<Vec<usize>>,
    pub test_subclass: Option<Vec<usize>>,
    pub poison_flags: Option<Vec<bool>>,
    pub forget_indices: Vec<usize>,
    pub retain_indices: Vec<usize>,
    pub retain_prime_indices: Vec<usize>,
    pub forget_spec: Option<ForgetSpec>,
    pub num_classes: usize,
    pub num_subclasses: usize,
    pub triggered_test: Option<TriggeredTest>,
    partition_tags: Vec<PartitionTag>,
    audit: AccessAudit,
}

impl DataBundle {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train_x.cols()
    }

    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }

    pub fn has_partitions(&self) -> bool {
        !self.forget_indices.is_empty() || !self.retain_indices.is_empty()
    }

    /// Gather training rows by index, recording each read in the audit.
    pub fn gather_train(&self, indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
        let dim = self.input_dim();
        let mut x = DenseMatrix::zeros(indices.len(), dim);
        let mut y = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            self.audit.record(self.partition_tags[i]);
            for c in 0..dim {
                x.set(r, c, self.train_x.get(i, c));
            }
            y.push(self.train_y[i]);
        }
        (x, y)
    }

    /// Labels of the gathered rows reinterpreted as subclass ids.
    pub fn gather_train_subclass(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.train_subclass
            .as_ref()
            .map(|sub| indices.iter().map(|&i| sub[i]).collect())
    }

    /// All training indices, 0..n.
    pub fn all_train_indices(&self) -> Vec<usize> {
        (0..self.train_len()).collect()
    }

    fn rebuild_tags(&mut self) {
        let mut tags = vec![PartitionTag::RetainOther; self.train_len()];
        for &i in &self.forget_indices {
            tags[i] = PartitionTag::Forget;
        }
        for &i in &self.retain_prime_indices {
            tags[i] = PartitionTag::RetainPrime;
        }
        self.partition_tags = tags;
    }

    /// Check the partition invariants (disjoint, covering, size rule).
    pub fn check_partitions(&self) -> bool {
        if !self.has_partitions() {
            return false;
        }
        let n = self.train_len();
        let mut seen = vec![0u8; n];
        for &i in &self.forget_indices {
            seen[i] += 1;
        }
        for &i in &self.retain_indices {
            seen[i] += 1;
        }
        if seen.iter().any(|&s| s != 1) {
            return false;
        }
        let retain_set: std::collections::BTreeSet<usize> = self.retain_indices.iter().copied().collect();
        if !self.retain_prime_indices.iter().all(|i| retain_set.contains(i)) {
            return false;
        }
        let want = self.forget_indices.len().min(self.retain_indices.len());
        self.retain_prime_indices.len() == want
    }
}

/// Generation parameters for [`gen_blobs`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobConfig {
    pub num_classes: usize,
    pub subclasses_per_class: usize,
    pub dim: usize,
    pub n_per_subclass: usize,
    pub spread: f64,
    /// Standard deviation of the isotropic prior the subclass means are
    /// drawn from. Sets the absolute data scale (and with it how hard the
    /// tanh features saturate); `spread / mean_scale` sets class overlap.
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
}

fn default_mean_scale() -> f64 {
    1.0
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            num_classes: 5,
            subclasses_per_class: 2,
            dim: 16,
            n_per_subclass: 200,
            spread: 1.0,
            mean_scale: 1.0,
        }
    }
}

/// Gaussian subclass clusters with a deterministic 80/20 train/test split.
///
/// One mean per subclass is drawn from a seeded isotropic unit normal;
/// samples are drawn around it with standard deviation `spread`. The class
/// label of a subclass is its parent class.
pub fn gen_blobs(cfg: &BlobConfig, seed: u64) -> Result<DataBundle, DatagenError> {
    if cfg.num_classes < 1 || cfg.subclasses_per_class < 1 || cfg.dim < 1 || cfg.n_per_subclass < 1 {
        return Err(DatagenError::InvalidCounts { context: format!("{cfg:?}") });
    }
    if !(cfg.spread > 0.0) || !(cfg.mean_scale > 0.0) {
        return Err(DatagenError::InvalidCounts {
            context: format!("spread {} and mean_scale {} must be > 0", cfg.spread, cfg.mean_scale),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_subclasses = cfg.num_classes * cfg.subclasses_per_class;
    let means: Vec<Vec<f64>> = (0..num_subclasses)
        .map(|_| (0..cfg.dim).map(|_| cfg.mean_scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let n_train_per = (cfg.n_per_subclass as f64 * 0.8).round() as usize;
    let mut train_rows = Vec::new();
    let mut train_y = Vec::new();
    let mut train_sub = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_y = Vec::new();
    let mut test_sub = Vec::new();

    for sub in 0..num_subclasses {
        let class = sub / cfg.subclasses_per_class;
        for i in 0..cfg.n_per_subclass {
            let sample: Vec<f64> = means[sub]
                .iter()
                .map(|m| m + cfg.spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if i < n_train_per {
                train_rows.push(sample);
                train_y.push(class);
                train_sub.push(sub);
            } else {
                test_rows.push(sample);
                test_y.push(class);
                test_sub.push(sub);
            }
        }
    }

    let to_matrix = |rows: Vec<Vec<f64>>| {
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        DenseMatrix::from_vec_unchecked(n, cfg.dim, data)
    };
    let train_len = train_y.len();
    let mut bundle = DataBundle {
        train_x: to_matrix(train_rows),
        train_y,
        test_x: to_matrix(test_rows),
        test_y,
        train_subclass: Some(train_sub),
        test_subclass: Some(test_sub),
        poison_flags: None,
        forget_indices: Vec::new(),
        retain_indices: Vec::new(),
        retain_prime_indices: Vec::new(),
        forget_spec: None,
        num_classes: cfg.num_classes,
        num_subclasses,
        triggered_test: None,
        partition_tags: vec![PartitionTag::RetainOther; train_len],
        audit: AccessAudit::default(),
    };
    bundle.rebuild_tags();
    Ok(bundle)
}

/// Fill forget / retain / retain-prime partitions for the given spec.
/// `retain_prime` is sampled uniformly without replacement from the retain
/// set, with `|retain_prime| = min(|forget|, |retain|)`.
pub fn split_forget_retain(
    mut bundle: DataBundle,
    spec: ForgetSpec,
    seed: u64,
) -> Result<DataBundle, DatagenError> {
    let matches: Vec<usize> = match spec {
        ForgetSpec::Class { target } => {
            if target >= bundle.num_classes {
                return Err(DatagenError::TargetMissing { mode: "class".into(), target });
            }
            (0..bundle.train_len()).filter(|&i| bundle.train_y[i] == target).collect()
        }
        ForgetSpec::Subclass { target } => {
            let sub = bundle.train_subclass.as_ref().ok_or(DatagenError::TargetMissing {
                mode: "subclass".into(),
                target,
            })?;
            if target >= bundle.num_subclasses {
                return Err(DatagenError::TargetMissing { mode: "subclass".into(), target });
            }
            (0..bundle.train_len()).filter(|&i| sub[i] == target).collect()
        }
        ForgetSpec::Poisoned => {
            let flags = bundle.poison_flags.as_ref().ok_or(DatagenError::TargetMissing {
                mode: "poisoned".into(),
                target: 0,
            })?;
            (0..bundle.train_len()).filter(|&i| flags[i]).collect()
        }
    };
    if matches.is_empty() {
        return Err(DatagenError::EmptyForgetSet);
    }

    let in_forget: Vec<bool> = {
        let mut v = vec![false; bundle.train_len()];
        for &i in &matches {
            v[i] = true;
        }
        v
    };
    let retain: Vec<usize> = (0..bundle.train_len()).filter(|&i| !in_forget[i]).collect();
    let prime_len = matches.len().min(retain.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = retain.clone();
    // Partial Fisher-Yates: the first prime_len entries are the sample.
    for i in 0..prime_len {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut prime: Vec<usize> = pool[..prime_len].to_vec();
    prime.sort_unstable();

    bundle.forget_indices = matches;
    bundle.retain_indices = retain;
    bundle.retain_prime_indices = prime;
    bundle.forget_spec = Some(spec);
    bundle.rebuild_tags();
    Ok(bundle)
}

/// Stamp a backdoor trigger onto a seeded fraction of the training set,
/// overwrite the labels to the attack target, and mark the poisoned samples
/// as the forget set. A fully triggered copy of the clean test split (minus
/// true-target samples) is stored for attack-success evaluation.
pub fn poison_backdoor(
    mut bundle: DataBundle,
    trigger_dims: &[usize],
    trigger_value: f64,
    target_label: usize,
    fraction: f64,
    seed: u64,
) -> Result<DataBundle, DatagenError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatagenError::InvalidFraction(fraction));
    }
    let width = bundle.input_dim();
    for &d in trigger_dims {
        if d >= width {
            return Err(DatagenError::DimOutOfRange { dim: d, width });
        }
    }
    if target_label >= bundle.num_classes {
        return Err(DatagenError::TargetMissing { mode: "poison target".into(), target: target_label });
    }

    let n = bundle.train_len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut chosen: Vec<usize> = pool[..count].to_vec();
    chosen.sort_unstable();

    let mut flags = vec![false; n];
    for &i in &chosen {
        flags[i] = true;
        for &d in trigger_dims {
            bundle.train_x.set(i, d, trigger_value);
        }
        bundle.train_y[i] = target_label;
    }
    bundle.poison_flags = Some(flags);

    // Triggered test copy, excluding samples whose true label is the target.
    let keep: Vec<usize> = (0..bundle.test_y.len()).filter(|&i| bundle.test_y[i] != target_label).collect();
    let mut tx = DenseMatrix::zeros(keep.len(), width);
    let mut tl = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        for c in 0..width {
            tx.set(r, c, bundle.test_x.get(i, c));
        }
        for &d in trigger_dims {
            tx.set(r, d, trigger_value);
        }
        tl.push(bundle.test_y[i]);
    }
    bundle.triggered_test = Some(TriggeredTest { x: tx, true_labels: tl, target_label });

    split_forget_retain(bundle, ForgetSpec::Poisoned, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
}

/// Dump the dataset as delimited text: one sample per row with features,
/// class, subclass, split, partition, and poison flag columns.
pub fn write_dataset_csv(bundle: &DataBundle, path: &Path) -> Result<(), DatagenError> {
    let dim = bundle.input_dim();
    let mut out = String::new();
    for c in 0..dim {
        out.push_str(&format!("feature_{c},"));
    }
    out.push_str("class,subclass,split,partition,poisoned\n");
    for i in 0..bundle.train_len() {
        for c in 0..dim {
            out.push_str(&format!("{},", bundle.train_x.get(i, c)));
        }
        let sub = bundle.train_subclass.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
        let partition = match bundle.partition_tags[i] {
            _ if !bundle.has_partitions() => "none",
            PartitionTag::Forget => "forget",
            PartitionTag::RetainPrime => "retain_prime",
            PartitionTag::RetainOther => "retain",
        };
        let poisoned = bundle.poison_flags.as_ref().map(|f| u8::from(f[i])).unwrap_or(0);
        out.push_str(&format!("{},{},train,{},{}\n", bundle.train_y[i], sub, partition, poisoned));
    }
    for i in 0..bundle.test_y.len() {
        for c in 0..dim {
            out.push_str(&format!("{},", bundle.test_x.get(i, c)));
        }
        let sub = bundle.test_subclass.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},test,none,0\n", bundle.test_y[i], sub));
    }
    std::fs::write(path, out)?;
    Ok(())
}
