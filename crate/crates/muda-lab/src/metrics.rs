//! Feature-level evaluation protocol: dimensional alignment, linear probing,
//! clustering-based F1/NMI, plain accuracy, confidence-based membership
//! inference, and backdoor attack success rate.
//!
//! All metrics are pure functions of immutable model snapshots and data.
//! Covariances are uncentered throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataBundle, ForgetSpec};
use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::nnet::{MlpModel, NnetError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("probe training set contains a single class")]
    SingleClassTrainingSet,
    #[error("k-means needs at least k samples ({n} < {k})")]
    TooFewSamples { n: usize, k: usize },
    #[error("forget mask is constant; mutual information undefined")]
    DegenerateMask,
    #[error("all samples in one cluster; entropy is zero")]
    ZeroEntropy,
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error("forget feature covariance is numerically zero")]
    DegenerateForget,
    #[error("retain feature covariance is numerically zero")]
    DegenerateRetain,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

const DEGENERATE_NORM: f64 = 1e-12;

/// Dimensional alignment of forget features against the retain set's top-k
/// eigenspace: `‖F_f F_f^T Û_r Û_r^T‖_F / ‖F_f F_f^T‖_F`, with k the ceiling
/// of the retain covariance's effective rank. Features are column-per-sample
/// (C×n) and uncentered. Result lies in [0, 1].
pub fn dimensional_alignment(f_forget: &DenseMatrix, f_retain: &DenseMatrix) -> Result<f64, MetricsError> {
    if f_forget.rows() != f_retain.rows() {
        return Err(MetricsError::ShapeMismatch {
            context: format!("feature dims {} vs {}", f_forget.rows(), f_retain.rows()),
        });
    }
    let g_f = f_forget.gram();
    let den = linalg::frobenius_norm(&g_f);
    if den <= DEGENERATE_NORM {
        return Err(MetricsError::DegenerateForget);
    }
    let g_r = f_retain.gram();
    if linalg::frobenius_norm(&g_r) <= DEGENERATE_NORM {
        return Err(MetricsError::DegenerateRetain);
    }
    let decomp = linalg::sym_eig(&g_r)?;
    let clamped: Vec<f64> = decomp.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let k = linalg::subspace_dim(&clamped)?;
    let projector = linalg::top_k_projector(&decomp, k)?;
    let num = linalg::frobenius_norm(&g_f.matmul(&projector));
    Ok(num / den)
}

/// Feature matrix of a batch in column-per-sample layout (C×n).
pub fn feature_columns(model: &MlpModel, x: &DenseMatrix) -> Result<DenseMatrix, MetricsError> {
    Ok(model.forward(x)?.features.transpose())
}

/// Linear-probe recipe: full-batch gradient descent on a fresh multinomial
/// logistic classifier over frozen features.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 500, learning_rate: 0.1, seed: 0 }
    }
}

/// Train a linear probe on `(train_features, train_labels)` and return its
/// accuracy on `(eval_features, eval_labels)`. Features are row-per-sample.
pub fn linear_probe(
    train_features: &DenseMatrix,
    train_labels: &[usize],
    eval_features: &DenseMatrix,
    eval_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64, MetricsError> {
    if train_features.rows() != train_labels.len() || eval_features.rows() != eval_labels.len() {
        return Err(MetricsError::ShapeMismatch { context: "probe rows vs labels".into() });
    }
    if train_features.cols() != eval_features.cols() {
        return Err(MetricsError::ShapeMismatch { context: "probe train/eval widths".into() });
    }
    let distinct: std::collections::BTreeSet<usize> = train_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(MetricsError::SingleClassTrainingSet);
    }
    let classes = train_labels.iter().chain(eval_labels.iter()).max().unwrap() + 1;
    let dim = train_features.cols();
    let n = train_features.rows();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut w = DenseMatrix::from_vec_unchecked(
        dim,
        classes,
        (0..dim * classes).map(|_| rng.gen_range(-bound..bound)).collect(),
    );
    let mut b = vec![0.0; classes];

    for _ in 0..cfg.steps {
        let mut logits = train_features.matmul(&w);
        for r in 0..n {
            for c in 0..classes {
                logits.set(r, c, logits.get(r, c) + b[c]);
            }
        }
        let probs = crate::nnet::softmax_rows(&logits);
        // grad = F^T (P - Y) / n
        let mut delta = probs;
        for (r, &l) in train_labels.iter().enumerate() {
            delta.set(r, l, delta.get(r, l) - 1.0);
        }
        let grad_w = train_features.transpose().matmul(&delta);
        for i in 0..dim {
            for c in 0..classes {
                let x = w.get(i, c) - cfg.learning_rate * grad_w.get(i, c) / n as f64;
                w.set(i, c, x);
            }
        }
        for c in 0..classes {
            let gb: f64 = (0..n).map(|r| delta.get(r, c)).sum::<f64>() / n as f64;
            b[c] -= cfg.learning_rate * gb;
        }
    }

    let mut hits = 0usize;
    for r in 0..eval_features.rows() {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..classes {
            let mut s = b[c];
            for i in 0..dim {
                s += eval_features.get(r, i) * w.get(i, c);
            }
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        if best == eval_labels[r] {
            hits += 1;
        }
    }
    Ok(hits as f64 / eval_labels.len().max(1) as f64)
}

/// Result of a k-means run.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub centroids: DenseMatrix,
    pub inertia: f64,
}

const KMEANS_MAX_ITERS: usize = 300;

/// Seeded k-means++ initialization followed by Lloyd iterations until the
/// assignment fixpoint (or 300 iterations). Empty clusters are reseeded to
/// the point farthest from its centroid. Features are row-per-sample.
pub fn kmeans(features: &DenseMatrix, k: usize, seed: u64) -> Result<ClusterAssignment, MetricsError> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(MetricsError::TooFewSamples { n, k });
    }
    let dim = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = DenseMatrix::zeros(k, dim);
    let first = rng.gen_range(0..n);
    for c in 0..dim {
        centroids.set(0, c, features.get(first, c));
    }
    let mut d2: Vec<f64> = (0..n).map(|r| row_dist2(features, r, &centroids, 0)).collect();
    for ci in 1..k {
        let total: f64 = d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (r, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = r;
                    break;
                }
                target -= w;
            }
            pick
        };
        for c in 0..dim {
            centroids.set(ci, c, features.get(chosen, c));
        }
        for (r, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(row_dist2(features, r, &centroids, ci));
        }
    }

    let mut assignments = vec![0usize; n];
    assign_nearest(features, &centroids, &mut assignments);
    for _ in 0..KMEANS_MAX_ITERS {
        // Update step.
        let mut sums = DenseMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (r, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for c in 0..dim {
                sums.set(a, c, sums.get(a, c) + features.get(r, c));
            }
        }
        for ci in 0..k {
            if counts[ci] == 0 {
                // Reseed to the farthest point from this centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        row_dist2(features, a, &centroids, ci)
                            .partial_cmp(&row_dist2(features, b, &centroids, ci))
                            .unwrap()
                    })
                    .unwrap();
                for c in 0..dim {
                    centroids.set(ci, c, features.get(far, c));
                }
            } else {
                for c in 0..dim {
                    centroids.set(ci, c, sums.get(ci, c) / counts[ci] as f64);
                }
            }
        }
        let mut next = vec![0usize; n];
        assign_nearest(features, &centroids, &mut next);
        let fixed = next == assignments;
        assignments = next;
        if fixed {
            break;
        }
    }

    let inertia: f64 = (0..n).map(|r| row_dist2(features, r, &centroids, assignments[r])).sum();
    Ok(ClusterAssignment { assignments, centroids, inertia })
}

fn assign_nearest(features: &DenseMatrix, centroids: &DenseMatrix, out: &mut [usize]) {
    for r in 0..features.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for ci in 0..centroids.rows() {
            let d = row_dist2(features, r, centroids, ci);
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        out[r] = best;
    }
}

fn row_dist2(features: &DenseMatrix, r: usize, centroids: &DenseMatrix, ci: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..features.cols() {
        let d = features.get(r, c) - centroids.get(ci, c);
        s += d * d;
    }
    s
}

/// Normalized mutual information between cluster ids and the binary forget
/// mask: `I(K, X) / min(H(K), H(X))`, natural log.
pub fn nmi_forget(assignment: &ClusterAssignment, forget_mask: &[bool]) -> Result<f64, MetricsError> {
    let n = forget_mask.len();
    if assignment.assignments.len() != n {
        return Err(MetricsError::ShapeMismatch { context: "assignment vs mask length".into() });
    }
    let pos = forget_mask.iter().filter(|&&m| m).count();
    if pos == 0 || pos == n {
        return Err(MetricsError::DegenerateMask);
    }
    let k = assignment.centroids.rows();
    let mut joint = vec![[0usize; 2]; k];
    for (r, &a) in assignment.assignments.iter().enumerate() {
        joint[a][usize::from(forget_mask[r])] += 1;
    }
    let nf = n as f64;
    let h_k: f64 = joint
        .iter()
        .map(|row| row[0] + row[1])
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / nf;
            -p * p.ln()
        })
        .sum();
    if h_k <= 0.0 {
        return Err(MetricsError::ZeroEntropy);
    }
    let px = [1.0 - pos as f64 / nf, pos as f64 / nf];
    let h_x: f64 = px.iter().map(|&p| -p * p.ln()).sum();
    let mut mi = 0.0;
    for row in &joint {
        let ck = (row[0] + row[1]) as f64 / nf;
        for (x, &cnt) in row.iter().enumerate() {
            if cnt > 0 {
                let pxy = cnt as f64 / nf;
                mi += pxy * (pxy / (ck * px[x])).ln();
            }
        }
    }
    Ok((mi / h_k.min(h_x)).clamp(0.0, 1.0))
}

/// Best-cluster F1 against the forget set: per cluster, precision is the
/// forget fraction inside it and recall the cluster's share of the forget
/// set; returns the maximum harmonic mean (0 when no cluster intersects).
pub fn f1_forget(assignment: &ClusterAssignment, forget_mask: &[bool]) -> Result<f64, MetricsError> {
    let n = forget_mask.len();
    if assignment.assignments.len() != n {
        return Err(MetricsError::ShapeMismatch { context: "assignment vs mask length".into() });
    }
    let total_forget = forget_mask.iter().filter(|&&m| m).count();
    if total_forget == 0 {
        return Err(MetricsError::EmptyForgetSet);
    }
    let k = assignment.centroids.rows();
    let mut cluster_size = vec![0usize; k];
    let mut cluster_forget = vec![0usize; k];
    for (r, &a) in assignment.assignments.iter().enumerate() {
        cluster_size[a] += 1;
        if forget_mask[r] {
            cluster_forget[a] += 1;
        }
    }
    let mut best = 0.0f64;
    for ci in 0..k {
        if cluster_forget[ci] == 0 || cluster_size[ci] == 0 {
            continue;
        }
        let precision = cluster_forget[ci] as f64 / cluster_size[ci] as f64;
        let recall = cluster_forget[ci] as f64 / total_forget as f64;
        best = best.max(2.0 * precision * recall / (precision + recall));
    }
    Ok(best)
}

/// Outcome of the membership-inference attack.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MiaOutcome {
    /// Fraction of forget samples the attacker labels as members (h > 0.5).
    pub rate: f64,
    /// Mean of the attacker's raw membership probabilities.
    pub soft_rate: f64,
    /// Set when all training confidences were identical; `rate` is then 0.5.
    pub degenerate: bool,
}

const MIA_STEPS: usize = 3000;
const MIA_LR: f64 = 0.5;

/// The logistic core of the attack, on raw confidence values: fit h to
/// predict 1 on member confidences and 0 on non-member confidences, then
/// score the targets. Identical confidences on the training side short-round
/// to 0.5 with the degenerate flag set.
pub fn mia_from_confidences(members: &[f64], non_members: &[f64], targets: &[f64]) -> MiaOutcome {
    let all: Vec<f64> = members.iter().chain(non_members.iter()).copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / all.len() as f64;
    if var < 1e-18 {
        return MiaOutcome { rate: 0.5, soft_rate: 0.5, degenerate: true };
    }
    let std = var.sqrt();

    // Standardized 1-D logistic regression from zero init; deterministic.
    let mut w = 0.0f64;
    let mut b = 0.0f64;
    let n = all.len() as f64;
    for _ in 0..MIA_STEPS {
        let mut gw = 0.0;
        let mut gb = 0.0;
        for (&q, y) in members.iter().map(|q| (q, 1.0)).chain(non_members.iter().map(|q| (q, 0.0))) {
            let z = (q - mean) / std;
            let p = sigmoid(w * z + b);
            gw += (p - y) * z;
            gb += p - y;
        }
        w -= MIA_LR * gw / n;
        b -= MIA_LR * gb / n;
    }

    let mut hard = 0usize;
    let mut soft = 0.0;
    for &q in targets {
        let p = sigmoid(w * (q - mean) / std + b);
        soft += p;
        if p > 0.5 {
            hard += 1;
        }
    }
    let count = targets.len().max(1) as f64;
    MiaOutcome { rate: hard as f64 / count, soft_rate: soft / count, degenerate: false }
}

/// Max-softmax confidence of every sample in a batch.
pub fn confidences(model: &MlpModel, x: &DenseMatrix) -> Result<Vec<f64>, MetricsError> {
    let probs = model.forward(x)?.probs;
    Ok((0..probs.rows())
        .map(|r| probs.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Confidence-based membership inference: a 1-D logistic regression is fit
/// (by deterministic full-batch gradient descent) to separate retain-set
/// confidences (label 1) from test-set confidences (label 0); the returned
/// rate is the fraction of forget samples predicted as members.
pub fn mia_success_rate(
    model: &MlpModel,
    retain_x: &DenseMatrix,
    test_x: &DenseMatrix,
    forget_x: &DenseMatrix,
) -> Result<MiaOutcome, MetricsError> {
    if retain_x.rows() == 0 || test_x.rows() == 0 {
        return Err(MetricsError::ShapeMismatch { context: "empty MIA training set".into() });
    }
    let members = confidences(model, retain_x)?;
    let non_members = confidences(model, test_x)?;
    let targets = confidences(model, forget_x)?;
    Ok(mia_from_confidences(&members, &non_members, &targets))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fraction of samples whose argmax prediction equals the label. Ties break
/// toward the lowest class index.
pub fn accuracy(model: &MlpModel, x: &DenseMatrix, y: &[usize]) -> Result<f64, MetricsError> {
    if x.rows() != y.len() {
        return Err(MetricsError::ShapeMismatch { context: "accuracy rows vs labels".into() });
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let probs = model.forward(x)?.probs;
    let mut hits = 0usize;
    for (r, &label) in y.iter().enumerate() {
        let mut best = 0;
        for c in 1..probs.cols() {
            if probs.get(r, c) > probs.get(r, best) {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / y.len() as f64)
}

/// Fraction of triggered samples classified as the attack target.
pub fn attack_success_rate(
    model: &MlpModel,
    triggered_x: &DenseMatrix,
    target_label: usize,
) -> Result<f64, MetricsError> {
    if triggered_x.rows() == 0 {
        return Ok(0.0);
    }
    let probs = model.forward(triggered_x)?.probs;
    let mut hits = 0usize;
    for r in 0..probs.rows() {
        let mut best = 0;
        for c in 1..probs.cols() {
            if probs.get(r, c) > probs.get(r, best) {
                best = c;
            }
        }
        if best == target_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / probs.rows() as f64)
}

/// Per-field absolute differences against the retrained reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDiffs {
    pub da: f64,
    pub lp_forget: Option<f64>,
    pub lp_retain: f64,
    pub lp_sub: Option<f64>,
    pub f1: f64,
    pub nmi: f64,
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub mia: f64,
    pub asr: Option<f64>,
}

/// One evaluation row: every applicable metric for one model, plus diffs
/// against the retrained reference when given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub da: f64,
    pub lp_forget: Option<f64>,
    pub lp_retain: f64,
    pub lp_sub: Option<f64>,
    pub f1: f64,
    pub nmi: f64,
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub mia: f64,
    pub mia_soft: f64,
    pub mia_degenerate: bool,
    pub asr: Option<f64>,
    pub diffs: Option<MetricsDiffs>,
}

impl MetricsReport {
    /// Range invariants for every bounded field.
    pub fn check_ranges(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.da)
            && self.lp_forget.map_or(true, unit)
            && unit(self.lp_retain)
            && self.lp_sub.map_or(true, unit)
            && unit(self.f1)
            && unit(self.nmi)
            && unit(self.acc_forget)
            && unit(self.acc_retain)
            && unit(self.mia)
            && self.asr.map_or(true, unit)
    }

    /// Fill the diff block against a reference row (zeros when compared to
    /// itself).
    pub fn fill_diffs(&mut self, reference: &MetricsReport) {
        let d = |a: f64, b: f64| (a - b).abs();
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => Some((x - y).abs()),
            _ => None,
        };
        self.diffs = Some(MetricsDiffs {
            da: d(self.da, reference.da),
            lp_forget: opt(self.lp_forget, reference.lp_forget),
            lp_retain: d(self.lp_retain, reference.lp_retain),
            lp_sub: opt(self.lp_sub, reference.lp_sub),
            f1: d(self.f1, reference.f1),
            nmi: d(self.nmi, reference.nmi),
            acc_forget: d(self.acc_forget, reference.acc_forget),
            acc_retain: d(self.acc_retain, reference.acc_retain),
            mia: d(self.mia, reference.mia),
            asr: opt(self.asr, reference.asr),
        });
    }
}

/// Compute every applicable metric for one model over a partitioned bundle.
///
/// Dimensional alignment uses train-split features of the forget set against
/// the full retain set; clustering metrics run over the whole train split
/// with k = number of classes; linear probes train on train-split features
/// and evaluate on the matching test-split samples.
pub fn evaluate_model(
    model: &MlpModel,
    bundle: &DataBundle,
    label: &str,
    seed: u64,
    reference: Option<&MetricsReport>,
) -> Result<MetricsReport, MetricsError> {
    assert!(bundle.has_partitions(), "evaluate_model needs forget/retain partitions");
    let spec = bundle.forget_spec.expect("partitioned bundle carries its spec");

    let (forget_x, forget_y) = bundle.gather_train(&bundle.forget_indices);
    let (retain_x, retain_y) = bundle.gather_train(&bundle.retain_indices);
    let all_idx = bundle.all_train_indices();
    let (train_x, train_y) = bundle.gather_train(&all_idx);

    let da = dimensional_alignment(
        &feature_columns(model, &forget_x)?,
        &feature_columns(model, &retain_x)?,
    )?;

    // Clustering metrics over the full train split.
    let train_feats = model.forward(&train_x)?.features;
    let clusters = kmeans(&train_feats, bundle.num_classes, mix(seed, "kmeans"))?;
    let mut forget_mask = vec![false; bundle.train_len()];
    for &i in &bundle.forget_indices {
        forget_mask[i] = true;
    }
    let f1 = f1_forget(&clusters, &forget_mask)?;
    let nmi = nmi_forget(&clusters, &forget_mask)?;

    // Linear probes: frozen features, fresh classifier, test-split eval.
    let retain_feats = model.forward(&retain_x)?.features;
    let test_feats = model.forward(&bundle.test_x)?.features;
    let (forget_test_idx, retain_test_idx) = test_partition(bundle, spec);
    let probe = |train_f: &DenseMatrix,
                 train_l: &[usize],
                 eval_idx: &[usize],
                 eval_labels: &dyn Fn(usize) -> usize,
                 tag: &str|
     -> Result<Option<f64>, MetricsError> {
        if eval_idx.is_empty() {
            return Ok(None);
        }
        let eval_f = gather_rows(&test_feats, eval_idx);
        let eval_l: Vec<usize> = eval_idx.iter().map(|&i| eval_labels(i)).collect();
        let cfg = ProbeConfig { seed: mix(seed, tag), ..ProbeConfig::default() };
        linear_probe(train_f, train_l, &eval_f, &eval_l, &cfg).map(Some)
    };

    let lp_retain = probe(
        &retain_feats,
        &retain_y,
        &retain_test_idx,
        &|i| bundle.test_y[i],
        "lp_retain",
    )?
    .expect("retain test samples always exist");

    let lp_forget = match spec {
        ForgetSpec::Poisoned => None,
        _ => probe(&train_feats, &train_y, &forget_test_idx, &|i| bundle.test_y[i], "lp_forget")?,
    };

    let lp_sub = match spec {
        ForgetSpec::Subclass { .. } => {
            let sub_train: Vec<usize> =
                bundle.gather_train_subclass(&all_idx).expect("subclass labels present");
            let test_sub = bundle.test_subclass.as_ref().expect("subclass labels present");
            probe(&train_feats, &sub_train, &forget_test_idx, &|i| test_sub[i], "lp_sub")?
        }
        _ => None,
    };

    let acc_forget = accuracy(model, &forget_x, &forget_y)?;
    let acc_retain = accuracy(model, &retain_x, &retain_y)?;

    let mia = mia_success_rate(model, &retain_x, &bundle.test_x, &forget_x)?;

    let asr = match &bundle.triggered_test {
        Some(t) => Some(attack_success_rate(model, &t.x, t.target_label)?),
        None => None,
    };

    let mut report = MetricsReport {
        method: label.to_string(),
        seed,
        da,
        lp_forget,
        lp_retain,
        lp_sub,
        f1,
        nmi,
        acc_forget,
        acc_retain,
        mia: mia.rate,
        mia_soft: mia.soft_rate,
        mia_degenerate: mia.degenerate,
        asr,
        diffs: None,
    };
    if let Some(r) = reference {
        report.fill_diffs(r);
    }
    Ok(report)
}

/// Test-split indices of the forget target vs everything else.
fn test_partition(bundle: &DataBundle, spec: ForgetSpec) -> (Vec<usize>, Vec<usize>) {
    let n = bundle.test_y.len();
    match spec {
        ForgetSpec::Class { target } => {
            let f: Vec<usize> = (0..n).filter(|&i| bundle.test_y[i] == target).collect();
            let r: Vec<usize> = (0..n).filter(|&i| bundle.test_y[i] != target).collect();
            (f, r)
        }
        ForgetSpec::Subclass { target } => {
            let sub = bundle.test_subclass.as_ref().expect("subclass labels present");
            let f: Vec<usize> = (0..n).filter(|&i| sub[i] == target).collect();
            let r: Vec<usize> = (0..n).filter(|&i| sub[i] != target).collect();
            (f, r)
        }
        ForgetSpec::Poisoned => (Vec::new(), (0..n).collect()),
    }
}

fn gather_rows(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..m.cols() {
            out.set(r, c, m.get(i, c));
        }
    }
    out
}

/// Deterministic sub-seed derivation (FNV-1a over the tag, mixed with the
/// base seed). Independent of process or platform.
pub fn mix(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Activation;

    #[test]
    fn da_fixed_points() {
        // Retain spans e1; forget inside the span → 1; orthogonal → 0.
        let retain = DenseMatrix::from_vec_unchecked(2, 3, vec![1.0, -0.5, 2.0, 0.0, 0.0, 0.0]);
        let aligned = DenseMatrix::from_vec_unchecked(2, 2, vec![1.0, 3.0, 0.0, 0.0]);
        let orthogonal = DenseMatrix::from_vec_unchecked(2, 2, vec![0.0, 0.0, 1.0, -2.0]);
        assert!((dimensional_alignment(&aligned, &retain).unwrap() - 1.0).abs() < 1e-9);
        assert!(dimensional_alignment(&orthogonal, &retain).unwrap() < 1e-9);
    }

    #[test]
    fn da_hand_case() {
        let retain = DenseMatrix::from_vec_unchecked(2, 2, vec![1.0, 0.5, 0.0, 0.0]);
        let s = 1.0 / 2.0f64.sqrt();
        let forget = DenseMatrix::from_vec_unchecked(2, 1, vec![s, s]);
        let da = dimensional_alignment(&forget, &retain).unwrap();
        assert!((da - 1.0 / 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn da_degenerate_errors() {
        let retain = DenseMatrix::from_vec_unchecked(2, 2, vec![1.0, 0.5, 0.0, 0.0]);
        let zero = DenseMatrix::zeros(2, 2);
        assert!(matches!(dimensional_alignment(&zero, &retain), Err(MetricsError::DegenerateForget)));
        assert!(matches!(dimensional_alignment(&retain, &zero), Err(MetricsError::DegenerateRetain)));
    }

    #[test]
    fn da_scale_and_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let forget = DenseMatrix::from_vec_unchecked(c, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let retain = DenseMatrix::from_vec_unchecked(c, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let base = dimensional_alignment(&forget, &retain).unwrap();

        let mut scaled = forget.clone();
        for v in scaled.data_mut() {
            *v *= 7.3;
        }
        assert!((dimensional_alignment(&scaled, &retain).unwrap() - base).abs() < 1e-9);

        // Right-multiplication by an orthogonal matrix = rotating samples.
        let theta: f64 = 0.83;
        let rot = DenseMatrix::from_vec_unchecked(
            4,
            4,
            vec![
                theta.cos(), -theta.sin(), 0.0, 0.0,
                theta.sin(), theta.cos(), 0.0, 0.0,
                0.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 0.0, 1.0,
            ],
        );
        let rotated = forget.matmul(&rot);
        assert!((dimensional_alignment(&rotated, &retain).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn probe_separable_and_chance() {
        // Two separable blobs.
        let mut train = DenseMatrix::zeros(40, 2);
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..40 {
            let class = i % 2;
            train.set(i, 0, class as f64 * 6.0 + rng.gen_range(-0.5..0.5));
            train.set(i, 1, rng.gen_range(-0.5..0.5));
            labels.push(class);
        }
        let cfg = ProbeConfig { seed: 1, ..ProbeConfig::default() };
        let acc = linear_probe(&train, &labels, &train, &labels, &cfg).unwrap();
        assert_eq!(acc, 1.0);

        // Uniformly shuffled labels on balanced classes → chance.
        let random_labels: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2usize)).collect();
        let acc = linear_probe(&train, &random_labels, &train, &random_labels, &cfg).unwrap();
        assert!((acc - 0.5).abs() <= 0.15, "chance-level accuracy, got {acc}");

        assert!(matches!(
            linear_probe(&train, &vec![0; 40], &train, &labels, &cfg),
            Err(MetricsError::SingleClassTrainingSet)
        ));
    }

    #[test]
    fn probe_robust_to_init_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 60;
        let mut feats = DenseMatrix::zeros(n, 3);
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 3;
            for c in 0..3 {
                let center = if c == class { 2.0 } else { 0.0 };
                feats.set(i, c, center + rng.gen_range(-1.2..1.2));
            }
            labels.push(class);
        }
        let a = linear_probe(&feats, &labels, &feats, &labels, &ProbeConfig { seed: 1, ..Default::default() }).unwrap();
        let b = linear_probe(&feats, &labels, &feats, &labels, &ProbeConfig { seed: 999, ..Default::default() }).unwrap();
        assert!((a - b).abs() <= 0.005, "probe unstable across init seeds: {a} vs {b}");
    }

    #[test]
    fn kmeans_small_cases() {
        let feats = DenseMatrix::from_vec_unchecked(4, 1, vec![0.0, 1.0, 10.0, 11.0]);
        let one = kmeans(&feats, 1, 0).unwrap();
        assert!((one.centroids.get(0, 0) - 5.5).abs() < 1e-12);
        let all = kmeans(&feats, 4, 0).unwrap();
        assert!(all.inertia < 1e-12);
        assert!(matches!(kmeans(&feats, 5, 0), Err(MetricsError::TooFewSamples { .. })));
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut feats = DenseMatrix::zeros(60, 2);
        let mut truth = Vec::new();
        for i in 0..60 {
            let blob = i % 3;
            feats.set(i, 0, blob as f64 * 12.0 + rng.gen_range(-0.5..0.5));
            feats.set(i, 1, rng.gen_range(-0.5..0.5));
            truth.push(blob);
        }
        let got = kmeans(&feats, 3, 7).unwrap();
        // Same partition up to relabeling.
        let mut mapping = std::collections::BTreeMap::new();
        for (r, &t) in truth.iter().enumerate() {
            let c = got.assignments[r];
            let entry = mapping.entry(t).or_insert(c);
            assert_eq!(*entry, c, "blob {t} split across clusters");
        }
        // Assignment invariant: nearest centroid.
        for r in 0..60 {
            let a = got.assignments[r];
            for ci in 0..3 {
                assert!(row_dist2(&feats, r, &got.centroids, a) <= row_dist2(&feats, r, &got.centroids, ci) + 1e-12);
            }
        }
    }

    fn assignment_from(ids: &[usize], k: usize) -> ClusterAssignment {
        ClusterAssignment { assignments: ids.to_vec(), centroids: DenseMatrix::zeros(k, 1), inertia: 0.0 }
    }

    #[test]
    fn nmi_perfect_and_independent() {
        // One cluster exactly equals the forget set → 1.
        let ids = [0, 0, 1, 1, 2, 2];
        let mask = [true, true, false, false, false, false];
        let a = assignment_from(&ids, 3);
        assert!((nmi_forget(&a, &mask).unwrap() - 1.0).abs() < 1e-12);

        // Exact product distribution → 0.
        let ids = [0, 0, 1, 1];
        let mask = [true, false, true, false];
        let a = assignment_from(&ids, 2);
        assert!(nmi_forget(&a, &mask).unwrap().abs() < 1e-12);

        assert!(matches!(
            nmi_forget(&a, &[true, true, true, true]),
            Err(MetricsError::DegenerateMask)
        ));
        let single = assignment_from(&[0, 0, 0, 0], 1);
        assert!(matches!(
            nmi_forget(&single, &[true, false, true, false]),
            Err(MetricsError::ZeroEntropy)
        ));
    }

    #[test]
    fn f1_cases() {
        let ids = [0, 0, 1, 1, 1];
        let exact = [true, true, false, false, false];
        let a = assignment_from(&ids, 2);
        assert!((f1_forget(&a, &exact).unwrap() - 1.0).abs() < 1e-12);

        // No cluster intersects the forget set is impossible once any sample
        // is in the forget set, so "no intersection → 0" uses an empty-overlap
        // construction over a subset of clusters.
        let none: Vec<bool> = vec![false; 5];
        assert!(matches!(f1_forget(&a, &none), Err(MetricsError::EmptyForgetSet)));
    }

    #[test]
    fn mia_separable_cases() {
        let members = vec![0.99; 30];
        let non_members = vec![0.01; 30];
        // Forget samples living on the non-member side → rate 0.
        let low = mia_from_confidences(&members, &non_members, &vec![0.01; 10]);
        assert_eq!(low.rate, 0.0);
        assert!(!low.degenerate);
        // Forget samples on the member side → rate 1.
        let high = mia_from_confidences(&members, &non_members, &vec![0.99; 10]);
        assert_eq!(high.rate, 1.0);
        // Identical training confidences → 0.5 with the degenerate flag.
        let flat = mia_from_confidences(&vec![0.7; 5], &vec![0.7; 5], &vec![0.7; 5]);
        assert!(flat.degenerate);
        assert_eq!(flat.rate, 0.5);
    }

    #[test]
    fn mia_monotone_in_forget_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let members: Vec<f64> = (0..50).map(|_| 0.6 + rng.gen_range(0.0..0.4)).collect();
        let non_members: Vec<f64> = (0..50).map(|_| 0.2 + rng.gen_range(0.0..0.5)).collect();
        let targets: Vec<f64> = (0..40).map(|_| rng.gen_range(0.2..0.9)).collect();
        let base = mia_from_confidences(&members, &non_members, &targets);
        let shifted: Vec<f64> = targets.iter().map(|q| (q + 0.05).min(1.0)).collect();
        let up = mia_from_confidences(&members, &non_members, &shifted);
        assert!(up.rate >= base.rate, "shifting confidences up decreased the rate");
    }

    #[test]
    fn accuracy_cases() {
        // Constant predictor on balanced data.
        let mut model = MlpModel::init(&[2, 4, 3, 4], Activation::Tanh, 0).unwrap();
        let last = model.num_layers() - 1;
        for w in model.layers_mut()[last].weights.data_mut() {
            *w = 0.0;
        }
        model.layers_mut()[last].bias = vec![5.0, 0.0, 0.0, 0.0];
        let x = DenseMatrix::from_vec_unchecked(8, 2, vec![0.1; 16]);
        let y = vec![0, 1, 2, 3, 0, 1, 2, 3];
        assert!((accuracy(&model, &x, &y).unwrap() - 0.25).abs() < 1e-12);

        // Ties break toward the lowest class index: uniform logits.
        model.layers_mut()[last].bias = vec![0.0; 4];
        let all_zero = vec![0usize; 8];
        assert!((accuracy(&model, &x, &all_zero).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn asr_hardwired_model() {
        let mut model = MlpModel::init(&[2, 4, 3, 3], Activation::Tanh, 0).unwrap();
        let last = model.num_layers() - 1;
        for w in model.layers_mut()[last].weights.data_mut() {
            *w = 0.0;
        }
        model.layers_mut()[last].bias = vec![0.0, 9.0, 0.0];
        let x = DenseMatrix::from_vec_unchecked(5, 2, vec![0.3; 10]);
        assert_eq!(attack_success_rate(&model, &x, 1).unwrap(), 1.0);
        assert_eq!(attack_success_rate(&model, &x, 2).unwrap(), 0.0);
    }

    #[test]
    fn mix_is_stable_and_tag_sensitive() {
        assert_eq!(mix(7, "kmeans"), mix(7, "kmeans"));
        assert_ne!(mix(7, "kmeans"), mix(8, "kmeans"));
        assert_ne!(mix(7, "kmeans"), mix(7, "lp_retain"));
    }
}
