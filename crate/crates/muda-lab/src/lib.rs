//! # muda-lab
//!
//! A desk-scale machine-unlearning laboratory built on a self-contained
//! neural-network engine. It implements an eigenspace-alignment unlearning
//! framework (a dimensional-alignment loss plus self-distillation, trained
//! with alternating forget/recover phases), the standard baselines it is
//! compared against, and a feature-level evaluation protocol: dimensional
//! alignment, linear probing, clustering F1/NMI, membership inference, and
//! backdoor attack success rate.
//!
//! The crate is organized around six modules:
//!
//! - [`linalg`] — dense symmetric eigendecomposition, effective rank, and
//!   top-k subspace projectors.
//! - [`nnet`] — a compact tanh MLP with a reverse-mode tape, stop-gradient,
//!   losses, SGD, and bit-exact checkpoints.
//! - [`datagen`] — seeded Gaussian-blob datasets, forget/retain partitions,
//!   and backdoor poisoning.
//! - [`unlearn`] — the alignment unlearning method and baselines (FT,
//!   NegGrad, NegGrad+FT, EU-k, CF-k, classifier-only FT, retraining).
//! - [`metrics`] — the evaluation protocol and report rows.
//! - [`harness`] — experiment configs, seed sweeps, comparison tables, and
//!   the file formats behind the CLI.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, and the `muda-lab` binary for the subcommand interface.

pub mod datagen;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nnet;
pub mod unlearn;

pub use datagen::{gen_blobs, poison_backdoor, split_forget_retain, BlobConfig, DataBundle, ForgetSpec};
pub use harness::{
    compare_to_retrained, run_backdoor, run_experiment, run_stability, ComparisonTable,
    ExperimentConfig, HarnessError,
};
pub use linalg::{
    effective_rank, frobenius_norm, sym_eig, top_k_projector, DenseMatrix, EigenDecomposition,
    LinalgError,
};
pub use metrics::{
    accuracy, attack_success_rate, dimensional_alignment, evaluate_model, f1_forget, kmeans,
    linear_probe, mia_success_rate, nmi_forget, MetricsError, MetricsReport,
};
pub use nnet::{
    cross_entropy, kl_divergence, load_checkpoint, save_checkpoint, Activation, MlpModel, NnetError,
    SgdConfig, SgdOptimizer,
};
pub use unlearn::{
    cf_k, da_loss, eu_k, finetune, ft_classifier_only, muda_unlearn, neggrad, neggrad_ft,
    retrain_oracle, sd_loss, sd_target, Method, PhaseSchedule, PhaseTrace, TrainConfig,
    UnlearnConfig, UnlearnError,
};
