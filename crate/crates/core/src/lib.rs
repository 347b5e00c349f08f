// SPDX-License-Identifier: Apache-2.0

//! APB bus-fault triage.
//!
//! The pipeline reads a VCD waveform ([`vcd`]), reconstructs APB transfers
//! ([`apb`]), cuts them into 20-transaction samples and labels each sample
//! with a four-stage random-forest cascade ([`cascade`], built on
//! [`forest`]). [`faultgen`] produces labeled training corpora by injecting
//! bus faults into clean traffic, and [`eval`] scores the models.
//!
//! ```text
//! VCD text ──parse_vcd──▶ VcdDocument ──extract_transactions──▶ [ApbTransaction]
//!     ──group_samples──▶ [Sample] ──CascadeModel::diagnose──▶ Label per window
//! ```
//!
//! The runnable programs under `examples/` walk through each stage.

pub mod apb;
pub mod cascade;
pub mod cli;
pub mod eval;
pub mod faultgen;
pub mod forest;
pub mod vcd;

pub use apb::{
    extract_transactions, group_samples, synth_waveform, ApbTransaction, Label, ReportClass,
    Sample, SignalMap, SAMPLE_LEN,
};
pub use cascade::{load_cascade, save_cascade, train_cascade, CascadeModel};
pub use faultgen::{
    generate_dataset, stuck_pair_oracle, AddressMap, Dataset, Field, GenSpec, LabelCounts,
};
pub use forest::{
    featurize, load_forest, save_forest, train_forest, FeatureLayout, Forest, Hyperparams,
};
pub use vcd::{emit_vcd, parse_vcd, VcdDocument};

/// Runs `f` on a dedicated rayon pool of `jobs` workers (`None` = rayon's
/// default). Results do not depend on the worker count.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}
