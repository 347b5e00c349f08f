// SPDX-License-Identifier: Apache-2.0

//! Train the out-of-range forest directly, inspect its trees and round-trip
//! the model file.

use apb_triage::cascade::{task_spec, train_stage};
use apb_triage::faultgen::{self, GenSpec, LabelCounts};
use apb_triage::forest::{self, featurize, FeatureLayout, Hyperparams, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let counts = LabelCounts {
        no_error: 500,
        out_of_range_error: 500,
        ..LabelCounts::default()
    };
    let train = faultgen::generate_dataset(&GenSpec::new(counts, 1))?;
    let test = faultgen::generate_dataset(&GenSpec::new(counts, 2))?;

    let hp = Hyperparams {
        tree_count: 50,
        ..Hyperparams::default()
    };
    let f = train_stage(&train.samples, Task::Oor, &hp, FeatureLayout::default())?;
    let depth = f.trees.iter().map(|t| t.depth()).max().unwrap_or(0);
    let leaves: usize = f.trees.iter().map(|t| t.leaves().count()).sum();
    println!(
        "{} trees, max depth {depth}, {leaves} leaves, {} features",
        f.trees.len(),
        f.n_features
    );

    let spec = task_spec(Task::Oor);
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let x = featurize(s, spec.field, FeatureLayout::default());
            f.classify(x.as_slice()).unwrap() == (s.label == Some(spec.positive))
        })
        .count();
    println!(
        "held-out accuracy {:.4}",
        correct as f64 / test.samples.len() as f64
    );

    let bytes = forest::save_forest(&f);
    assert_eq!(forest::load_forest(&bytes)?, f);
    println!("model file: {} bytes", bytes.len());
    Ok(())
}
