// SPDX-License-Identifier: Apache-2.0

//! Stratified 5-fold cross-validation of the address-short stage.

use apb_triage::cli::cross_validate_stage;
use apb_triage::faultgen::{self, GenSpec, LabelCounts};
use apb_triage::forest::{FeatureLayout, Hyperparams, Task};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let counts = LabelCounts {
        no_error: 400,
        address_error: 400,
        ..LabelCounts::default()
    };
    let ds = faultgen::generate_dataset(&GenSpec::new(counts, 42))?;
    let hp = Hyperparams {
        tree_count: 50,
        ..Hyperparams::default()
    };
    for layout in [FeatureLayout::RawBits, FeatureLayout::BitsWithPairStats] {
        let cv = cross_validate_stage(&ds.samples, Task::Addr, &hp, layout, 5, 42)?;
        println!("{layout:?}: accuracy {cv}  folds {:?}", cv.fold_scores);
    }
    Ok(())
}
