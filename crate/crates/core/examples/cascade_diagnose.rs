// SPDX-License-Identifier: Apache-2.0

//! Train a small cascade and diagnose a waveform that carries a stuck data
//! pair in its second window.

use apb_triage::apb::{self, SignalMap};
use apb_triage::cascade::train_cascade;
use apb_triage::faultgen::{self, AddressMap, GenSpec, LabelCounts, StuckPattern};
use apb_triage::forest::Hyperparams;
use apb_triage::vcd;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = faultgen::generate_dataset(&GenSpec::new(LabelCounts::uniform(300), 42))?;
    let hp = Hyperparams {
        tree_count: 40,
        ..Hyperparams::default()
    };
    let model = train_cascade(&ds, &hp)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let map = AddressMap::default();
    let clean = faultgen::gen_clean_sample(&mut rng, &map, 0.0);
    let faulty = faultgen::inject_data_stuck_at(
        &faultgen::gen_clean_sample(&mut rng, &map, 0.0),
        9,
        StuckPattern::Zeros,
    );
    let mut txns: Vec<_> = clean
        .transactions
        .iter()
        .chain(&faulty.transactions)
        .copied()
        .collect();
    apb::canonical_times(&mut txns, 10);

    let signals = SignalMap::default();
    let text = vcd::emit_vcd(&apb::synth_waveform(&txns, &signals, 10)?);
    let back = apb::extract_transactions(&vcd::parse_vcd(&text)?, &signals)?;
    for (i, s) in apb::group_samples(&back).samples.iter().enumerate() {
        let d = model.diagnose_traced(s);
        println!("window {i}: {} ({} stages run)", d.label, d.stages_run);
    }
    Ok(())
}
