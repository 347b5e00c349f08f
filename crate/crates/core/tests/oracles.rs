// SPDX-License-Identifier: Apache-2.0

mod common;

use apb_triage::apb::Label;
use apb_triage::eval;
use apb_triage::faultgen::{self, AddressMap, Field, GenSpec, LabelCounts, PAIR_COUNT};
use apb_triage::forest::{best_split, SplitScratch};
use apb_triage::Sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn best_split_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut scratch = SplitScratch::default();
    for trial in 0..2000 {
        let rows = if trial % 2 == 0 { 8 } else { 24 };
        let inst = common::SplitInstance::random(&mut rng, rows, 4);
        let x = inst.matrix();
        let candidates: Vec<usize> = (0..4).collect();
        let got = best_split(
            &x,
            &inst.y,
            &inst.weights,
            &inst.rows,
            &candidates,
            inst.min_leaf,
            &mut scratch,
        );
        if let Err(e) = common::check_split(&inst, got) {
            panic!("trial {trial}: {e}");
        }
    }
}

#[test]
fn best_split_respects_candidate_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut scratch = SplitScratch::default();
    for _ in 0..300 {
        let inst = common::SplitInstance::random(&mut rng, 10, 6);
        let x = inst.matrix();
        let candidates = [1usize, 4];
        if let Some(s) = best_split(
            &x,
            &inst.y,
            &inst.weights,
            &inst.rows,
            &candidates,
            inst.min_leaf,
            &mut scratch,
        ) {
            assert!(candidates.contains(&s.feature));
        }
    }
}

#[test]
fn roc_auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut done = 0;
    while done < 2000 {
        let n = rng.gen_range(2..=100);
        let levels = rng.gen_range(1..=12);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / 4.0)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
            continue;
        }
        assert_eq!(
            eval::roc_auc(&scores, &labels).unwrap(),
            common::auc_pairs(&scores, &labels)
        );
        done += 1;
    }
}

fn has_pair(s: &Sample, field: Field, want: u32) -> bool {
    let words = field.words(s);
    (0..PAIR_COUNT).any(|p| words.iter().all(|w| (w >> p) & 0b11 == want))
}

#[test]
fn generated_labels_are_sound() {
    let map = AddressMap::new(vec![(0x1000, 0x1FFF), (0x4000_0000, 0x4FFF_FFFF)]).unwrap();
    let mut spec = GenSpec::new(LabelCounts::uniform(400), 3);
    spec.address_map = map.clone();
    spec.read_fraction = 0.3;
    let ds = faultgen::generate_dataset(&spec).unwrap();
    for s in &ds.samples {
        let in_map = s.addresses().iter().filter(|&&a| map.contains(a)).count();
        match s.label.unwrap() {
            Label::NoError => assert_eq!(in_map, 20),
            Label::OutOfRangeError => assert!(in_map < 20),
            Label::AddressError => {
                assert_eq!(in_map, 20);
                assert!(faultgen::stuck_pair_oracle(s, Field::Address).is_some());
            }
            Label::DataError0 => {
                assert_eq!(in_map, 20);
                assert!(has_pair(s, Field::Data, 0b00));
            }
            Label::DataError1 => {
                assert_eq!(in_map, 20);
                assert!(has_pair(s, Field::Data, 0b11));
            }
        }
    }
    for l in Label::ALL {
        assert_eq!(ds.count(l), 400);
    }
}

#[test]
fn stuck_pair_oracle_detects_every_data_fault() {
    let ds = faultgen::generate_dataset(&GenSpec::new(
        LabelCounts {
            data_error_0: 2000,
            data_error_1: 2000,
            ..LabelCounts::default()
        },
        11,
    ))
    .unwrap();
    for s in &ds.samples {
        assert!(faultgen::stuck_pair_oracle(s, Field::Data).is_some());
    }
}

#[test]
fn stuck_pair_oracle_rarely_fires_on_clean_data() {
    let ds = faultgen::generate_dataset(&GenSpec::new(
        LabelCounts {
            no_error: 10_000,
            ..LabelCounts::default()
        },
        12,
    ))
    .unwrap();
    let fires = ds
        .samples
        .iter()
        .filter(|s| faultgen::stuck_pair_oracle(s, Field::Data).is_some())
        .count();
    assert!(fires <= 1, "{fires} false fires");
}
