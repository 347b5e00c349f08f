// SPDX-License-Identifier: Apache-2.0

//! Generate a labeled corpus, look at one sample of each label and check
//! the data faults with the stuck-pair oracle.

use apb_triage::apb::Label;
use apb_triage::faultgen::{self, AddressMap, Field, GenSpec, LabelCounts};

fn main() -> Result<(), faultgen::FaultGenError> {
    let mut spec = GenSpec::new(LabelCounts::uniform(200), 42);
    spec.address_map =
        AddressMap::new(vec![(0x0000_0000, 0x0000_FFFF), (0x4000_0000, 0x4000_0FFF)])?;
    spec.read_fraction = 0.25;
    let ds = faultgen::generate_dataset(&spec)?;

    for label in Label::ALL {
        let s = ds.samples.iter().find(|s| s.label == Some(label)).unwrap();
        println!("{label} ({} samples)", ds.count(label));
        for t in &s.transactions[..3] {
            let flag = if spec.address_map.contains(t.address) {
                ""
            } else {
                "  <- outside map"
            };
            println!("    {t}{flag}");
        }
        if let Some(p) = faultgen::stuck_pair_oracle(s, Field::Data) {
            println!("    data pair {} stuck ({:?})", p.pair, p.pattern);
        }
        if label == Label::AddressError {
            let p = faultgen::stuck_pair_oracle(s, Field::Address).unwrap();
            println!("    address pair {} shorted", p.pair);
        }
    }

    // single-word fault models
    assert_eq!(faultgen::wired_or(0x88, 3), 0x98);
    assert_eq!(
        faultgen::force_pair(0xD5, 2, faultgen::StuckPattern::Ones),
        0xDD
    );

    let mut jsonl = ds.to_jsonl_bytes();
    jsonl.truncate(jsonl.iter().position(|&b| b == b'\n').unwrap());
    println!("header: {}", String::from_utf8_lossy(&jsonl));
    Ok(())
}
