// SPDX-License-Identifier: Apache-2.0

//! Build an APB waveform from a transfer list, recover the transfers from
//! the VCD text and cut them into 20-transfer samples.

use apb_triage::apb::{self, ApbTransaction, SignalMap};
use apb_triage::vcd;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let map = SignalMap::default();
    let txns: Vec<ApbTransaction> = (0..45u32)
        .map(|i| ApbTransaction {
            address: 0x1000 + 4 * i,
            data: 0xD5 ^ i,
            is_write: i % 4 != 3,
            // a gap after every tenth transfer leaves the bus idle
            time: 10 + 20 * i as u64 + 40 * (i / 10) as u64,
        })
        .collect();

    let doc = apb::synth_waveform(&txns, &map, 10)?;
    let text = vcd::emit_vcd(&doc);
    println!(
        "{} bytes of VCD, {} value changes",
        text.len(),
        doc.changes().len()
    );

    let back = apb::extract_transactions(&vcd::parse_vcd(&text)?, &map)?;
    assert_eq!(back, txns);
    for t in back.iter().take(5) {
        println!("@{:>4} {t}", t.time);
    }

    let windows = apb::group_samples(&back);
    println!("{} samples", windows.samples.len());
    if let Some(tail) = windows.short_tail {
        println!("warning: {tail}");
    }
    println!("signal map:\n{}", map.to_json());
    Ok(())
}
