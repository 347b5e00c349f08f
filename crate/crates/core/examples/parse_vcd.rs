// SPDX-License-Identifier: Apache-2.0

//! Parse a small waveform, query signals with zero-order hold and write it
//! back out.

use apb_triage::vcd::{self, to_u64, FourState};

const TEXT: &str = "\
$timescale 1ns $end
$scope module top $end
$var wire 1 ! clk $end
$var wire 8 # bus [7:0] $end
$upscope $end
$enddefinitions $end
#0
0!
bx #
#10
1!
b1010 #
#20
0!
bz1 #
";

fn main() -> Result<(), vcd::VcdError> {
    let doc = vcd::parse_vcd(TEXT)?;
    println!("timescale {}", doc.timescale());
    for v in doc.vars() {
        println!("var {} ({} bits) as `{}`", v.reference, v.width, v.id_code);
    }

    let bus = doc.var_by_reference("top.bus").expect("declared above");
    for t in [0, 5, 10, 15, 20, 99] {
        let bits = doc.signal_value_at(&bus.id_code, t)?;
        let text: String = bits.iter().map(|b| b.as_char()).collect();
        match to_u64(&bits) {
            Some(v) => println!("t={t:>2} bus={text} (0x{v:02X})"),
            None => println!("t={t:>2} bus={text}"),
        }
    }
    // `b1010` was padded with zeros, `bz1` with z
    assert_eq!(doc.signal_value_at("#", 20)?[0], FourState::Z);

    let emitted = vcd::emit_vcd(&doc);
    assert_eq!(vcd::parse_vcd(&emitted)?, doc);
    print!("\n{emitted}");
    Ok(())
}
