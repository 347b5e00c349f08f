// SPDX-License-Identifier: Apache-2.0

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let code = apb_triage::cli::run_cli(&args, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
