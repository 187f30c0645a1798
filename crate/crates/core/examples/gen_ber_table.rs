//! Regenerates `data/apsk32_ber.json`, the AWGN BER table shipped for 32APSK.
//!
//! Minimum-distance detection, BER approximated as SER / 5. Points with
//! fewer than 50 symbol errors are dropped.
//!
//!     cargo run --release -p isaclab-core --example gen_ber_table

use std::fmt::Write as _;

use isaclab::constellations::{monte_carlo_ber, Constellation};

const SEED: u64 = 0x5eed_a95c;
const SYMBOLS: usize = 4_000_000;
const MIN_ERRORS: usize = 50;

fn main() -> std::io::Result<()> {
    let apsk = Constellation::apsk32();
    let grid: Vec<f64> = (0..=26).map(|db| db as f64).collect();
    let rows = monte_carlo_ber(&apsk, &grid, SYMBOLS, SEED);

    let mut samples = Vec::new();
    let mut last = 0.5;
    for (gamma, ber, errors) in rows {
        if errors < MIN_ERRORS || ber >= last {
            continue;
        }
        samples.push(format!("[{gamma:.10e}, {ber:.6e}]"));
        last = ber;
    }

    let mut out = String::new();
    writeln!(out, "{{").unwrap();
    writeln!(
        out,
        "  \"generated\": \"examples/gen_ber_table.rs: 32APSK AWGN Monte-Carlo, {SYMBOLS} symbols per point, seed {SEED:#x}, BER = SER/5\","
    )
    .unwrap();
    writeln!(out, "  \"gamma_unit\": \"linear symbol SNR\",").unwrap();
    writeln!(out, "  \"samples\": [\n    {}\n  ]", samples.join(",\n    ")).unwrap();
    writeln!(out, "}}").unwrap();

    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/apsk32_ber.json");
    std::fs::write(path, out)?;
    println!("wrote {} samples to {path}", samples.len());
    Ok(())
}
