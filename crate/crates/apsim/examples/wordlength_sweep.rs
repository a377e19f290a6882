//! Design-space sweep over arithmetic precision: bit-serial multiply time
//! grows quadratically with the wordlength, which is why low-precision
//! networks gain so much on this machine.
//!
//! ```bash
//! cargo run --example wordlength_sweep
//! ```

use apsim::cost::{sweep_wordlength, write_wordlength_csv, CostConstants, SweepSpec};

fn main() -> apsim::Result<()> {
    let spec = SweepSpec::default();
    let grid = [1, 2, 4, 8, 16, 32];
    let rows = sweep_wordlength(&spec, &grid, &CostConstants::default(), 2)?;

    let mut csv = Vec::new();
    write_wordlength_csv(&mut csv, &rows).unwrap();
    print!("{}", String::from_utf8(csv).unwrap());

    println!("\ndoubling ratios of the multiply stage:");
    for pair in rows.windows(2) {
        if pair[1].wordlength == 2 * pair[0].wordlength {
            println!(
                "  {:>2} -> {:>2} bits: x{:.3}",
                pair[0].wordlength,
                pair[1].wordlength,
                pair[1].cycles_mul as f64 / pair[0].cycles_mul as f64
            );
        }
    }
    println!("(a pure quadratic would give x4.0 at every doubling)");
    Ok(())
}
