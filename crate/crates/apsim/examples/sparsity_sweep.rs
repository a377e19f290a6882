//! Design-space sweep over weight density: the CAM depth equals the
//! nonzero count, so area tracks density exactly and energy per inference
//! follows almost linearly.
//!
//! ```bash
//! cargo run --example sparsity_sweep
//! ```

use apsim::cost::{sweep_sparsity, write_sparsity_csv, CostConstants, SweepSpec};

fn main() -> apsim::Result<()> {
    let spec = SweepSpec {
        rows: 128,
        cols: 128,
        ..SweepSpec::default()
    };
    let grid = [0.05, 0.1, 0.2, 0.4, 0.8, 1.0];
    let rows = sweep_sparsity(&spec, &grid, &CostConstants::default(), 2)?;

    let mut csv = Vec::new();
    write_sparsity_csv(&mut csv, &rows).unwrap();
    print!("{}", String::from_utf8(csv).unwrap());

    let full = rows.last().unwrap();
    println!("\nrelative to density 1.0:");
    for r in &rows {
        println!(
            "  density {:>4.2}: area x{:.3}, energy/inference x{:.3}",
            r.density,
            r.area_mm2 / full.area_mm2,
            r.energy_per_inference_j / full.energy_per_inference_j
        );
    }
    Ok(())
}
