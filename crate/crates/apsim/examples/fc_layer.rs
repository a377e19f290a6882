//! One fully-connected layer end to end: broadcast, multiply, soft
//! reduction, RELU, extraction — checked bit-exactly against the host
//! reference and against the closed-form cycle counts.
//!
//! ```bash
//! cargo run --example fc_layer
//! ```

use apsim::acsr::encode_acsr;
use apsim::cost::{random_activations, random_matrix};
use apsim::fc::{prepare_ap, reference_layer, run_layer, Activation, LayerConfig, LayerParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> apsim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(128);
    let (rows, cols) = (128, 128);
    let matrix = random_matrix(&mut rng, rows, cols, 0.10, 8)?;
    let image = encode_acsr(&matrix)?;
    println!(
        "layer {}x{} at 10% weight density: nnz = {}, max block = {}",
        rows,
        cols,
        image.nnz(),
        image.max_block_len()
    );

    let cfg = LayerConfig::build(
        image,
        &LayerParams {
            abits: 8,
            activation: Activation::Relu,
            requant_shift: 4,
            ..LayerParams::default()
        },
    )?;
    println!(
        "accumulator k = {} bits, PU word width = {} bits",
        cfg.fmap.c.len,
        cfg.fmap.width()
    );

    let acts = random_activations(&mut rng, cols, 0.3, 8, false)?;
    let (mut ap, load_cycles) = prepare_ap(&cfg)?;
    let got = run_layer(&mut ap, &cfg, &acts)?;
    let want = reference_layer(&cfg, &acts)?;

    println!("\nper-stage cycles (measured == closed form):");
    let pairs = [
        ("load", load_cycles, want.report.load),
        ("broadcast", got.report.broadcast, want.report.broadcast),
        ("multiply", got.report.multiply, want.report.multiply),
        ("reduce", got.report.reduce, want.report.reduce),
        ("activation", got.report.activation, want.report.activation),
        ("extract", got.report.extract, want.report.extract),
        ("restore", got.report.restore, want.report.restore),
    ];
    for (name, measured, formula) in pairs {
        println!("  {name:10} {measured:>6}  {}", if measured == formula { "ok" } else { "MISMATCH" });
    }

    println!(
        "\naccumulators bit-exact: {}",
        got.accumulators == want.accumulators
    );
    println!(
        "extracted activations bit-exact: {} ({} nonzero outputs)",
        got.outputs == want.outputs,
        got.outputs.nnz()
    );
    for &(row, v) in got.outputs.entries.iter().take(6) {
        println!("  row {row:>3} -> {v}");
    }
    Ok(())
}
