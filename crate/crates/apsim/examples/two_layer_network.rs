//! Chaining layers: each layer runs on its own array, the extracted
//! activations of one feeding the broadcast of the next.
//!
//! ```bash
//! cargo run --example two_layer_network
//! ```

use apsim::acsr::encode_acsr;
use apsim::cost::{random_activations, random_matrix};
use apsim::fc::{reference_network, run_network, Activation, LayerConfig, LayerParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> apsim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = LayerParams {
        abits: 8,
        activation: Activation::Relu,
        requant_shift: 5,
        ..LayerParams::default()
    };
    // 96 -> 64 -> 16
    let l1 = LayerConfig::build(
        encode_acsr(&random_matrix(&mut rng, 64, 96, 0.15, 8)?)?,
        &params,
    )?;
    let l2 = LayerConfig::build(
        encode_acsr(&random_matrix(&mut rng, 16, 64, 0.25, 8)?)?,
        &params,
    )?;
    let input = random_activations(&mut rng, 96, 0.4, 8, false)?;
    println!(
        "net: 96 -> 64 -> 16, nnz = {} + {}, input nnz = {}",
        l1.image.nnz(),
        l2.image.nnz(),
        input.nnz()
    );

    let cfgs = [l1, l2];
    let got = run_network(&cfgs, &input, None)?;
    let want = reference_network(&cfgs, &input)?;

    for (i, (g, w)) in got.layers.iter().zip(&want.layers).enumerate() {
        println!(
            "layer {}: {} cycles total, {} outputs, bit-exact vs reference: {}",
            i,
            g.report.total,
            g.outputs.nnz(),
            g.outputs == w.outputs && g.accumulators == w.accumulators
        );
    }
    println!("final outputs: {:?}", got.outputs.entries);
    Ok(())
}
