//! Turning instruction activity into silicon numbers: area from the grid
//! geometry, energy from per-cycle compare/write/tag activity, throughput
//! from the cycle count.
//!
//! ```bash
//! cargo run --example cost_report
//! ```

use apsim::acsr::encode_acsr;
use apsim::cost::{estimates, random_activations, random_matrix, CostConstants};
use apsim::fc::{prepare_ap, run_layer, Activation, LayerConfig, LayerParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> apsim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (rows, cols) = (256, 256);
    let matrix = random_matrix(&mut rng, rows, cols, 0.08, 8)?;
    let image = encode_acsr(&matrix)?;
    let cfg = LayerConfig::build(
        image,
        &LayerParams {
            abits: 8,
            activation: Activation::Relu,
            requant_shift: 4,
            ..LayerParams::default()
        },
    )?;
    let acts = random_activations(&mut rng, cols, 0.3, 8, false)?;

    let (mut ap, _) = prepare_ap(&cfg)?;
    let before = ap.stats();
    let result = run_layer(&mut ap, &cfg, &acts)?;
    let stats = ap.stats().since(&before);

    let consts = CostConstants::default();
    let est = estimates(cfg.image.nnz(), cfg.fmap.width(), &stats, cfg.image.nnz(), &consts);

    println!(
        "array: {} PUs x {} bit columns ({} nonzero weights)",
        cfg.image.nnz(),
        cfg.fmap.width(),
        cfg.image.nnz()
    );
    println!("inference: {} cycles", result.report.total);
    println!("  broadcast {:>6}", result.report.broadcast);
    println!("  multiply  {:>6}", result.report.multiply);
    println!("  reduce    {:>6}", result.report.reduce);
    println!("  other     {:>6}", result.report.activation + result.report.extract + result.report.restore);
    println!();
    println!("estimates at {} MHz:", consts.freq_mhz);
    println!("  area          {:.4} mm^2", est.area_mm2);
    println!("  energy        {:.3e} J/inference", est.energy_j);
    println!("  latency       {:.3e} s", est.latency_s);
    println!("  throughput    {:.0} inferences/s", est.inferences_per_s);
    println!("  effective     {:.3} GOP/s (2 ops per stored weight)", est.gops);
    println!();
    println!("note: per-bitcell compare/write energies are uncalibrated 1 fJ");
    println!("placeholders; tag energy and areas come from a synthesized 28nm");
    println!("tag cell. Override them with a costs TOML file.");
    Ok(())
}
