//! Area, energy, latency and throughput estimation, plus the sparsity and
//! wordlength design-space sweeps.
//!
//! Area is depth * (width * A_cell + A_tag): one tag-logic block per row
//! and one bitcell per grid position. Energy is activity based: every
//! cycle all rows fire their tag logic, a compare drives its masked
//! columns across all rows, and a write drives its masked columns in the
//! tagged rows only. The per-bitcell compare/write energies default to
//! uncalibrated 1 fJ placeholders; the tag energy and the area constants
//! come from a synthesized 28nm tag cell.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acsr::{encode_acsr, min_accumulator_bits, SparseMatrix};
use crate::ap::ActivityStats;
use crate::error::{Error, Result};
use crate::fc::{
    prepare_ap, run_layer, Activation, ActivationList, LayerConfig, LayerParams, MulMode,
};

/// Physical constants of the 28nm design point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConstants {
    /// CAM bitcell area, um^2.
    pub a_cell_um2: f64,
    /// Per-row tag logic area, um^2.
    pub a_tag_um2: f64,
    /// Per-row tag event energy, fJ.
    pub e_tag_fj: f64,
    /// Per-bitcell compare energy, fJ (uncalibrated placeholder).
    pub e_cell_cmp_fj: f64,
    /// Per-bitcell write energy, fJ (uncalibrated placeholder).
    pub e_cell_wr_fj: f64,
    /// Clock frequency, MHz.
    pub freq_mhz: f64,
}

impl Default for CostConstants {
    fn default() -> Self {
        CostConstants {
            a_cell_um2: 0.135,
            a_tag_um2: 7.1,
            e_tag_fj: 5.6,
            e_cell_cmp_fj: 1.0,
            e_cell_wr_fj: 1.0,
            freq_mhz: 1000.0,
        }
    }
}

impl CostConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a_cell_um2,
            self.a_tag_um2,
            self.e_tag_fj,
            self.e_cell_cmp_fj,
            self.e_cell_wr_fj,
            self.freq_mhz,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("cost constants must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// Derived figures for one run on one array.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Estimates {
    pub area_mm2: f64,
    pub energy_j: f64,
    pub latency_s: f64,
    pub inferences_per_s: f64,
    pub gops: f64,
}

/// area = depth * (width * A_cell + A_tag), in mm^2.
pub fn estimate_area(depth: usize, width: usize, c: &CostConstants) -> f64 {
    depth as f64 * (width as f64 * c.a_cell_um2 + c.a_tag_um2) * 1e-6
}

/// Activity-based energy in joules: per cycle, compare cells over all
/// rows, write cells over tagged rows, tag events over all rows.
pub fn estimate_energy(stats: &ActivityStats, c: &CostConstants) -> f64 {
    let cmp = stats.compare_col_cycles as f64 * stats.rows as f64 * c.e_cell_cmp_fj;
    let wr = stats.write_cells_tagged as f64 * c.e_cell_wr_fj;
    let tag = stats.cycles as f64 * stats.rows as f64 * c.e_tag_fj;
    (cmp + wr + tag) * 1e-15
}

/// Latency, inference rate, and effective arithmetic throughput
/// (2 operations per stored nonzero weight).
pub fn estimate_throughput(cycles: u64, nnz_effective: usize, c: &CostConstants) -> (f64, f64, f64) {
    let latency_s = cycles as f64 / (c.freq_mhz * 1e6);
    let inferences_per_s = 1.0 / latency_s;
    let gops = 2.0 * nnz_effective as f64 / latency_s / 1e9;
    (latency_s, inferences_per_s, gops)
}

/// Assembles the full estimate set for one run.
pub fn estimates(
    depth: usize,
    width: usize,
    stats: &ActivityStats,
    nnz_effective: usize,
    c: &CostConstants,
) -> Estimates {
    let (latency_s, inferences_per_s, gops) = estimate_throughput(stats.cycles, nnz_effective, c);
    Estimates {
        area_mm2: estimate_area(depth, width, c),
        energy_j: estimate_energy(stats, c),
        latency_s,
        inferences_per_s,
        gops,
    }
}

/// The layer template the sweeps instantiate at each grid point.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub rows: usize,
    pub cols: usize,
    pub wbits: u32,
    pub abits: u32,
    pub weight_density: f64,
    pub act_density: f64,
    pub activation: Activation,
    pub acts_signed: bool,
    pub long_step: usize,
    pub seed: u64,
    pub mul: MulMode,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            rows: 64,
            cols: 64,
            wbits: 8,
            abits: 8,
            weight_density: 0.1,
            act_density: 0.5,
            activation: Activation::Relu,
            acts_signed: false,
            long_step: 16,
            seed: 42,
            mul: MulMode::BitSerial,
        }
    }
}

/// Deterministic random matrix with an exact nonzero count.
pub fn random_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    density: f64,
    wbits: u32,
) -> Result<SparseMatrix> {
    let cells = rows * cols;
    let nnz = ((density * cells as f64).round() as usize).min(cells);
    let (lo, hi) = (-(1i64 << (wbits - 1)), (1i64 << (wbits - 1)) - 1);
    let entries = sample(rng, cells, nnz)
        .into_iter()
        .map(|pos| {
            let v = loop {
                let v = rng.gen_range(lo..=hi);
                if v != 0 {
                    break v;
                }
            };
            ((pos / cols) as u32, (pos % cols) as u32, v)
        })
        .collect();
    SparseMatrix::new(rows, cols, entries, wbits, 0)
}

/// Deterministic random activation list with an exact nonzero count.
pub fn random_activations(
    rng: &mut ChaCha8Rng,
    cols: usize,
    density: f64,
    bits: u32,
    signed: bool,
) -> Result<ActivationList> {
    let nnz = ((density * cols as f64).round() as usize).min(cols);
    let entries = sample(rng, cols, nnz)
        .into_iter()
        .map(|c| {
            let v = loop {
                let v = if signed {
                    rng.gen_range(-(1i64 << (bits - 1))..(1i64 << (bits - 1)))
                } else {
                    rng.gen_range(0..(1i64 << bits))
                };
                if v != 0 {
                    break v;
                }
            };
            (c as u32, v)
        })
        .collect();
    ActivationList::new(entries, bits, signed, 0)
}

fn point_rng(seed: u64, point: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(point as u64 + 1)))
}

/// Builds a layer for a sweep point. All grid points share one field map,
/// sized for the worst case (blocks up to `cols`), so area scales purely
/// with nnz and cycle counts are comparable across the grid.
fn sweep_layer(
    spec: &SweepSpec,
    wbits: u32,
    abits: u32,
    density: f64,
    point: usize,
) -> Result<(LayerConfig, ActivationList)> {
    let mut rng = point_rng(spec.seed, point);
    let matrix = random_matrix(&mut rng, spec.rows, spec.cols, density, wbits)?;
    let image = encode_acsr(&matrix)?;
    let cfg = LayerConfig::build(
        image,
        &LayerParams {
            abits,
            kbits: Some(min_accumulator_bits(wbits, abits, spec.cols)),
            acts_signed: spec.acts_signed,
            activation: spec.activation.clone(),
            requant_shift: 0,
            long_step: spec.long_step,
            mul: spec.mul.clone(),
            fmap_max_block: Some(spec.cols),
            out_frac_bits: 0,
        },
    )?;
    let acts = random_activations(&mut rng, spec.cols, spec.act_density, abits, spec.acts_signed)?;
    Ok((cfg, acts))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SparsityRow {
    pub density: f64,
    pub nnz: usize,
    pub area_mm2: f64,
    pub energy_per_inference_j: f64,
    pub cycles: u64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct WordlengthRow {
    pub wordlength: u32,
    pub cycles_mul: u64,
    pub energy_per_inference_j: f64,
}

/// Runs work items over a fixed-size index grid with up to `jobs` worker
/// threads, merging results in grid order so the output is identical at
/// any job count.
fn run_grid<T: Send>(
    points: usize,
    jobs: usize,
    work: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let jobs = jobs.max(1).min(points.max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<T>>>> =
        (0..points).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= points {
                    break;
                }
                *slots[i].lock().unwrap() = Some(work(i));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("grid point not executed"))
        .collect()
}

/// Sparsity sweep: one layer per density on identical dimensions and a
/// shared field map; tabulates area, per-inference energy (load excluded),
/// and cycles.
pub fn sweep_sparsity(
    spec: &SweepSpec,
    densities: &[f64],
    consts: &CostConstants,
    jobs: usize,
) -> Result<Vec<SparsityRow>> {
    if densities.iter().any(|&d| !(0.0..=1.0).contains(&d) || d <= 0.0) {
        return Err(Error::Config("densities must lie in (0, 1]".to_string()));
    }
    run_grid(densities.len(), jobs, |i| {
        let density = densities[i];
        let (cfg, acts) = sweep_layer(spec, spec.wbits, spec.abits, density, i)?;
        let (mut ap, _) = prepare_ap(&cfg)?;
        let before = ap.stats();
        run_layer(&mut ap, &cfg, &acts)?;
        let stats = ap.stats().since(&before);
        Ok(SparsityRow {
            density,
            nnz: cfg.image.nnz(),
            area_mm2: estimate_area(cfg.image.nnz(), cfg.fmap.width(), consts),
            energy_per_inference_j: estimate_energy(&stats, consts),
            cycles: stats.cycles,
        })
    })
}

/// Wordlength sweep: m = n over the grid on one fixed sparsity pattern
/// (so only the wordlength varies), running broadcast then the multiply
/// stage and tabulating the multiply cycles and per-inference multiply
/// energy. Accumulators here may exceed the extraction width, which is
/// fine: nothing is read back.
pub fn sweep_wordlength(
    spec: &SweepSpec,
    wordlengths: &[u32],
    consts: &CostConstants,
    jobs: usize,
) -> Result<Vec<WordlengthRow>> {
    if wordlengths.iter().any(|&w| w == 0 || w > 32) {
        return Err(Error::Config("wordlengths must lie in 1..=32".to_string()));
    }
    run_grid(wordlengths.len(), jobs, |i| {
        let bits = wordlengths[i];
        // point 0 for every wordlength: identical nonzero pattern
        let (cfg, acts) = sweep_layer(spec, bits, bits, spec.weight_density, 0)?;
        let (mut ap, _) = prepare_ap(&cfg)?;
        crate::fc::broadcast_activations(&mut ap, &cfg.fmap, &acts, cfg.image.n_cols)?;
        let before = ap.stats();
        crate::fc::multiply_stage(&mut ap, &cfg.fmap, cfg.ops, &cfg.mul)?;
        let stats = ap.stats().since(&before);
        Ok(WordlengthRow {
            wordlength: bits,
            cycles_mul: stats.cycles,
            energy_per_inference_j: estimate_energy(&stats, consts),
        })
    })
}

fn sci(v: f64) -> String {
    format!("{:.5e}", v)
}

pub fn write_sparsity_csv(out: &mut impl Write, rows: &[SparsityRow]) -> std::io::Result<()> {
    writeln!(out, "density,nnz,area_mm2,energy_per_inference_j,cycles")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            sci(r.density),
            r.nnz,
            sci(r.area_mm2),
            sci(r.energy_per_inference_j),
            r.cycles
        )?;
    }
    Ok(())
}

pub fn write_wordlength_csv(out: &mut impl Write, rows: &[WordlengthRow]) -> std::io::Result<()> {
    writeln!(out, "wordlength,cycles_mul,energy_per_inference_j")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{}",
            r.wordlength,
            r.cycles_mul,
            sci(r.energy_per_inference_j)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_formula_and_linearity() {
        let c = CostConstants::default();
        // 1000 rows x 100 columns: 1000 * (100*0.135 + 7.1) um^2
        let a = estimate_area(1000, 100, &c);
        assert!((a - 0.0206).abs() < 1e-12, "{a}");
        assert_eq!(estimate_area(0, 100, &c), 0.0);
        let double = estimate_area(2000, 100, &c);
        assert_eq!(double, 2.0 * a);
        // linear in width through the cell term
        let w1 = estimate_area(10, 50, &c);
        let w2 = estimate_area(10, 100, &c);
        assert!((w2 - w1 - 10.0 * 50.0 * 0.135 * 1e-6).abs() < 1e-15);
    }

    #[test]
    fn energy_formula() {
        let c = CostConstants::default();
        // one tag-only cycle on 10 rows: 10 * 5.6 fJ
        let stats = ActivityStats {
            cycles: 1,
            compare_col_cycles: 0,
            write_cells_tagged: 0,
            rows: 10,
        };
        assert!((estimate_energy(&stats, &c) - 56e-15).abs() < 1e-25);
        // zero-cycle report
        let zero = ActivityStats {
            rows: 10,
            ..Default::default()
        };
        assert_eq!(estimate_energy(&zero, &c), 0.0);
        // additivity over concatenated streams
        let a = ActivityStats {
            cycles: 3,
            compare_col_cycles: 5,
            write_cells_tagged: 11,
            rows: 10,
        };
        let b = ActivityStats {
            cycles: 7,
            compare_col_cycles: 2,
            write_cells_tagged: 4,
            rows: 10,
        };
        let merged = a.merged(&b);
        let sum = estimate_energy(&a, &c) + estimate_energy(&b, &c);
        assert!((estimate_energy(&merged, &c) - sum).abs() < 1e-24);
    }

    #[test]
    fn throughput_formula() {
        let c = CostConstants::default();
        let (lat, inf, _) = estimate_throughput(1_000_000, 1000, &c);
        assert!((lat - 1e-3).abs() < 1e-15);
        assert!((inf - 1000.0).abs() < 1e-9);
        // cycles == f * 1e6 is exactly one second
        let (lat, _, _) = estimate_throughput(1_000_000_000, 1, &c);
        assert!((lat - 1.0).abs() < 1e-12);
        // halving cycles doubles the rate; reciprocity holds tightly
        let (lat2, inf2, _) = estimate_throughput(500_000, 1000, &c);
        assert!((inf2 - 2000.0).abs() < 1e-9);
        assert!((lat2 * inf2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparsity_sweep_area_law_and_energy_trend() {
        let spec = SweepSpec::default();
        let c = CostConstants::default();
        let rows = sweep_sparsity(&spec, &[0.5, 1.0], &c, 1).unwrap();
        assert_eq!(rows.len(), 2);
        // depth = nnz law: exact factor-of-two area
        assert_eq!(rows[0].nnz * 2, rows[1].nnz);
        assert!((rows[0].area_mm2 * 2.0 - rows[1].area_mm2).abs() < 1e-15);
        let ratio = rows[0].energy_per_inference_j / rows[1].energy_per_inference_j;
        assert!((0.4..=0.6).contains(&ratio), "energy ratio {ratio}");

        // empty grid -> empty table
        assert!(sweep_sparsity(&spec, &[], &c, 1).unwrap().is_empty());
        assert!(sweep_sparsity(&spec, &[0.0], &c, 1).is_err());
        assert!(sweep_sparsity(&spec, &[1.5], &c, 1).is_err());
    }

    #[test]
    fn wordlength_sweep_trends() {
        let spec = SweepSpec::default();
        let c = CostConstants::default();
        let rows = sweep_wordlength(&spec, &[1, 8, 16], &c, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].cycles_mul > 0);
        let ratio = rows[2].cycles_mul as f64 / rows[1].cycles_mul as f64;
        assert!((3.6..=4.4).contains(&ratio), "quadratic ratio {ratio}");

        // LUT mode: constant multiply cycles across wordlengths
        let table: Vec<(i64, i64, i64)> = (-2..2)
            .flat_map(|w| (0..4).map(move |b| (w, b, w * b)))
            .collect();
        let lut_spec = SweepSpec {
            mul: MulMode::Lut(table),
            act_density: 1.0,
            weight_density: 0.05,
            ..SweepSpec::default()
        };
        // constrain operand values so the table covers them
        // (weights in -2..2, activations 0..4 cannot be guaranteed by the
        // generator, so only the cycle count is asserted here)
        let rows = sweep_wordlength(&lut_spec, &[8, 16], &c, 1).unwrap();
        assert_eq!(rows[0].cycles_mul, rows[1].cycles_mul);
    }

    #[test]
    fn sweeps_deterministic_at_any_job_count() {
        let spec = SweepSpec::default();
        let c = CostConstants::default();
        let grid = [0.1, 0.3, 0.55, 0.8];
        let base = sweep_sparsity(&spec, &grid, &c, 1).unwrap();
        for jobs in [2, 4, 7] {
            let other = sweep_sparsity(&spec, &grid, &c, jobs).unwrap();
            let mut a = Vec::new();
            write_sparsity_csv(&mut a, &base).unwrap();
            let mut b = Vec::new();
            write_sparsity_csv(&mut b, &other).unwrap();
            assert_eq!(a, b, "jobs={jobs}");
        }
    }

    #[test]
    fn csv_number_format() {
        assert_eq!(sci(0.0206), "2.06000e-2");
        assert_eq!(sci(1234.5), "1.23450e3");
    }
}
