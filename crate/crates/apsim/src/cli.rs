//! Command-line driver: `run`, `check`, `sweep`, and `trace`.
//!
//! Configuration comes from an optional TOML file plus flag overrides;
//! flags win. Exit codes are a stable contract: 0 success, 1 bad
//! configuration or input, 2 violated simulator contract, 3 verification
//! mismatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::acsr::{encode_acsr, read_matrix_market};
use crate::cost::{
    estimates, sweep_sparsity, sweep_wordlength, write_sparsity_csv, write_wordlength_csv,
    CostConstants, Estimates, SweepSpec,
};
use crate::error::{Error, Result};
use crate::fc::{
    load_activations, load_lut_csv, reference_network, run_network, Activation, CycleReport,
    LayerConfig, LayerParams, LutSpec, MulMode, NetworkResult,
};

#[derive(Parser)]
#[command(name = "apsim", version, about = "Associative processing-in-memory simulator and cost model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a network and write the structured result file.
    Run(CommonArgs),
    /// Run both the simulator and the reference pipeline and compare them.
    Check(CheckArgs),
    /// Run a design-space sweep and write a CSV table.
    Sweep(CommonArgs),
    /// Run with instruction tracing and write one record per cycle.
    Trace(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight matrices, one Matrix Market file per layer.
    #[arg(long, num_args = 1.., value_name = "PATH")]
    weights: Option<Vec<PathBuf>>,
    /// Input activations: CSV of index,value or a dense vector file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Weight wordlength in bits.
    #[arg(long)]
    wbits: Option<u32>,
    /// Activation wordlength in bits.
    #[arg(long)]
    abits: Option<u32>,
    /// Accumulator wordlength override (must be at least the safe minimum).
    #[arg(long)]
    kbits: Option<u32>,
    /// Activation function: relu, sigmoid, tanh, or none (all layers).
    #[arg(long)]
    activation: Option<String>,
    /// Weight fraction bits for quantizing real-valued matrices.
    #[arg(long)]
    scale: Option<u32>,
    /// Activation fraction bits.
    #[arg(long)]
    act_scale: Option<u32>,
    /// Requantization shift applied when extracting activations.
    #[arg(long)]
    requant_shift: Option<u32>,
    /// Treat activations as signed two's complement.
    #[arg(long)]
    signed_acts: bool,
    /// Long tag-move step (power of two).
    #[arg(long)]
    long_step: Option<usize>,
    /// Cost constants TOML file.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Seed for sweep instance generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (result JSON for run, CSV for sweep).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace output path (one JSON record per line).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Maximum number of trace records.
    #[arg(long)]
    limit: Option<usize>,
    /// Worker threads for sweeps.
    #[arg(long)]
    jobs: Option<usize>,
    /// Sweep parameter: sparsity or wordlength.
    #[arg(long)]
    param: Option<String>,
    /// Sweep grid, comma separated.
    #[arg(long)]
    grid: Option<String>,
    /// LUT window width in bits.
    #[arg(long)]
    lut_window_bits: Option<u32>,
    /// Explicit LUT table CSV (input,output) instead of the built-in tables.
    #[arg(long)]
    lut_table: Option<PathBuf>,
    /// Sweep base: matrix rows.
    #[arg(long)]
    sweep_rows: Option<usize>,
    /// Sweep base: matrix columns.
    #[arg(long)]
    sweep_cols: Option<usize>,
    /// Sweep base: weight density.
    #[arg(long)]
    sweep_weight_density: Option<f64>,
    /// Sweep base: activation density.
    #[arg(long)]
    sweep_act_density: Option<f64>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corrupt one simulator accumulator (by original row id, last layer)
    /// before comparing; exercises the mismatch path.
    #[arg(long, hide = true)]
    inject_fault: Option<u32>,
}

/// File-backed configuration; every field has a flag counterpart.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    weights: Option<Vec<PathBuf>>,
    input: Option<PathBuf>,
    wbits: Option<u32>,
    abits: Option<u32>,
    kbits: Option<u32>,
    activation: Option<String>,
    /// Optional per-layer activation kinds, overriding `activation`.
    activations: Option<Vec<String>>,
    scale: Option<u32>,
    act_scale: Option<u32>,
    requant_shift: Option<u32>,
    signed_acts: Option<bool>,
    long_step: Option<usize>,
    costs: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
    limit: Option<usize>,
    jobs: Option<usize>,
    param: Option<String>,
    grid: Option<Vec<f64>>,
    lut_window_bits: Option<u32>,
    lut_table: Option<PathBuf>,
    sweep_rows: Option<usize>,
    sweep_cols: Option<usize>,
    sweep_weight_density: Option<f64>,
    sweep_act_density: Option<f64>,
}

/// Fully resolved configuration.
struct RunConfig {
    weights: Vec<PathBuf>,
    input: Option<PathBuf>,
    wbits: u32,
    abits: u32,
    kbits: Option<u32>,
    activations: ActivationChoice,
    scale: u32,
    act_scale: u32,
    requant_shift: u32,
    signed_acts: bool,
    long_step: usize,
    costs: CostConstants,
    seed: u64,
    out: PathBuf,
    trace: Option<PathBuf>,
    limit: Option<usize>,
    jobs: usize,
    param: Option<String>,
    grid: Vec<f64>,
    lut_window_bits: u32,
    lut_table: Option<PathBuf>,
    sweep_rows: usize,
    sweep_cols: usize,
    sweep_weight_density: f64,
    sweep_act_density: f64,
}

enum ActivationChoice {
    Uniform(String),
    PerLayer(Vec<String>),
}

fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {}", path.display(), e))
            })?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?
        }
        None => FileConfig::default(),
    };

    let costs = {
        let path = args.costs.clone().or(file.costs);
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| {
                    Error::Config(format!("cannot read cost constants {}: {}", p.display(), e))
                })?;
                let c: CostConstants = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?;
                c.validate()?;
                c
            }
            None => CostConstants::default(),
        }
    };

    let grid = match (&args.grid, &file.grid) {
        (Some(s), _) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("malformed grid value {:?}", t)))
            })
            .collect::<Result<Vec<f64>>>()?,
        (None, Some(g)) => g.clone(),
        (None, None) => Vec::new(),
    };

    let activations = match (&args.activation, &file.activations, &file.activation) {
        (Some(a), _, _) => ActivationChoice::Uniform(a.clone()),
        (None, Some(list), _) => ActivationChoice::PerLayer(list.clone()),
        (None, None, Some(a)) => ActivationChoice::Uniform(a.clone()),
        (None, None, None) => ActivationChoice::Uniform("relu".to_string()),
    };

    Ok(RunConfig {
        weights: args.weights.clone().or(file.weights).unwrap_or_default(),
        input: args.input.clone().or(file.input),
        wbits: args.wbits.or(file.wbits).unwrap_or(16),
        abits: args.abits.or(file.abits).unwrap_or(16),
        kbits: args.kbits.or(file.kbits).filter(|&k| k > 0),
        activations,
        scale: args.scale.or(file.scale).unwrap_or(0),
        act_scale: args.act_scale.or(file.act_scale).unwrap_or(0),
        requant_shift: args.requant_shift.or(file.requant_shift).unwrap_or(0),
        signed_acts: args.signed_acts || file.signed_acts.unwrap_or(false),
        long_step: args.long_step.or(file.long_step).unwrap_or(16),
        costs,
        seed: args.seed.or(file.seed).unwrap_or(42),
        out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("result.json")),
        trace: args.trace.clone().or(file.trace),
        limit: args.limit.or(file.limit),
        jobs: args.jobs.or(file.jobs).unwrap_or(1),
        param: args.param.clone().or(file.param),
        grid,
        lut_window_bits: args.lut_window_bits.or(file.lut_window_bits).unwrap_or(8),
        lut_table: args.lut_table.clone().or(file.lut_table),
        sweep_rows: args.sweep_rows.or(file.sweep_rows).unwrap_or(64),
        sweep_cols: args.sweep_cols.or(file.sweep_cols).unwrap_or(64),
        sweep_weight_density: args
            .sweep_weight_density
            .or(file.sweep_weight_density)
            .unwrap_or(0.1),
        sweep_act_density: args.sweep_act_density.or(file.sweep_act_density).unwrap_or(0.5),
    })
}

impl RunConfig {
    fn build_activation(&self, kind: &str) -> Result<Activation> {
        match kind {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "sigmoid" | "tanh" => {
                let spec = match &self.lut_table {
                    Some(path) => load_lut_csv(path, self.lut_window_bits)?,
                    None => {
                        // window values carry the accumulator scale; outputs
                        // are pre-shifted so extraction lands on act_scale
                        let in_frac = self.scale + self.act_scale;
                        let out_frac = self.act_scale + self.requant_shift;
                        let f: fn(f64) -> f64 = if kind == "sigmoid" {
                            |x| 1.0 / (1.0 + (-x).exp())
                        } else {
                            |x| x.tanh()
                        };
                        LutSpec::from_real_fn(self.lut_window_bits, in_frac, out_frac, f)?
                    }
                };
                Ok(Activation::Lut(spec))
            }
            other => Err(Error::Config(format!(
                "unknown activation {:?}; expected relu, sigmoid, tanh, or none",
                other
            ))),
        }
    }

    fn build_layers(&self) -> Result<Vec<LayerConfig>> {
        if self.weights.is_empty() {
            return Err(Error::Config(
                "no weight files given; the network is empty".to_string(),
            ));
        }
        let kinds: Vec<String> = match &self.activations {
            ActivationChoice::Uniform(k) => vec![k.clone(); self.weights.len()],
            ActivationChoice::PerLayer(list) => {
                if list.len() != self.weights.len() {
                    return Err(Error::Config(format!(
                        "{} activation kinds for {} layers",
                        list.len(),
                        self.weights.len()
                    )));
                }
                list.clone()
            }
        };
        self.weights
            .iter()
            .zip(&kinds)
            .map(|(path, kind)| {
                let matrix = read_matrix_market(path, self.wbits, self.scale)?;
                let image = encode_acsr(&matrix)?;
                LayerConfig::build(
                    image,
                    &LayerParams {
                        abits: self.abits,
                        kbits: self.kbits,
                        acts_signed: self.signed_acts,
                        activation: self.build_activation(kind)?,
                        requant_shift: self.requant_shift,
                        long_step: self.long_step,
                        mul: MulMode::BitSerial,
                        fmap_max_block: None,
                        out_frac_bits: self.act_scale,
                    },
                )
            })
            .collect()
    }

    fn load_input(&self) -> Result<crate::fc::ActivationList> {
        let path = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("no activation input file given".to_string()))?;
        load_activations(path, self.abits, self.signed_acts, self.act_scale)
    }

    fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            rows: self.sweep_rows,
            cols: self.sweep_cols,
            wbits: self.wbits.min(32),
            abits: self.abits.min(32),
            weight_density: self.sweep_weight_density,
            act_density: self.sweep_act_density,
            activation: Activation::Relu,
            acts_signed: self.signed_acts,
            long_step: self.long_step,
            seed: self.seed,
            mul: MulMode::BitSerial,
        }
    }
}

#[derive(Serialize)]
struct LayerOut {
    layer: usize,
    rows: usize,
    cols: usize,
    nnz: usize,
    outputs: Vec<(u32, i64)>,
    cycles: CycleReport,
    estimates: Estimates,
}

#[derive(Serialize)]
struct NetworkOut {
    outputs: Vec<(u32, i64)>,
    total_cycles: u64,
    area_mm2: f64,
    energy_j: f64,
    latency_s: f64,
    inferences_per_s: f64,
    gops: f64,
}

#[derive(Serialize)]
struct RunOut {
    layers: Vec<LayerOut>,
    network: NetworkOut,
}

fn assemble_output(cfgs: &[LayerConfig], net: &NetworkResult, costs: &CostConstants) -> RunOut {
    let mut layers = Vec::new();
    let mut total_cycles = 0u64;
    let mut run_cycles = 0u64;
    let mut area = 0.0;
    let mut energy = 0.0;
    let mut nnz_total = 0usize;
    for (i, (cfg, lr)) in cfgs.iter().zip(&net.layers).enumerate() {
        let est = estimates(
            cfg.image.nnz().max(1),
            cfg.fmap.width(),
            &lr.report.activity,
            cfg.image.nnz(),
            costs,
        );
        total_cycles += lr.report.total;
        run_cycles += lr.report.activity.cycles;
        area += if cfg.image.nnz() > 0 { est.area_mm2 } else { 0.0 };
        energy += est.energy_j;
        nnz_total += cfg.image.nnz();
        layers.push(LayerOut {
            layer: i,
            rows: cfg.image.n_rows,
            cols: cfg.image.n_cols,
            nnz: cfg.image.nnz(),
            outputs: lr.outputs.entries.clone(),
            cycles: lr.report,
            estimates: est,
        });
    }
    let latency_s = run_cycles as f64 / (costs.freq_mhz * 1e6);
    RunOut {
        layers,
        network: NetworkOut {
            outputs: net.outputs.entries.clone(),
            total_cycles,
            area_mm2: area,
            energy_j: energy,
            latency_s,
            inferences_per_s: if latency_s > 0.0 { 1.0 / latency_s } else { 0.0 },
            gops: if latency_s > 0.0 {
                2.0 * nnz_total as f64 / latency_s / 1e9
            } else {
                0.0
            },
        },
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {}", path.display(), e)))?;
    f.write_all(bytes)?;
    Ok(())
}

fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let layers = cfg.build_layers()?;
    let input = cfg.load_input()?;
    let net = run_network(&layers, &input, None)?;
    let out = assemble_output(&layers, &net, &cfg.costs);
    let mut bytes = serde_json::to_vec_pretty(&out).expect("serializable result");
    bytes.push(b'\n');
    write_file(&cfg.out, &bytes)?;
    println!(
        "ran {} layers, {} total cycles; result written to {}",
        layers.len(),
        out.network.total_cycles,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_check(cfg: &RunConfig, inject_fault: Option<u32>) -> Result<()> {
    let layers = cfg.build_layers()?;
    let input = cfg.load_input()?;
    let mut got = run_network(&layers, &input, None)?;
    let want = reference_network(&layers, &input)?;

    if let Some(row) = inject_fault {
        if let Some(last) = got.layers.last_mut() {
            if let Some(slot) = last.accumulators.iter_mut().find(|(r, _)| *r == row) {
                slot.1 = slot.1.wrapping_add(1);
            }
        }
    }

    for (i, (g, w)) in got.layers.iter().zip(&want.layers).enumerate() {
        for (&(gr, gv), &(wr, wv)) in g.accumulators.iter().zip(&w.accumulators) {
            if gr != wr || gv != wv {
                return Err(Error::Verify(format!(
                    "layer {} row {}: simulator accumulator {} vs reference {}",
                    i, wr, gv, wv
                )));
            }
        }
        if g.outputs.entries != w.outputs.entries {
            let diff = g
                .outputs
                .entries
                .iter()
                .zip(&w.outputs.entries)
                .find(|(a, b)| a != b);
            return Err(Error::Verify(match diff {
                Some((&(gr, gv), &(wr, wv))) => format!(
                    "layer {} outputs differ: simulator ({}, {}) vs reference ({}, {})",
                    i, gr, gv, wr, wv
                ),
                None => format!("layer {} output lengths differ", i),
            }));
        }
        // measured stage cycles must equal the closed forms
        let (m, f) = (&g.report, &w.report);
        if (m.load, m.broadcast, m.multiply, m.reduce, m.activation, m.extract, m.restore)
            != (f.load, f.broadcast, f.multiply, f.reduce, f.activation, f.extract, f.restore)
        {
            return Err(Error::Verify(format!(
                "layer {} stage cycles {:?} differ from the closed forms {:?}",
                i,
                (m.broadcast, m.multiply, m.reduce, m.activation),
                (f.broadcast, f.multiply, f.reduce, f.activation)
            )));
        }
    }
    println!(
        "check passed: {} layers bit-exact against the reference pipeline",
        layers.len()
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let param = cfg
        .param
        .as_deref()
        .ok_or_else(|| Error::Config("sweep needs --param sparsity|wordlength".to_string()))?;
    if cfg.grid.is_empty() {
        return Err(Error::Config("sweep needs a non-empty --grid".to_string()));
    }
    let spec = cfg.sweep_spec();
    let mut bytes = Vec::new();
    match param {
        "sparsity" => {
            let rows = sweep_sparsity(&spec, &cfg.grid, &cfg.costs, cfg.jobs)?;
            write_sparsity_csv(&mut bytes, &rows)?;
        }
        "wordlength" => {
            let grid: Vec<u32> = cfg
                .grid
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && v >= 1.0 && v <= 32.0 {
                        Ok(v as u32)
                    } else {
                        Err(Error::Config(format!("wordlength grid value {} invalid", v)))
                    }
                })
                .collect::<Result<_>>()?;
            let rows = sweep_wordlength(&spec, &grid, &cfg.costs, cfg.jobs)?;
            write_wordlength_csv(&mut bytes, &rows)?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {:?}; expected sparsity or wordlength",
                other
            )));
        }
    }
    write_file(&cfg.out, &bytes)?;
    println!("sweep written to {}", cfg.out.display());
    Ok(())
}

fn cmd_trace(cfg: &RunConfig) -> Result<()> {
    let trace_path = cfg
        .trace
        .as_ref()
        .ok_or_else(|| Error::Config("trace needs a --trace output path".to_string()))?;
    let limit = cfg.limit.unwrap_or(usize::MAX);
    let layers = cfg.build_layers()?;
    let input = cfg.load_input()?;
    let net = run_network(&layers, &input, Some(limit))?;
    let mut bytes = Vec::new();
    for (seq, record) in net.trace.iter().take(limit).enumerate() {
        let mut r = *record;
        r.seq = seq as u64;
        serde_json::to_writer(&mut bytes, &r).expect("serializable record");
        bytes.push(b'\n');
    }
    write_file(trace_path, &bytes)?;
    println!(
        "{} trace records written to {}",
        net.trace.len().min(limit),
        trace_path.display()
    );
    Ok(())
}

/// Entry point behind the `apsim` binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.cmd {
        Cmd::Run(args) => resolve(args).and_then(|cfg| cmd_run(&cfg)),
        Cmd::Check(args) => resolve(&args.common).and_then(|cfg| cmd_check(&cfg, args.inject_fault)),
        Cmd::Sweep(args) => resolve(args).and_then(|cfg| cmd_sweep(&cfg)),
        Cmd::Trace(args) => resolve(args).and_then(|cfg| cmd_trace(&cfg)),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
