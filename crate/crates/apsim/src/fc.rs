//! Fully-connected layer execution: C = f(W x B).
//!
//! A layer runs in four stages, all word-parallel across the PUs:
//!
//! 1. *Broadcast* — each nonzero input activation is matched against the
//!    column-index field and written into the B field of every PU holding
//!    a weight from that column, one fused compare+write per activation.
//! 2. *Multiply* — every PU computes C = W * B bit-serially (or via a
//!    bit-parallel product table).
//! 3. *Soft reduction* — per-PU dot products are accumulated into each
//!    block start in a binary-tree fashion: at doubling distances the
//!    accumulator and the row-flag MSB are copied down through the tag
//!    shifter into a staging field, PUs whose own flag MSB is still 0 add
//!    the staged value, then any PU that received a set MSB raises its
//!    own. When no `01` flag remains every block start holds its row's
//!    sum and carries flag `11`.
//! 4. *Activation* — RELU clears negative accumulators in one fused
//!    compare+write; sigmoid/tanh-style functions go through a clamped
//!    window LUT.
//!
//! Extraction reads each block-start accumulator, requantizes it
//! (arithmetic shift, round-half-even, saturate) and assembles the next
//! layer's activation list. `reference_layer` computes the same pipeline
//! on the host with unbounded integers and is the ground truth the
//! simulator is checked against, bit for bit.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;

use crate::acsr::{
    build_field_map, ceil_log2, load_image, AcsrImage, FieldMap, RowFlag,
};
use crate::ap::{ActivityStats, ApState, KeyMask, TraceRecord};
use crate::error::{Error, Result};
use crate::microcode::{
    clear_columns, clear_field, full_add_pass, lut_apply, lut_multiply, move_cost,
    multiply_cycles, multiply_fields, run_tt_pass, shift_field_copy, verify_lut_coverage,
    FieldRef, MulOperands, TruthTablePass, TtEntry,
};

/// Sparse activation vector: unique (index, value) pairs with declared
/// wordlength, signedness, and fixed-point scale. Zero values are excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationList {
    pub entries: Vec<(u32, i64)>,
    pub bits: u32,
    pub signed: bool,
    pub frac_bits: u32,
}

impl ActivationList {
    pub fn new(mut entries: Vec<(u32, i64)>, bits: u32, signed: bool, frac_bits: u32) -> Result<Self> {
        if bits == 0 || bits > 32 {
            return Err(Error::Config(format!(
                "activation wordlength {} outside supported range 1..=32",
                bits
            )));
        }
        entries.sort_unstable_by_key(|&(i, _)| i);
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Config(format!(
                    "duplicate activation index {}",
                    pair[0].0
                )));
            }
        }
        let (lo, hi) = value_range(bits, signed);
        for &(i, v) in &entries {
            if v == 0 {
                return Err(Error::Config(format!(
                    "explicit zero activation at index {}",
                    i
                )));
            }
            if v < lo || v > hi {
                return Err(Error::Config(format!(
                    "activation value {} at index {} outside {} {}-bit range",
                    v,
                    i,
                    if signed { "signed" } else { "unsigned" },
                    bits
                )));
            }
        }
        Ok(ActivationList {
            entries,
            bits,
            signed,
            frac_bits,
        })
    }

    pub fn empty(bits: u32, signed: bool, frac_bits: u32) -> Self {
        ActivationList {
            entries: Vec::new(),
            bits,
            signed,
            frac_bits,
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    fn check_indices(&self, n_cols: usize) -> Result<()> {
        if let Some(&(i, _)) = self.entries.iter().find(|&&(i, _)| i as usize >= n_cols) {
            return Err(Error::Config(format!(
                "activation index {} out of range for {} columns",
                i, n_cols
            )));
        }
        Ok(())
    }
}

fn value_range(bits: u32, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, if bits >= 63 { i64::MAX } else { (1i64 << bits) - 1 })
    }
}

/// Table-based activation function over a clamped accumulator window.
/// The table must cover every value of the signed `window_bits` domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LutSpec {
    pub window_bits: u32,
    /// (window value, accumulator-domain output), sorted by input.
    pub table: Vec<(i64, i64)>,
}

impl LutSpec {
    pub fn new(window_bits: u32, mut table: Vec<(i64, i64)>) -> Result<Self> {
        if window_bits == 0 || window_bits > 16 {
            return Err(Error::Config(format!(
                "LUT window of {} bits outside supported range 1..=16",
                window_bits
            )));
        }
        table.sort_unstable_by_key(|&(i, _)| i);
        let lo = -(1i64 << (window_bits - 1));
        let hi = (1i64 << (window_bits - 1)) - 1;
        let expect: Vec<i64> = (lo..=hi).collect();
        let got: Vec<i64> = table.iter().map(|&(i, _)| i).collect();
        if got != expect {
            return Err(Error::Config(format!(
                "LUT table must cover the signed {}-bit window exactly once ({} entries expected, {} given)",
                window_bits,
                expect.len(),
                table.len()
            )));
        }
        Ok(LutSpec { window_bits, table })
    }

    /// Builds a table from a host function over window values.
    pub fn from_fn(window_bits: u32, f: impl Fn(i64) -> i64) -> Result<Self> {
        let lo = -(1i64 << (window_bits - 1));
        let hi = (1i64 << (window_bits - 1)) - 1;
        LutSpec::new(window_bits, (lo..=hi).map(|v| (v, f(v))).collect())
    }

    /// Quantized real-valued function: the window value is read at
    /// `in_frac` fraction bits, the result stored at `out_frac`, rounded
    /// half-even and saturated to the window range.
    pub fn from_real_fn(
        window_bits: u32,
        in_frac: u32,
        out_frac: u32,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        LutSpec::from_fn(window_bits, |v| {
            let x = v as f64 / (1u64 << in_frac) as f64;
            crate::acsr::quantize(f(x), out_frac, window_bits)
        })
    }

    pub fn lookup(&self, window_value: i64) -> i64 {
        let lo = -(1i64 << (self.window_bits - 1));
        self.table[(window_value - lo) as usize].1
    }

    /// Host-side clamp of a k-bit accumulator value into the window.
    pub fn clamp(&self, acc: i64) -> i64 {
        let lo = -(1i64 << (self.window_bits - 1));
        let hi = (1i64 << (self.window_bits - 1)) - 1;
        acc.clamp(lo, hi)
    }
}

/// Per-layer activation function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Lut(LutSpec),
}

/// Multiplier selection: bit-serial shift-add, or one compare+write per
/// entry of a precomputed product table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MulMode {
    BitSerial,
    Lut(Vec<(i64, i64, i64)>),
}

/// Requantization of k-bit accumulators to n-bit activations: arithmetic
/// right shift with round-half-even, then saturation.
pub fn requantize(acc: i64, shift: u32, bits: u32, signed: bool) -> i64 {
    let q = if shift == 0 {
        acc
    } else {
        let floor = acc >> shift;
        let rem = acc & ((1i64 << shift) - 1);
        let half = 1i64 << (shift - 1);
        if rem > half {
            floor + 1
        } else if rem < half {
            floor
        } else {
            floor + (floor & 1)
        }
    };
    let (lo, hi) = value_range(bits, signed);
    q.clamp(lo, hi)
}

/// Everything needed to run one layer: the encoded weights, the field
/// layout, operand signedness, multiplier mode, activation function, and
/// the output requantization.
#[derive(Clone, Debug)]
pub struct LayerConfig {
    pub image: AcsrImage,
    pub fmap: FieldMap,
    pub ops: MulOperands,
    pub mul: MulMode,
    pub activation: Activation,
    pub requant_shift: u32,
    pub out_bits: u32,
    pub out_signed: bool,
    pub out_frac_bits: u32,
    pub long_step: usize,
}

/// Knobs for `LayerConfig::build`.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub abits: u32,
    pub kbits: Option<u32>,
    pub acts_signed: bool,
    pub activation: Activation,
    pub requant_shift: u32,
    pub long_step: usize,
    pub mul: MulMode,
    /// Field-map sizing override: accumulators sized for blocks of this
    /// length instead of the image's own maximum (sweeps fix this to
    /// n_cols so every grid point shares one layout).
    pub fmap_max_block: Option<usize>,
    pub out_frac_bits: u32,
}

impl Default for LayerParams {
    fn default() -> Self {
        LayerParams {
            abits: 16,
            kbits: None,
            acts_signed: false,
            activation: Activation::Relu,
            requant_shift: 0,
            long_step: 16,
            mul: MulMode::BitSerial,
            fmap_max_block: None,
            out_frac_bits: 0,
        }
    }
}

impl LayerConfig {
    pub fn build(image: AcsrImage, params: &LayerParams) -> Result<Self> {
        let max_block = params.fmap_max_block.unwrap_or_else(|| image.max_block_len());
        let fmap = build_field_map(
            image.n_cols,
            image.wbits,
            params.abits,
            max_block.max(image.max_block_len()),
            params.kbits,
        )?;
        if let Activation::Lut(spec) = &params.activation {
            if spec.window_bits as usize > fmap.c.len {
                return Err(Error::Config(format!(
                    "LUT window of {} bits wider than the {}-bit accumulator",
                    spec.window_bits,
                    fmap.c.len
                )));
            }
        }
        Ok(LayerConfig {
            image,
            fmap,
            ops: MulOperands {
                w_signed: true,
                b_signed: params.acts_signed,
            },
            mul: params.mul.clone(),
            activation: params.activation.clone(),
            requant_shift: params.requant_shift,
            out_bits: params.abits,
            out_signed: params.acts_signed,
            out_frac_bits: params.out_frac_bits,
            long_step: params.long_step,
        })
    }

    /// The closed-form per-stage cycle counts for this layer with `nnz_b`
    /// nonzero input activations. Measured runs must match these exactly.
    pub fn expected_report(&self, nnz_b: usize) -> CycleReport {
        let k = self.fmap.c.len;
        let load = self.image.nnz() as u64;
        let broadcast = broadcast_cycles(nnz_b);
        let multiply = self.multiply_stage_cycles();
        let reduce = reduce_cycles(k, self.image.max_block_len(), self.long_step);
        let activation = match &self.activation {
            Activation::None => 0,
            Activation::Relu => RELU_CYCLES,
            Activation::Lut(spec) => lut_activation_cycles(k, spec.window_bits as usize),
        };
        let extract = self.image.block_count() as u64;
        let restore = FLAG_RESTORE_CYCLES;
        CycleReport {
            load,
            broadcast,
            multiply,
            reduce,
            activation,
            extract,
            restore,
            total: load + broadcast + multiply + reduce + activation + extract + restore,
            activity: ActivityStats::default(),
        }
    }

    pub fn multiply_stage_cycles(&self) -> u64 {
        1 + match &self.mul {
            MulMode::BitSerial => multiply_cycles(
                self.fmap.w.len,
                self.fmap.b.len,
                self.fmap.c.len,
                self.ops,
            ),
            MulMode::Lut(table) => table.len() as u64,
        }
    }
}

/// Per-stage instruction counts plus the raw activity totals feeding the
/// cost model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub load: u64,
    pub broadcast: u64,
    pub multiply: u64,
    pub reduce: u64,
    pub activation: u64,
    pub extract: u64,
    pub restore: u64,
    pub total: u64,
    pub activity: ActivityStats,
}

/// One layer's outcome: the next layer's input, the post-activation
/// accumulator of every stored row, and the cycle breakdown.
#[derive(Clone, Debug)]
pub struct LayerResult {
    pub outputs: ActivationList,
    /// (original row index, accumulator value at extraction time)
    pub accumulators: Vec<(u32, i64)>,
    pub report: CycleReport,
}

pub const RELU_CYCLES: u64 = 1;
pub const FLAG_RESTORE_CYCLES: u64 = 4;

pub fn broadcast_cycles(nnz_b: usize) -> u64 {
    1 + nnz_b as u64
}

/// Soft reduction cost: R = ceil(log2(max block length)) rounds, each a
/// staging clear, a (k+1)-column shifted copy, a gated k-bit ripple add,
/// and the flag update, plus a two-cycle termination check before every
/// round and after the last.
pub fn reduce_cycles(k: usize, max_block_len: usize, long_step: usize) -> u64 {
    let rounds = ceil_log2(max_block_len.max(1)) as u64;
    let mut cycles = 2 * (rounds + 1);
    for r in 0..rounds {
        let d = 1usize << r;
        cycles += 3 + 4 * k as u64 + (k as u64 + 1) * (2 + move_cost(d, long_step));
    }
    cycles
}

/// Clamp to the window, table pass into the staging field, copy back.
pub fn lut_activation_cycles(k: usize, window_bits: usize) -> u64 {
    let clamp = if window_bits < k {
        1 + 2 * (k - window_bits) as u64 + 2
    } else {
        0
    };
    clamp + 1 + (1u64 << window_bits) + 2 * k as u64
}

/// Stage 1: clears B, then writes each activation value into every PU whose
/// column index matches, one fused compare+write per activation.
/// Costs 1 + nnz_b cycles.
pub fn broadcast_activations(
    ap: &mut ApState,
    fmap: &FieldMap,
    acts: &ActivationList,
    n_cols: usize,
) -> Result<()> {
    acts.check_indices(n_cols)?;
    if acts.bits as usize != fmap.b.len {
        return Err(Error::Contract(format!(
            "activation wordlength {} does not match the {}-bit B field",
            acts.bits, fmap.b.len
        )));
    }
    clear_field(ap, &fmap.b)?;
    for &(index, value) in &acts.entries {
        let mut cmp = KeyMask::new(ap.width());
        cmp.set_bits(fmap.col_index.base, fmap.col_index.len, index as i64);
        let mut wr = KeyMask::new(ap.width());
        wr.set_bits(fmap.b.base, fmap.b.len, value);
        ap.compare_write(&cmp, &wr)?;
    }
    Ok(())
}

/// Stage 2: clears C, then multiplies W by B in every PU.
pub fn multiply_stage(ap: &mut ApState, fmap: &FieldMap, ops: MulOperands, mul: &MulMode) -> Result<()> {
    clear_field(ap, &fmap.c)?;
    match mul {
        MulMode::BitSerial => {
            let scratch = FieldRef::new(fmap.t.base, 2);
            multiply_fields(ap, &fmap.c, &fmap.w, &fmap.b, &scratch, ops)
        }
        MulMode::Lut(table) => lut_multiply(ap, &fmap.c, &fmap.w, &fmap.b, table, ops),
    }
}

/// Stage 3: segmented tree accumulation of the dot products into each
/// block-start PU. See the module docs for the round structure.
pub fn soft_reduce(ap: &mut ApState, fmap: &FieldMap) -> Result<()> {
    let k = fmap.c.len;
    let stage = fmap.t_stage();
    let stage_msb = fmap.t_stage_msb();
    let flag_msb = fmap.flag_msb();
    let carry = fmap.t_carry();
    let max_rounds = ceil_log2(ap.depth()) + 1;

    let mut distance = 1usize;
    let mut rounds = 0u32;
    loop {
        // any 01 flag left?
        let mut start_key = KeyMask::new(ap.width());
        start_key.set_bits(fmap.row_flag.base, 2, RowFlag::Start.bits() as i64);
        ap.compare(&start_key)?;
        if !ap.if_match() {
            return Ok(());
        }
        rounds += 1;
        if rounds > max_rounds {
            return Err(Error::Contract(format!(
                "soft reduction did not converge after {} rounds; row flags are corrupt",
                max_rounds
            )));
        }

        // (a) stage the accumulator and flag MSB from `distance` rows below
        clear_field(ap, &fmap.t_stage_all())?;
        shift_field_copy(ap, &stage, &fmap.c, distance, &[(flag_msb, stage_msb)])?;

        // (b) gated accumulate: only PUs whose own flag MSB is still 0
        clear_columns(ap, &[carry])?;
        for i in 0..k {
            let pass = full_add_pass(fmap.c.bit(i), stage.bit(i), carry)?
                .gated(flag_msb, false)?;
            run_tt_pass(ap, &pass)?;
        }

        // (c) a staged MSB of 1 raises the receiver's own MSB
        let mut cmp = KeyMask::new(ap.width());
        cmp.set_bit(stage_msb.0, true);
        let mut wr = KeyMask::new(ap.width());
        wr.set_bit(flag_msb.0, true);
        ap.compare_write(&cmp, &wr)?;

        distance *= 2;
    }
}

/// Stage 4a: RELU. One fused compare+write keyed on the accumulator sign
/// bit, clearing the whole C field of every negative row.
pub fn relu_stage(ap: &mut ApState, fmap: &FieldMap) -> Result<()> {
    let outputs: Vec<_> = (0..fmap.c.len).map(|i| fmap.c.bit(i)).collect();
    let pass = TruthTablePass::new(vec![fmap.c_sign()], outputs, vec![TtEntry::new(1, 0)])?;
    run_tt_pass(ap, &pass)
}

/// Stage 4b: table activation. The accumulator is first clamped into the
/// signed window (per-bit overflow detection into two scratch flags, then
/// one edge write each), the table is applied into the staging field, and
/// the result is copied back over C.
pub fn apply_lut_activation(ap: &mut ApState, fmap: &FieldMap, spec: &LutSpec) -> Result<()> {
    let k = fmap.c.len;
    let w = spec.window_bits as usize;
    if w > k {
        return Err(Error::Contract(
            "LUT window wider than the accumulator".to_string(),
        ));
    }
    let width = ap.width();
    let sign = fmap.c_sign();
    let pos_flag = fmap.t_product();
    let neg_flag = fmap.t_carry();

    if w < k {
        clear_columns(ap, &[pos_flag, neg_flag])?;
        for h in (w - 1)..(k - 1) {
            // positive overflow: sign 0 and any bit above the window set
            let mut cmp = KeyMask::new(width);
            cmp.set_bit(sign.0, false).set_bit(fmap.c.bit(h).0, true);
            let mut wr = KeyMask::new(width);
            wr.set_bit(pos_flag.0, true);
            ap.compare_write(&cmp, &wr)?;
        }
        for h in (w - 1)..(k - 1) {
            // negative overflow: sign 1 and any bit above the window clear
            let mut cmp = KeyMask::new(width);
            cmp.set_bit(sign.0, true).set_bit(fmap.c.bit(h).0, false);
            let mut wr = KeyMask::new(width);
            wr.set_bit(neg_flag.0, true);
            ap.compare_write(&cmp, &wr)?;
        }
        let hi = (1i64 << (w - 1)) - 1;
        let lo = -(1i64 << (w - 1));
        let mut cmp = KeyMask::new(width);
        cmp.set_bit(pos_flag.0, true);
        let mut wr = KeyMask::new(width);
        wr.set_bits(fmap.c.base, k, hi);
        ap.compare_write(&cmp, &wr)?;
        let mut cmp = KeyMask::new(width);
        cmp.set_bit(neg_flag.0, true);
        let mut wr = KeyMask::new(width);
        wr.set_bits(fmap.c.base, k, lo);
        ap.compare_write(&cmp, &wr)?;
    }

    // table pass into staging: in-window rows are sign-extended, so the
    // low window bits determine the value
    let stage = fmap.t_stage();
    clear_field(ap, &stage)?;
    let window_mask = (1u64 << w) - 1;
    let out_mask = if k == 63 { (1u64 << 63) - 1 } else { (1u64 << k) - 1 };
    let table: Vec<(u64, u64)> = spec
        .table
        .iter()
        .map(|&(v, out)| ((v as u64) & window_mask, (out as u64) & out_mask))
        .collect();
    let src_window = FieldRef::new(fmap.c.base, w);
    lut_apply(ap, &stage, &src_window, &table)?;

    // copy staging back over C, two passes per bit
    for i in 0..k {
        let mut cmp = KeyMask::new(width);
        cmp.set_bit(stage.bit(i).0, true);
        let mut wr = KeyMask::new(width);
        wr.set_bit(fmap.c.bit(i).0, true);
        ap.compare_write(&cmp, &wr)?;
        let mut cmp = KeyMask::new(width);
        cmp.set_bit(stage.bit(i).0, false);
        let mut wr = KeyMask::new(width);
        wr.set_bit(fmap.c.bit(i).0, false);
        ap.compare_write(&cmp, &wr)?;
    }
    Ok(())
}

/// Reads each block-start accumulator (one read cycle per stored row),
/// requantizes, drops zeros, and labels values with original row indices.
pub fn extract_activations(
    ap: &mut ApState,
    fmap: &FieldMap,
    image: &AcsrImage,
    shift: u32,
    out_bits: u32,
    out_signed: bool,
    out_frac_bits: u32,
) -> Result<(ActivationList, Vec<(u32, i64)>)> {
    let mut accumulators = Vec::with_capacity(image.block_count());
    let mut entries = Vec::new();
    for block in 0..image.block_count() {
        let bits = ap.read_row(image.block_starts[block])?;
        let acc = bits.bits_i64(fmap.c.base, fmap.c.len);
        accumulators.push((image.row_ids[block], acc));
        let val = requantize(acc, shift, out_bits, out_signed);
        if val != 0 {
            entries.push((image.row_ids[block], val));
        }
    }
    let outputs = ActivationList::new(entries, out_bits, out_signed, out_frac_bits)?;
    Ok((outputs, accumulators))
}

/// Restores row_flag from the pristine copy: two fused compare+writes per
/// flag bit.
pub fn restore_flags(ap: &mut ApState, fmap: &FieldMap) -> Result<()> {
    for bit in 0..2 {
        for val in [true, false] {
            let mut cmp = KeyMask::new(ap.width());
            cmp.set_bit(fmap.pristine_flag.bit(bit).0, val);
            let mut wr = KeyMask::new(ap.width());
            wr.set_bit(fmap.row_flag.bit(bit).0, val);
            ap.compare_write(&cmp, &wr)?;
        }
    }
    Ok(())
}

fn stage_err(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Verify(msg) => Error::Verify(format!("{} stage: {}", stage, msg)),
        Error::Contract(msg) => Error::Contract(format!("{} stage: {}", stage, msg)),
        other => other,
    }
}

/// Runs all four stages plus extraction and flag restore on a loaded
/// array. The image must be loaded and the flags pristine; after the run
/// the flags are pristine again, so the same layer can run repeatedly.
pub fn run_layer(ap: &mut ApState, cfg: &LayerConfig, acts: &ActivationList) -> Result<LayerResult> {
    if acts.signed != cfg.ops.b_signed {
        return Err(Error::Config(
            "activation signedness does not match the layer configuration".to_string(),
        ));
    }
    if cfg.fmap.c.len > 63 {
        return Err(Error::FieldMap(format!(
            "accumulator of {} bits exceeds the 63-bit extraction limit; reduce the wordlengths",
            cfg.fmap.c.len
        )));
    }
    let mut report = CycleReport {
        activity: ActivityStats::default(),
        ..Default::default()
    };
    let start = ap.stats();
    let mut mark = start;
    let mut lap = |ap: &mut ApState| {
        let now = ap.stats();
        let cycles = now.since(&mark).cycles;
        mark = now;
        cycles
    };

    broadcast_activations(ap, &cfg.fmap, acts, cfg.image.n_cols).map_err(stage_err("broadcast"))?;
    report.broadcast = lap(ap);

    multiply_stage(ap, &cfg.fmap, cfg.ops, &cfg.mul).map_err(stage_err("multiply"))?;
    report.multiply = lap(ap);

    soft_reduce(ap, &cfg.fmap).map_err(stage_err("reduce"))?;
    report.reduce = lap(ap);

    match &cfg.activation {
        Activation::None => {}
        Activation::Relu => relu_stage(ap, &cfg.fmap).map_err(stage_err("activation"))?,
        Activation::Lut(spec) => {
            apply_lut_activation(ap, &cfg.fmap, spec).map_err(stage_err("activation"))?
        }
    }
    report.activation = lap(ap);

    let (outputs, accumulators) = extract_activations(
        ap,
        &cfg.fmap,
        &cfg.image,
        cfg.requant_shift,
        cfg.out_bits,
        cfg.out_signed,
        cfg.out_frac_bits,
    )
    .map_err(stage_err("extract"))?;
    report.extract = lap(ap);

    restore_flags(ap, &cfg.fmap).map_err(stage_err("restore"))?;
    report.restore = lap(ap);

    report.activity = ap.stats().since(&start);
    report.total = report.activity.cycles;
    Ok(LayerResult {
        outputs,
        accumulators,
        report,
    })
}

/// Host-side ground truth for `run_layer`: per stored row the dot product
/// in unbounded integers (checked to fit the accumulator), the identical
/// activation function and requantization, and the closed-form cycle
/// counts in place of measured ones.
pub fn reference_layer(cfg: &LayerConfig, acts: &ActivationList) -> Result<LayerResult> {
    if acts.signed != cfg.ops.b_signed {
        return Err(Error::Config(
            "activation signedness does not match the layer configuration".to_string(),
        ));
    }
    if cfg.fmap.c.len > 63 {
        return Err(Error::FieldMap(format!(
            "accumulator of {} bits exceeds the 63-bit extraction limit; reduce the wordlengths",
            cfg.fmap.c.len
        )));
    }
    acts.check_indices(cfg.image.n_cols)?;
    let k = cfg.fmap.c.len;
    let mut b = vec![0i64; cfg.image.n_cols];
    for &(i, v) in &acts.entries {
        b[i as usize] = v;
    }
    let mut accumulators = Vec::with_capacity(cfg.image.block_count());
    let mut entries = Vec::new();
    for block in 0..cfg.image.block_count() {
        let start = cfg.image.block_starts[block];
        let mut acc: i128 = 0;
        for pu in start..start + cfg.image.block_len(block) {
            let prod = match &cfg.mul {
                MulMode::BitSerial => {
                    cfg.image.values[pu] as i128 * b[cfg.image.col_index[pu] as usize] as i128
                }
                MulMode::Lut(table) => {
                    let (wv, bv) = (cfg.image.values[pu], b[cfg.image.col_index[pu] as usize]);
                    table
                        .iter()
                        .find(|&&(tw, tb, _)| tw == wv && tb == bv)
                        .map(|&(_, _, p)| p as i128)
                        .ok_or_else(|| {
                            Error::Verify(format!(
                                "operand pair ({}, {}) not covered by the product table",
                                wv, bv
                            ))
                        })?
                }
            };
            acc += prod;
        }
        let (lo, hi) = (-(1i128 << (k - 1)), (1i128 << (k - 1)) - 1);
        if acc < lo || acc > hi {
            return Err(Error::FieldMap(format!(
                "row {} accumulates {} which does not fit {} bits; widen k",
                cfg.image.row_ids[block],
                acc,
                k
            )));
        }
        let mut acc = acc as i64;
        match &cfg.activation {
            Activation::None => {}
            Activation::Relu => acc = acc.max(0),
            Activation::Lut(spec) => acc = spec.lookup(spec.clamp(acc)),
        }
        accumulators.push((cfg.image.row_ids[block], acc));
        let val = requantize(acc, cfg.requant_shift, cfg.out_bits, cfg.out_signed);
        if val != 0 {
            entries.push((cfg.image.row_ids[block], val));
        }
    }
    let outputs = ActivationList::new(entries, cfg.out_bits, cfg.out_signed, cfg.out_frac_bits)?;
    Ok(LayerResult {
        outputs,
        accumulators,
        report: cfg.expected_report(acts.nnz()),
    })
}

/// A whole network run: final outputs, per-layer results, and any
/// instruction trace collected along the way.
#[derive(Debug)]
pub struct NetworkResult {
    pub outputs: ActivationList,
    pub layers: Vec<LayerResult>,
    pub trace: Vec<TraceRecord>,
}

/// Creates the layer's array sized to its image and loads it, returning
/// the load cycle count.
pub fn prepare_ap(cfg: &LayerConfig) -> Result<(ApState, u64)> {
    let mut ap = ApState::new(cfg.image.nnz(), cfg.fmap.width(), cfg.long_step)?;
    load_image(&mut ap, &cfg.image, &cfg.fmap)?;
    let load_cycles = ap.cycles();
    Ok((ap, load_cycles))
}

/// Chains layers: one array per layer, the extracted activations of layer
/// l feeding layer l+1. Layers without stored weights short-circuit to
/// empty outputs. `trace_limit` caps the total records collected.
pub fn run_network(
    cfgs: &[LayerConfig],
    input: &ActivationList,
    trace_limit: Option<usize>,
) -> Result<NetworkResult> {
    if cfgs.is_empty() {
        return Err(Error::Config("network has no layers".to_string()));
    }
    for pair in cfgs.windows(2) {
        if pair[0].image.n_rows != pair[1].image.n_cols {
            return Err(Error::Config(format!(
                "layer of {} rows feeds a layer expecting {} columns",
                pair[0].image.n_rows, pair[1].image.n_cols
            )));
        }
        if pair[0].out_bits != pair[1].fmap.b.len as u32
            || pair[0].out_signed != pair[1].ops.b_signed
        {
            return Err(Error::Config(
                "activation wordlength/signedness mismatch between consecutive layers".to_string(),
            ));
        }
    }
    let mut trace = Vec::new();
    let mut budget = trace_limit.unwrap_or(0);
    let mut acts = input.clone();
    let mut layers = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        if cfg.image.nnz() == 0 {
            let result = LayerResult {
                outputs: ActivationList::empty(cfg.out_bits, cfg.out_signed, cfg.out_frac_bits),
                accumulators: Vec::new(),
                report: CycleReport::default(),
            };
            acts = result.outputs.clone();
            layers.push(result);
            continue;
        }
        let (mut ap, load_cycles) = prepare_ap(cfg)?;
        if trace_limit.is_some() && budget > 0 {
            ap.enable_trace(budget);
        }
        let mut result = run_layer(&mut ap, cfg, &acts)?;
        result.report.load = load_cycles;
        result.report.total += load_cycles;
        if ap.trace_enabled() {
            let records = ap.take_trace();
            budget -= records.len().min(budget);
            trace.extend(records);
        }
        acts = result.outputs.clone();
        layers.push(result);
    }
    Ok(NetworkResult {
        outputs: acts,
        layers,
        trace,
    })
}

/// Reference pipeline for a whole network.
pub fn reference_network(cfgs: &[LayerConfig], input: &ActivationList) -> Result<NetworkResult> {
    if cfgs.is_empty() {
        return Err(Error::Config("network has no layers".to_string()));
    }
    let mut acts = input.clone();
    let mut layers = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let result = if cfg.image.nnz() == 0 {
            LayerResult {
                outputs: ActivationList::empty(cfg.out_bits, cfg.out_signed, cfg.out_frac_bits),
                accumulators: Vec::new(),
                report: CycleReport::default(),
            }
        } else {
            reference_layer(cfg, &acts)?
        };
        acts = result.outputs.clone();
        layers.push(result);
    }
    Ok(NetworkResult {
        outputs: acts,
        layers,
        trace: Vec::new(),
    })
}

/// Reads an activation file: either CSV lines `index,value` or a dense
/// vector (one value per line, the line number as index). Integer values
/// are taken verbatim, reals are quantized at `frac_bits`. Zeros are
/// dropped.
pub fn load_activations(path: &Path, bits: u32, signed: bool, frac_bits: u32) -> Result<ActivationList> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Config(format!("cannot read activation file {}: {}", path.display(), e))
    })?;
    let mut entries = Vec::new();
    let mut dense_index = 0u32;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::Io)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (index, value_str) = match line.split_once(',') {
            Some((i, v)) => {
                let index = i.trim().parse::<u32>().map_err(|_| {
                    Error::Config(format!("{}: malformed index {:?}", path.display(), i))
                })?;
                (index, v.trim())
            }
            None => {
                let index = dense_index;
                dense_index += 1;
                (index, line)
            }
        };
        let value = parse_fixed(value_str, bits, signed, frac_bits)
            .ok_or_else(|| Error::Config(format!("{}: malformed value {:?}", path.display(), value_str)))?;
        if value != 0 {
            entries.push((index, value));
        }
    }
    ActivationList::new(entries, bits, signed, frac_bits)
}

fn parse_fixed(s: &str, bits: u32, signed: bool, frac_bits: u32) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let real = s.parse::<f64>().ok()?;
    let q = crate::acsr::quantize(real, frac_bits, bits.min(62) + 1);
    let (lo, hi) = value_range(bits, signed);
    Some(q.clamp(lo, hi))
}

/// Reads a LUT table file: CSV lines `input,output` over the window domain.
pub fn load_lut_csv(path: &Path, window_bits: u32) -> Result<LutSpec> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot read LUT file {}: {}", path.display(), e)))?;
    let mut table = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::Io)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (i, o) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("{}: expected input,output", path.display())))?;
        let input = i.trim().parse::<i64>().map_err(|_| {
            Error::Config(format!("{}: malformed input {:?}", path.display(), i))
        })?;
        let output = o.trim().parse::<i64>().map_err(|_| {
            Error::Config(format!("{}: malformed output {:?}", path.display(), o))
        })?;
        table.push((input, output));
    }
    LutSpec::new(window_bits, table)
}

/// Post-hoc coverage verification for LUT-mode layers.
pub fn verify_layer_lut(ap: &ApState, cfg: &LayerConfig) -> Result<()> {
    if let MulMode::Lut(table) = &cfg.mul {
        verify_lut_coverage(ap, &cfg.fmap.w, &cfg.fmap.b, table, cfg.ops)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acsr::{encode_acsr, SparseMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_layer(
        entries: &[(u32, u32, i64)],
        rows: usize,
        cols: usize,
        activation: Activation,
    ) -> LayerConfig {
        let m = SparseMatrix::new(rows, cols, entries.to_vec(), 8, 0).unwrap();
        let image = encode_acsr(&m).unwrap();
        LayerConfig::build(
            image,
            &LayerParams {
                abits: 8,
                activation,
                ..LayerParams::default()
            },
        )
        .unwrap()
    }

    fn acts(entries: &[(u32, i64)]) -> ActivationList {
        ActivationList::new(entries.to_vec(), 8, false, 0).unwrap()
    }

    #[test]
    fn broadcast_places_values_by_column() {
        let cfg = toy_layer(
            &[(0, 1, 2), (1, 0, 1), (1, 2, 3)],
            2,
            3,
            Activation::Relu,
        );
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        let before = ap.cycles();
        let a = acts(&[(1, 5)]);
        broadcast_activations(&mut ap, &cfg.fmap, &a, 3).unwrap();
        assert_eq!(ap.cycles() - before, broadcast_cycles(1));
        let b: Vec<u64> = (0..3).map(|r| ap.peek_bits(r, cfg.fmap.b.base, 8)).collect();
        assert_eq!(b, vec![5, 0, 0]);

        // empty list: B cleared in one cycle
        let before = ap.cycles();
        broadcast_activations(&mut ap, &cfg.fmap, &acts(&[]), 3).unwrap();
        assert_eq!(ap.cycles() - before, 1);
        assert!((0..3).all(|r| ap.peek_bits(r, cfg.fmap.b.base, 8) == 0));

        // out-of-range index rejected before execution
        let bad = acts(&[(7, 1)]);
        assert!(broadcast_activations(&mut ap, &cfg.fmap, &bad, 3).is_err());
    }

    #[test]
    fn one_activation_reaches_all_matching_pus_in_one_cycle() {
        // column 2 appears in three different matrix rows
        let cfg = toy_layer(
            &[(0, 2, 1), (1, 2, 2), (2, 2, 3), (2, 0, 4)],
            3,
            3,
            Activation::Relu,
        );
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        let before = ap.cycles();
        broadcast_activations(&mut ap, &cfg.fmap, &acts(&[(2, 9)]), 3).unwrap();
        assert_eq!(ap.cycles() - before, 2); // clear + one compare_write
        let hits = (0..4)
            .filter(|&pu| ap.peek_bits(pu, cfg.fmap.b.base, 8) == 9)
            .count();
        assert_eq!(hits, 3);
    }

    #[test]
    fn soft_reduce_block_of_five() {
        let entries: Vec<(u32, u32, i64)> = (0..5).map(|c| (0, c, 1)).collect();
        let cfg = toy_layer(&entries, 1, 5, Activation::None);
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        // dot products 3,1,4,1,5 poked directly
        for (pu, v) in [3, 1, 4, 1, 5].iter().enumerate() {
            ap.poke_bits(pu, cfg.fmap.c.base, cfg.fmap.c.len, *v);
        }
        let before = ap.cycles();
        soft_reduce(&mut ap, &cfg.fmap).unwrap();
        assert_eq!(
            ap.peek_bits_i64(0, cfg.fmap.c.base, cfg.fmap.c.len),
            14,
            "block sum"
        );
        assert_eq!(ap.peek_bits(0, cfg.fmap.row_flag.base, 2), 0b11);
        assert_eq!(
            ap.cycles() - before,
            reduce_cycles(cfg.fmap.c.len, 5, cfg.long_step)
        );
    }

    #[test]
    fn soft_reduce_singleton_never_accumulates() {
        let cfg = toy_layer(&[(0, 0, 1), (1, 1, 1)], 2, 2, Activation::None);
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        ap.poke_bits(0, cfg.fmap.c.base, cfg.fmap.c.len, 42);
        ap.poke_bits(1, cfg.fmap.c.base, cfg.fmap.c.len, 17);
        let before = ap.cycles();
        soft_reduce(&mut ap, &cfg.fmap).unwrap();
        assert_eq!(ap.cycles() - before, 2); // no 01 flags: just the check
        assert_eq!(ap.peek_bits_i64(0, cfg.fmap.c.base, cfg.fmap.c.len), 42);
        assert_eq!(ap.peek_bits_i64(1, cfg.fmap.c.base, cfg.fmap.c.len), 17);
    }

    #[test]
    fn relu_clears_negative_rows_only() {
        let cfg = toy_layer(&[(0, 0, 1), (1, 1, 1), (2, 2, 1)], 3, 3, Activation::Relu);
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        let k = cfg.fmap.c.len;
        for (pu, v) in [-7i64, 7, 0].iter().enumerate() {
            ap.poke_bits(pu, cfg.fmap.c.base, k, *v);
        }
        let before = ap.cycles();
        relu_stage(&mut ap, &cfg.fmap).unwrap();
        assert_eq!(ap.cycles() - before, RELU_CYCLES);
        let got: Vec<i64> = (0..3).map(|pu| ap.peek_bits_i64(pu, cfg.fmap.c.base, k)).collect();
        assert_eq!(got, vec![0, 7, 0]);
    }

    #[test]
    fn requantize_rounds_half_even_and_saturates() {
        assert_eq!(requantize(36, 4, 8, false), 2); // 2.25 -> 2
        assert_eq!(requantize(40, 4, 8, false), 2); // 2.5 -> 2 (even)
        assert_eq!(requantize(56, 4, 8, false), 4); // 3.5 -> 4 (even)
        assert_eq!(requantize(-40, 4, 8, true), -2); // -2.5 -> -2
        assert_eq!(requantize(14, 0, 8, false), 14);
        assert_eq!(requantize(1000, 0, 8, false), 255);
        assert_eq!(requantize(-5, 0, 8, false), 0); // unsigned floor
        assert_eq!(requantize(1000, 0, 8, true), 127);
        assert_eq!(requantize(-1000, 0, 8, true), -128);
    }

    #[test]
    fn run_layer_toy_hand_computed() {
        // W = [[2, 0, -1], [0, 3, 0]], B = [4, 5, 6]
        let cfg = toy_layer(
            &[(0, 0, 2), (0, 2, -1), (1, 1, 3)],
            2,
            3,
            Activation::Relu,
        );
        let input = acts(&[(0, 4), (1, 5), (2, 6)]);
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        let result = run_layer(&mut ap, &cfg, &input).unwrap();
        // row 0: 2*4 - 1*6 = 2; row 1: 3*5 = 15
        assert_eq!(result.accumulators, vec![(0, 2), (1, 15)]);
        assert_eq!(result.outputs.entries, vec![(0, 2), (1, 15)]);

        // negative sum hits RELU
        let input = acts(&[(2, 6)]);
        let result = run_layer(&mut ap, &cfg, &input).unwrap();
        assert_eq!(result.accumulators, vec![(0, 0), (1, 0)]);
        assert!(result.outputs.entries.is_empty());
    }

    #[test]
    fn run_layer_is_repeatable_on_same_state() {
        let cfg = toy_layer(
            &[(0, 0, 2), (0, 1, -3), (1, 1, 3), (1, 2, 7)],
            2,
            3,
            Activation::Relu,
        );
        let input = acts(&[(0, 4), (1, 1), (2, 2)]);
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        let first = run_layer(&mut ap, &cfg, &input).unwrap();
        let second = run_layer(&mut ap, &cfg, &input).unwrap();
        assert_eq!(first.outputs, second.outputs);
        assert_eq!(first.accumulators, second.accumulators);
        assert_eq!(first.report.broadcast, second.report.broadcast);
        assert_eq!(first.report.multiply, second.report.multiply);
        assert_eq!(first.report.reduce, second.report.reduce);
        assert_eq!(first.report.total, second.report.total);
    }

    fn random_layer(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        w_density: f64,
        bits: u32,
        activation: Activation,
    ) -> LayerConfig {
        let mut entries = Vec::new();
        let (lo, hi) = (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1);
        for r in 0..rows {
            for c in 0..cols {
                if rng.gen_bool(w_density) {
                    let v = loop {
                        let v = rng.gen_range(lo..=hi);
                        if v != 0 {
                            break v;
                        }
                    };
                    entries.push((r as u32, c as u32, v));
                }
            }
        }
        let m = SparseMatrix::new(rows, cols, entries, bits, 0).unwrap();
        LayerConfig::build(
            encode_acsr(&m).unwrap(),
            &LayerParams {
                abits: bits,
                activation,
                ..LayerParams::default()
            },
        )
        .unwrap()
    }

    fn random_acts(rng: &mut ChaCha8Rng, cols: usize, density: f64, bits: u32) -> ActivationList {
        let mut entries = Vec::new();
        for c in 0..cols {
            if rng.gen_bool(density) {
                entries.push((c as u32, rng.gen_range(1..(1i64 << bits))));
            }
        }
        ActivationList::new(entries, bits, false, 0).unwrap()
    }

    #[test]
    fn run_layer_matches_reference_on_random_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..12 {
            let rows = rng.gen_range(1..40);
            let cols = rng.gen_range(1..40);
            let w_density = rng.gen_range(0.05..0.5);
            let cfg = random_layer(
                &mut rng,
                rows,
                cols,
                w_density,
                8,
                if trial % 2 == 0 { Activation::Relu } else { Activation::None },
            );
            if cfg.image.nnz() == 0 {
                continue;
            }
            let a_density = rng.gen_range(0.1..1.0);
            let input = random_acts(&mut rng, cols, a_density, 8);
            let (mut ap, _) = prepare_ap(&cfg).unwrap();
            let got = run_layer(&mut ap, &cfg, &input).unwrap();
            let want = reference_layer(&cfg, &input).unwrap();
            assert_eq!(got.accumulators, want.accumulators, "trial {trial}");
            assert_eq!(got.outputs, want.outputs, "trial {trial}");
            // measured per-stage cycles match the closed forms
            let expect = cfg.expected_report(input.nnz());
            assert_eq!(got.report.broadcast, expect.broadcast, "trial {trial}");
            assert_eq!(got.report.multiply, expect.multiply, "trial {trial}");
            assert_eq!(got.report.reduce, expect.reduce, "trial {trial}");
            assert_eq!(got.report.activation, expect.activation, "trial {trial}");
            assert_eq!(got.report.extract, expect.extract, "trial {trial}");
            assert_eq!(got.report.restore, expect.restore, "trial {trial}");
        }
    }

    #[test]
    fn lut_activation_matches_host_clamp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = LutSpec::from_fn(4, |v| (v * v).min(100)).unwrap();
        let cfg = {
            let m = SparseMatrix::new(
                8,
                8,
                (0..8).map(|i| (i as u32, i as u32, 1i64)).collect(),
                8,
                0,
            )
            .unwrap();
            LayerConfig::build(
                encode_acsr(&m).unwrap(),
                &LayerParams {
                    abits: 8,
                    activation: Activation::Lut(spec.clone()),
                    ..LayerParams::default()
                },
            )
            .unwrap()
        };
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        let k = cfg.fmap.c.len;
        let mut seeded = Vec::new();
        for pu in 0..8 {
            // accumulators straddling the window boundary
            let v = rng.gen_range(-300i64..300);
            ap.poke_bits(pu, cfg.fmap.c.base, k, v);
            seeded.push(v);
        }
        let before = ap.cycles();
        apply_lut_activation(&mut ap, &cfg.fmap, &spec).unwrap();
        assert_eq!(ap.cycles() - before, lut_activation_cycles(k, 4));
        for (pu, &v) in seeded.iter().enumerate() {
            let want = spec.lookup(spec.clamp(v));
            assert_eq!(
                ap.peek_bits_i64(pu, cfg.fmap.c.base, k),
                want,
                "PU {pu} seeded {v}"
            );
        }
    }

    #[test]
    fn identity_lut_preserves_in_window_values() {
        let spec = LutSpec::from_fn(6, |v| v).unwrap();
        let cfg = toy_layer(&[(0, 0, 1)], 1, 1, Activation::Lut(spec.clone()));
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        ap.poke_bits(0, cfg.fmap.c.base, cfg.fmap.c.len, -17);
        apply_lut_activation(&mut ap, &cfg.fmap, &spec).unwrap();
        assert_eq!(ap.peek_bits_i64(0, cfg.fmap.c.base, cfg.fmap.c.len), -17);
    }

    #[test]
    fn network_chains_and_checks_dimensions() {
        // two-layer toy net vs composed oracle
        let l1 = toy_layer(&[(0, 0, 2), (1, 1, 3), (2, 0, 1), (2, 2, 1)], 3, 3, Activation::Relu);
        let l2 = toy_layer(&[(0, 0, 1), (0, 2, 2), (1, 1, -1)], 2, 3, Activation::Relu);
        let input = acts(&[(0, 3), (1, 2), (2, 1)]);
        let got = run_network(&[l1.clone(), l2.clone()], &input, None).unwrap();
        let want = reference_network(&[l1.clone(), l2.clone()], &input).unwrap();
        assert_eq!(got.outputs, want.outputs);
        assert_eq!(got.layers[0].accumulators, want.layers[0].accumulators);
        assert_eq!(got.layers[1].accumulators, want.layers[1].accumulators);

        // single layer network == run_layer
        let single = run_network(&[l1.clone()], &input, None).unwrap();
        let (mut ap, _) = prepare_ap(&l1).unwrap();
        let direct = run_layer(&mut ap, &l1, &input).unwrap();
        assert_eq!(single.outputs, direct.outputs);

        // dimension mismatch: 3-row layer into a 2-column layer
        let bad = toy_layer(&[(0, 0, 1)], 1, 2, Activation::Relu);
        assert!(run_network(&[l1, bad], &input, None).is_err());

        // empty network
        assert!(run_network(&[], &input, None).is_err());
    }

    #[test]
    fn empty_input_propagates_zeros() {
        let l1 = toy_layer(&[(0, 0, 2), (1, 1, 3)], 2, 2, Activation::Relu);
        let got = run_network(&[l1], &acts(&[]), None).unwrap();
        assert!(got.outputs.entries.is_empty());
    }

    #[test]
    fn removing_an_activation_only_affects_rows_using_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = random_layer(&mut rng, 20, 20, 0.3, 8, Activation::None);
        let input = random_acts(&mut rng, 20, 0.8, 8);
        if input.nnz() < 2 || cfg.image.nnz() == 0 {
            panic!("degenerate test setup");
        }
        let removed = input.entries[input.nnz() / 2].0;
        let thinned = ActivationList::new(
            input
                .entries
                .iter()
                .copied()
                .filter(|&(i, _)| i != removed)
                .collect(),
            8,
            false,
            0,
        )
        .unwrap();

        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        let full = run_layer(&mut ap, &cfg, &input).unwrap();
        let (mut ap2, _) = prepare_ap(&cfg).unwrap();
        let thin = run_layer(&mut ap2, &cfg, &thinned).unwrap();

        assert_eq!(full.report.broadcast, thin.report.broadcast + 1);
        for (block, &(row, acc)) in full.accumulators.iter().enumerate() {
            let start = cfg.image.block_starts[block];
            let uses_removed = (start..start + cfg.image.block_len(block))
                .any(|pu| cfg.image.col_index[pu] == removed);
            if !uses_removed {
                assert_eq!(thin.accumulators[block], (row, acc));
            }
        }
    }

    #[test]
    fn flag_convergence_after_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = random_layer(&mut rng, 15, 15, 0.4, 8, Activation::None);
        let (mut ap, _) = prepare_ap(&cfg).unwrap();
        soft_reduce(&mut ap, &cfg.fmap).unwrap();
        for pu in 0..cfg.image.nnz() {
            let flag = ap.peek_bits(pu, cfg.fmap.row_flag.base, 2);
            assert_ne!(flag, 0b01, "PU {pu} still flagged 01");
        }
        for &start in &cfg.image.block_starts {
            let was_start = cfg.image.row_flag[start] == RowFlag::Start;
            if was_start {
                assert_eq!(ap.peek_bits(start, cfg.fmap.row_flag.base, 2), 0b11);
            }
        }
        // restore brings the pristine flags back
        restore_flags(&mut ap, &cfg.fmap).unwrap();
        for pu in 0..cfg.image.nnz() {
            assert_eq!(
                ap.peek_bits(pu, cfg.fmap.row_flag.base, 2),
                cfg.image.row_flag[pu].bits() as u64
            );
        }
    }

    #[test]
    fn activation_file_formats() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();

        let pairs = dir.path().join("a.csv");
        let mut f = std::fs::File::create(&pairs).unwrap();
        writeln!(f, "# index,value").unwrap();
        writeln!(f, "3, 17").unwrap();
        writeln!(f, "0, 5").unwrap();
        writeln!(f, "2, 0").unwrap(); // dropped
        drop(f);
        let a = load_activations(&pairs, 8, false, 0).unwrap();
        assert_eq!(a.entries, vec![(0, 5), (3, 17)]);

        let dense = dir.path().join("d.txt");
        let mut f = std::fs::File::create(&dense).unwrap();
        for v in [0, 7, 0, 9] {
            writeln!(f, "{}", v).unwrap();
        }
        drop(f);
        let a = load_activations(&dense, 8, false, 0).unwrap();
        assert_eq!(a.entries, vec![(1, 7), (3, 9)]);

        // real values quantized at the given scale
        let real = dir.path().join("r.csv");
        let mut f = std::fs::File::create(&real).unwrap();
        writeln!(f, "0, 1.5").unwrap();
        drop(f);
        let a = load_activations(&real, 8, false, 2).unwrap();
        assert_eq!(a.entries, vec![(0, 6)]);
    }
}
