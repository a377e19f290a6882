//! Perfect-induction microcode.
//!
//! Word-level arithmetic is built from truth-table passes: each pass entry
//! compares one input pattern against a set of bit-columns and writes the
//! precomputed function value into the output columns of every matching
//! row, all rows in parallel, one cycle per issued entry.
//!
//! A pass whose outputs are disjoint from its inputs is trivially safe.
//! An *in-place* pass (outputs overlap inputs) is only executable if its
//! entry order is hazard-free: a pattern written by one entry must never
//! match the key of a later entry, otherwise some row is transformed
//! twice. `TruthTablePass` proves this at construction by replaying the
//! entry sequence against the atomic per-row application for every
//! seeding of the touched bits, and rejects hazardous orders.

use crate::ap::{ApState, Dir, KeyMask, Step};
use crate::error::{Error, Result};

/// One absolute bit-column within the PU word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct BitRef(pub usize);

/// A run of consecutive bit-columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldRef {
    pub base: usize,
    pub len: usize,
}

impl FieldRef {
    pub fn new(base: usize, len: usize) -> Self {
        FieldRef { base, len }
    }

    pub fn bit(&self, i: usize) -> BitRef {
        assert!(i < self.len, "bit {} out of field of length {}", i, self.len);
        BitRef(self.base + i)
    }

    /// Most significant bit (the sign bit of a two's complement field).
    pub fn msb(&self) -> BitRef {
        assert!(self.len > 0);
        BitRef(self.base + self.len - 1)
    }

    pub fn end(&self) -> usize {
        self.base + self.len
    }

    pub fn overlaps(&self, other: &FieldRef) -> bool {
        self.base < other.end() && other.base < self.end()
    }

    pub fn contains(&self, bit: BitRef) -> bool {
        bit.0 >= self.base && bit.0 < self.end()
    }
}

/// One truth-table entry: `key` over the pass's input columns, `out` over
/// its output columns, both packed LSB-first in declaration order.
#[derive(Clone, Copy, Debug)]
pub struct TtEntry {
    pub key: u64,
    pub out: u64,
}

impl TtEntry {
    pub fn new(key: u64, out: u64) -> Self {
        TtEntry { key, out }
    }
}

/// An ordered truth-table pass over named input and output columns.
#[derive(Clone, Debug)]
pub struct TruthTablePass {
    inputs: Vec<BitRef>,
    outputs: Vec<BitRef>,
    entries: Vec<TtEntry>,
    in_place: bool,
}

// in-place hazard checking enumerates 2^|inputs ∪ outputs| seedings
const MAX_IN_PLACE_BITS: usize = 12;

impl TruthTablePass {
    pub fn new(inputs: Vec<BitRef>, outputs: Vec<BitRef>, entries: Vec<TtEntry>) -> Result<Self> {
        if inputs.is_empty() || outputs.is_empty() {
            return Err(Error::Contract(
                "truth-table pass needs at least one input and one output column".to_string(),
            ));
        }
        if inputs.len() > 20 || outputs.len() > 64 {
            return Err(Error::Contract(
                "truth-table pass exceeds supported column counts".to_string(),
            ));
        }
        let mut all = inputs.clone();
        all.extend_from_slice(&outputs);
        let mut sorted = all.clone();
        sorted.sort();
        let dup_in = {
            let mut s = inputs.clone();
            s.sort();
            s.windows(2).any(|w| w[0] == w[1])
        };
        let dup_out = {
            let mut s = outputs.clone();
            s.sort();
            s.windows(2).any(|w| w[0] == w[1])
        };
        if dup_in || dup_out {
            return Err(Error::Contract(
                "truth-table pass lists a column twice".to_string(),
            ));
        }
        let mut keys: Vec<u64> = entries.iter().map(|e| e.key).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(
                "truth-table entries must have unique input patterns".to_string(),
            ));
        }
        let key_space = 1u64.checked_shl(inputs.len() as u32).unwrap_or(u64::MAX);
        if entries.iter().any(|e| e.key >= key_space) {
            return Err(Error::Contract(
                "truth-table key wider than the input column list".to_string(),
            ));
        }
        let in_place = outputs.iter().any(|o| inputs.contains(o));
        let pass = TruthTablePass {
            inputs,
            outputs,
            entries,
            in_place,
        };
        if in_place {
            pass.check_hazard_free()?;
        }
        Ok(pass)
    }

    pub fn inputs(&self) -> &[BitRef] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[BitRef] {
        &self.outputs
    }

    pub fn is_in_place(&self) -> bool {
        self.in_place
    }

    /// An entry is a fixed point when every one of its output columns is
    /// also an input column and the written value equals the bit already
    /// implied by the key. Fixed points are never issued and never counted.
    fn is_fixed_point(&self, e: &TtEntry) -> bool {
        self.outputs.iter().enumerate().all(|(oi, oc)| {
            match self.inputs.iter().position(|ic| ic == oc) {
                Some(ii) => (e.out >> oi) & 1 == (e.key >> ii) & 1,
                None => false,
            }
        })
    }

    pub fn issued_entries(&self) -> impl Iterator<Item = &TtEntry> {
        self.entries.iter().filter(|e| !self.is_fixed_point(e))
    }

    /// Number of compare+write cycles this pass costs.
    pub fn cycle_cost(&self) -> u64 {
        self.issued_entries().count() as u64
    }

    /// Returns a copy of the pass with an extra required input bit appended
    /// to every entry's key. Rows where the gate column differs never match
    /// any entry, so the pass becomes conditional at no extra cycles.
    pub fn gated(&self, gate: BitRef, required: bool) -> Result<TruthTablePass> {
        if self.inputs.contains(&gate) || self.outputs.contains(&gate) {
            return Err(Error::Contract(
                "gate column already participates in the pass".to_string(),
            ));
        }
        let mut inputs = self.inputs.clone();
        inputs.push(gate);
        let pos = inputs.len() - 1;
        let entries = self
            .entries
            .iter()
            .map(|e| TtEntry {
                key: e.key | (required as u64) << pos,
                out: e.out,
            })
            .collect();
        TruthTablePass::new(inputs, self.outputs.clone(), entries)
    }

    /// Simulates the sequential entry replay against the atomic per-row
    /// application for every seeding of the touched bits.
    fn check_hazard_free(&self) -> Result<()> {
        // a single issued entry executes against original bits everywhere:
        // sequential and atomic application coincide for any column count
        if self.issued_entries().count() <= 1 {
            return Ok(());
        }
        let mut cols: Vec<BitRef> = self.inputs.clone();
        for o in &self.outputs {
            if !cols.contains(o) {
                cols.push(*o);
            }
        }
        if cols.len() > MAX_IN_PLACE_BITS {
            return Err(Error::Contract(format!(
                "in-place pass touches {} bits; hazard analysis supports at most {}",
                cols.len(),
                MAX_IN_PLACE_BITS
            )));
        }
        let in_pos: Vec<usize> = self
            .inputs
            .iter()
            .map(|c| cols.iter().position(|x| x == c).unwrap())
            .collect();
        let out_pos: Vec<usize> = self
            .outputs
            .iter()
            .map(|c| cols.iter().position(|x| x == c).unwrap())
            .collect();

        let extract_key = |state: u64| -> u64 {
            in_pos
                .iter()
                .enumerate()
                .fold(0, |k, (i, &p)| k | ((state >> p) & 1) << i)
        };
        let apply_out = |state: u64, out: u64| -> u64 {
            out_pos.iter().enumerate().fold(state, |s, (i, &p)| {
                if (out >> i) & 1 == 1 {
                    s | 1 << p
                } else {
                    s & !(1 << p)
                }
            })
        };

        let issued: Vec<&TtEntry> = self.issued_entries().collect();
        for seed in 0..(1u64 << cols.len()) {
            // atomic: at most one entry (keys unique) transforms the row
            let key = extract_key(seed);
            let atomic = match self.entries.iter().find(|e| e.key == key) {
                Some(e) => apply_out(seed, e.out),
                None => seed,
            };
            // sequential: every issued entry sees the running state
            let mut state = seed;
            for e in &issued {
                if extract_key(state) == e.key {
                    state = apply_out(state, e.out);
                }
            }
            if state != atomic {
                return Err(Error::Hazard(format!(
                    "entry order is not atomic: seeding {:0w$b} ends as {:0w$b}, expected {:0w$b}",
                    seed,
                    state,
                    atomic,
                    w = cols.len()
                )));
            }
        }
        Ok(())
    }
}

/// Executes a pass: one fused compare+write per issued entry.
pub fn run_tt_pass(ap: &mut ApState, pass: &TruthTablePass) -> Result<()> {
    let width = ap.width();
    for e in pass.issued_entries() {
        let mut cmp = KeyMask::new(width);
        for (i, c) in pass.inputs.iter().enumerate() {
            cmp.set_bit(c.0, (e.key >> i) & 1 == 1);
        }
        let mut wr = KeyMask::new(width);
        for (i, c) in pass.outputs.iter().enumerate() {
            wr.set_bit(c.0, (e.out >> i) & 1 == 1);
        }
        if pass.in_place {
            ap.fused_compare_write(&cmp, &wr)?;
        } else {
            ap.compare_write(&cmp, &wr)?;
        }
    }
    Ok(())
}

/// Clears `f` in every row: a tag-all compare fused with an all-zero write,
/// one cycle. A zero-length field is a free no-op.
pub fn clear_field(ap: &mut ApState, f: &FieldRef) -> Result<()> {
    if f.len == 0 {
        return Ok(());
    }
    let mut wr = KeyMask::new(ap.width());
    wr.set_bits(f.base, f.len, 0);
    ap.compare_write(&KeyMask::new(ap.width()), &wr)
}

/// Clears an arbitrary set of columns in every row, one cycle.
pub fn clear_columns(ap: &mut ApState, cols: &[BitRef]) -> Result<()> {
    if cols.is_empty() {
        return Ok(());
    }
    let mut wr = KeyMask::new(ap.width());
    for c in cols {
        wr.set_bit(c.0, false);
    }
    ap.compare_write(&KeyMask::new(ap.width()), &wr)
}

/// dst := a AND b in every row. Two cycles: clear dst, then the single
/// productive entry 11 -> 1.
pub fn bit_and(ap: &mut ApState, dst: BitRef, a: BitRef, b: BitRef) -> Result<()> {
    if dst == a || dst == b || a == b {
        return Err(Error::Contract(
            "bit_and requires three distinct columns".to_string(),
        ));
    }
    clear_columns(ap, &[dst])?;
    let pass = TruthTablePass::new(vec![a, b], vec![dst], vec![TtEntry::new(0b11, 1)])?;
    run_tt_pass(ap, &pass)
}

/// The hazard-free full-adder entry order. With inputs (s, p, carry) and
/// outputs (s, carry), only these four of the eight truth-table entries
/// change state; each written pattern can only match a key issued earlier,
/// so a single carry column suffices:
///
///   (p=0, s=0, c=1) -> (s=1, c=0)
///   (p=0, s=1, c=1) -> (s=0, c=1)
///   (p=1, s=1, c=0) -> (s=0, c=1)
///   (p=1, s=0, c=0) -> (s=1, c=0)
///
/// key bits are packed (s, p, c) LSB-first, out bits (s, c).
pub const FULL_ADD_ORDER: [(u64, u64); 4] = [
    (0b100, 0b01),
    (0b101, 0b10),
    (0b011, 0b10),
    (0b010, 0b01),
];

pub fn full_add_pass(s: BitRef, p: BitRef, carry: BitRef) -> Result<TruthTablePass> {
    TruthTablePass::new(
        vec![s, p, carry],
        vec![s, carry],
        FULL_ADD_ORDER
            .iter()
            .map(|&(k, o)| TtEntry::new(k, o))
            .collect(),
    )
}

/// In-place full addition: (s, carry) := (s XOR p XOR carry,
/// majority(s, p, carry)) in every row, p untouched. Four cycles.
pub fn full_add(ap: &mut ApState, s: BitRef, p: BitRef, carry: BitRef) -> Result<()> {
    if s == p || s == carry || p == carry {
        return Err(Error::Contract(
            "full_add requires three distinct columns".to_string(),
        ));
    }
    run_tt_pass(ap, &full_add_pass(s, p, carry)?)
}

/// In-place half addition: (s, carry) := (s XOR carry, s AND carry).
/// Two cycles.
pub(crate) fn half_add_pass(s: BitRef, carry: BitRef) -> Result<TruthTablePass> {
    TruthTablePass::new(
        vec![s, carry],
        vec![s, carry],
        vec![TtEntry::new(0b10, 0b01), TtEntry::new(0b11, 0b10)],
    )
}

/// Moves a pending carry into a column known to be zero: rows with carry=1
/// get s:=1, carry:=0. One cycle. Callers must guarantee s=0 wherever
/// carry=1, otherwise this is an OR, not an addition.
pub(crate) fn carry_inject_pass(s: BitRef, carry: BitRef) -> Result<TruthTablePass> {
    TruthTablePass::new(vec![carry], vec![s, carry], vec![TtEntry::new(1, 0b01)])
}

/// In-place full subtraction s := s - p - borrow with borrow-out, the
/// mirror of `FULL_ADD_ORDER`. key bits (s, p, b), out bits (s, b).
pub(crate) const FULL_SUB_ORDER: [(u64, u64); 4] = [
    (0b101, 0b00),
    (0b010, 0b11),
    (0b011, 0b00),
    (0b100, 0b11),
];

pub(crate) fn full_sub_pass(s: BitRef, p: BitRef, borrow: BitRef) -> Result<TruthTablePass> {
    TruthTablePass::new(
        vec![s, p, borrow],
        vec![s, borrow],
        FULL_SUB_ORDER
            .iter()
            .map(|&(k, o)| TtEntry::new(k, o))
            .collect(),
    )
}

/// In-place borrow propagation: s := s - borrow with borrow-out. Two cycles.
pub(crate) fn half_sub_pass(s: BitRef, borrow: BitRef) -> Result<TruthTablePass> {
    TruthTablePass::new(
        vec![s, borrow],
        vec![s, borrow],
        vec![TtEntry::new(0b11, 0b00), TtEntry::new(0b10, 0b11)],
    )
}

fn check_fields_disjoint(fields: &[(&FieldRef, &str)]) -> Result<()> {
    for (i, (a, an)) in fields.iter().enumerate() {
        for (b, bn) in fields.iter().skip(i + 1) {
            if a.overlaps(b) {
                return Err(Error::Contract(format!(
                    "fields {} and {} overlap",
                    an, bn
                )));
            }
        }
    }
    Ok(())
}

/// Word-level ripple addition acc := acc + addend (two's complement over
/// acc.len bits), optionally gated so only rows where `gate` holds the
/// required value participate.
///
/// Costs 1 cycle to clear the carry, 4 per addend bit, and per extension
/// position 4 (signed addend, sign bit re-read) or 2 (unsigned, pure carry
/// propagation).
pub fn add_fields_gated(
    ap: &mut ApState,
    acc: &FieldRef,
    addend: &FieldRef,
    carry: BitRef,
    addend_signed: bool,
    gate: Option<(BitRef, bool)>,
) -> Result<()> {
    if acc.len < addend.len {
        return Err(Error::Contract(format!(
            "accumulator of {} bits narrower than addend of {}",
            acc.len, addend.len
        )));
    }
    check_fields_disjoint(&[(acc, "acc"), (addend, "addend")])?;
    if acc.contains(carry) || addend.contains(carry) {
        return Err(Error::Contract("carry column aliases an operand".to_string()));
    }
    clear_columns(ap, &[carry])?;
    let run = |ap: &mut ApState, pass: TruthTablePass| -> Result<()> {
        let pass = match gate {
            Some((g, req)) => pass.gated(g, req)?,
            None => pass,
        };
        run_tt_pass(ap, &pass)
    };
    for i in 0..acc.len {
        if i < addend.len {
            run(ap, full_add_pass(acc.bit(i), addend.bit(i), carry)?)?;
        } else if addend_signed {
            run(ap, full_add_pass(acc.bit(i), addend.msb(), carry)?)?;
        } else {
            run(ap, half_add_pass(acc.bit(i), carry)?)?;
        }
    }
    Ok(())
}

/// Ungated unsigned-extension addition; see `add_fields_gated`.
pub fn add_fields(ap: &mut ApState, acc: &FieldRef, addend: &FieldRef, carry: BitRef) -> Result<()> {
    add_fields_gated(ap, acc, addend, carry, false, None)
}

/// Operand signedness for the multiplier. Weights default to two's
/// complement, activations to unsigned (the post-RELU regime).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MulOperands {
    pub w_signed: bool,
    pub b_signed: bool,
}

impl Default for MulOperands {
    fn default() -> Self {
        MulOperands {
            w_signed: true,
            b_signed: false,
        }
    }
}

impl MulOperands {
    fn extra_bit(&self) -> usize {
        (self.w_signed && self.b_signed) as usize
    }
}

/// Gated subtraction of an unsigned field at a column offset inside the
/// accumulator, borrow rippled to the accumulator top. Used to correct an
/// unsigned product for two's complement operands.
fn gated_subtract(
    ap: &mut ApState,
    acc: &FieldRef,
    offset: usize,
    sub: &FieldRef,
    borrow: BitRef,
    gate: (BitRef, bool),
) -> Result<()> {
    clear_columns(ap, &[borrow])?;
    for i in 0..sub.len {
        let pass = full_sub_pass(acc.bit(offset + i), sub.bit(i), borrow)?.gated(gate.0, gate.1)?;
        run_tt_pass(ap, &pass)?;
    }
    for pos in offset + sub.len..acc.len {
        let pass = half_sub_pass(acc.bit(pos), borrow)?.gated(gate.0, gate.1)?;
        run_tt_pass(ap, &pass)?;
    }
    Ok(())
}

/// Bit-serial multiplication c := w * b in every row simultaneously.
///
/// Phase one is the unsigned shift-add of the two bit patterns: for each
/// multiplier bit j, AND it with every multiplicand bit into a scratch
/// product column and full-add at offset i+j; the bounded carry is absorbed
/// one position above the partial product. Because the running sum after
/// round j always fits in m+j+1 bits, no carry is ever lost.
///
/// Phase two fixes up declared two's complement operands with gated
/// subtractions: interpreting an m-bit pattern uw as signed w means
/// w = uw - 2^m*sign(w), so w*b = uw*ub - 2^m*sign(w)*ub - 2^n*sign(b)*uw
/// + 2^(m+n)*sign(w)*sign(b), each correction applied only to the rows
/// whose sign bit is set.
///
/// `c` must be cleared and wide enough: c.len >= w.len + b.len, plus one
/// when both operands are signed. `t` provides two scratch bits.
pub fn multiply_fields(
    ap: &mut ApState,
    c: &FieldRef,
    w: &FieldRef,
    b: &FieldRef,
    t: &FieldRef,
    ops: MulOperands,
) -> Result<()> {
    let (m, n, k) = (w.len, b.len, c.len);
    if m == 0 || n == 0 {
        return Err(Error::Contract("operand fields must be non-empty".to_string()));
    }
    if k < m + n + ops.extra_bit() {
        return Err(Error::Contract(format!(
            "accumulator of {} bits cannot hold a {}x{} bit product{}",
            k,
            m,
            n,
            if ops.extra_bit() == 1 {
                " with both operands signed"
            } else {
                ""
            }
        )));
    }
    if t.len < 2 {
        return Err(Error::Contract(
            "multiplier needs at least 2 scratch bits".to_string(),
        ));
    }
    check_fields_disjoint(&[(c, "c"), (w, "w"), (b, "b"), (t, "t")])?;

    let pp = t.bit(0);
    let carry = t.bit(1);
    clear_columns(ap, &[pp, carry])?;

    // phase one: unsigned shift-add with bounded carry
    for j in 0..n {
        for i in 0..m {
            bit_and(ap, pp, w.bit(i), b.bit(j))?;
            full_add(ap, c.bit(i + j), pp, carry)?;
        }
        // the running sum fits in m+j+1 bits, so c[m+j] is still zero here
        run_tt_pass(ap, &carry_inject_pass(c.bit(m + j), carry)?)?;
    }

    // phase two: sign corrections
    if ops.w_signed {
        gated_subtract(ap, c, m, b, carry, (w.msb(), true))?;
    }
    if ops.b_signed {
        gated_subtract(ap, c, n, w, carry, (b.msb(), true))?;
    }
    if ops.w_signed && ops.b_signed {
        bit_and(ap, pp, w.msb(), b.msb())?;
        for pos in m + n..k {
            run_tt_pass(ap, &half_add_pass(c.bit(pos), pp)?)?;
        }
    }
    Ok(())
}

/// Exact cycle count of `multiply_fields` for the given field widths.
pub fn multiply_cycles(m: usize, n: usize, k: usize, ops: MulOperands) -> u64 {
    let (m, n, k) = (m as u64, n as u64, k as u64);
    let mut cycles = 1 + n * (6 * m + 1);
    if ops.w_signed {
        cycles += 1 + 4 * n + 2 * (k - m - n);
    }
    if ops.b_signed {
        cycles += 1 + 4 * m + 2 * (k - m - n);
    }
    if ops.w_signed && ops.b_signed {
        cycles += 2 + 2 * (k - m - n);
    }
    cycles
}

/// Bit-parallel multiplication by table lookup: one fused compare+write per
/// table entry, matching rows whose (w, b) fields equal the entry's operand
/// values and writing the precomputed product into c. Costs exactly
/// `table.len()` cycles regardless of field widths. Rows whose operand pair
/// is not in the table are left untouched; `verify_lut_coverage` detects
/// that case.
pub fn lut_multiply(
    ap: &mut ApState,
    c: &FieldRef,
    w: &FieldRef,
    b: &FieldRef,
    table: &[(i64, i64, i64)],
    ops: MulOperands,
) -> Result<()> {
    check_fields_disjoint(&[(c, "c"), (w, "w"), (b, "b")])?;
    for &(wv, bv, prod) in table {
        check_value_fits(wv, w.len, ops.w_signed, "multiplier")?;
        check_value_fits(bv, b.len, ops.b_signed, "multiplicand")?;
        check_value_fits(prod, c.len, true, "product")?;
        let mut cmp = KeyMask::new(ap.width());
        cmp.set_bits(w.base, w.len, wv);
        cmp.set_bits(b.base, b.len, bv);
        let mut wr = KeyMask::new(ap.width());
        wr.set_bits(c.base, c.len, prod);
        ap.compare_write(&cmp, &wr)?;
    }
    Ok(())
}

fn check_value_fits(value: i64, len: usize, signed: bool, what: &str) -> Result<()> {
    let fits = if signed {
        len >= 64 || (value >= -(1i64 << (len - 1)) && value < (1i64 << (len - 1)))
    } else {
        value >= 0 && (len >= 63 || value < (1i64 << len))
    };
    if fits {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{} value {} does not fit {} {} bits",
            what,
            value,
            if signed { "signed" } else { "unsigned" },
            len
        )))
    }
}

/// Host-side check that every row's operand pair is covered by the product
/// table. Debug access only, no cycles.
pub fn verify_lut_coverage(
    ap: &ApState,
    w: &FieldRef,
    b: &FieldRef,
    table: &[(i64, i64, i64)],
    ops: MulOperands,
) -> Result<()> {
    for row in 0..ap.depth() {
        let wv = if ops.w_signed {
            ap.peek_bits_i64(row, w.base, w.len)
        } else {
            ap.peek_bits(row, w.base, w.len) as i64
        };
        let bv = if ops.b_signed {
            ap.peek_bits_i64(row, b.base, b.len)
        } else {
            ap.peek_bits(row, b.base, b.len) as i64
        };
        if !table.iter().any(|&(tw, tb, _)| tw == wv && tb == bv) {
            return Err(Error::Verify(format!(
                "PU {} holds operand pair ({}, {}) not covered by the product table",
                row, wv, bv
            )));
        }
    }
    Ok(())
}

/// Table-driven function application dst := f(src): one fused compare+write
/// per entry, keyed on the raw src bit pattern. dst and src must be
/// disjoint. Costs exactly `table.len()` cycles.
pub fn lut_apply(ap: &mut ApState, dst: &FieldRef, src: &FieldRef, table: &[(u64, u64)]) -> Result<()> {
    check_fields_disjoint(&[(dst, "dst"), (src, "src")])?;
    if src.len > 20 {
        return Err(Error::Contract(
            "lut_apply domain wider than 20 bits is not enumerable".to_string(),
        ));
    }
    for &(input, output) in table {
        if input >> src.len != 0 {
            return Err(Error::Contract(format!(
                "table input {:#x} wider than the {}-bit source field",
                input, src.len
            )));
        }
        let mut cmp = KeyMask::new(ap.width());
        cmp.set_bits(src.base, src.len, input as i64);
        let mut wr = KeyMask::new(ap.width());
        wr.set_bits(dst.base, dst.len, output as i64);
        ap.compare_write(&cmp, &wr)?;
    }
    Ok(())
}

/// Short/long step decomposition for a tag shift over `distance` rows.
/// Distances below `long_step` use short steps; at or above, the distance
/// must be a whole number of long steps.
pub fn move_steps(distance: usize, long_step: usize) -> Result<(Step, usize)> {
    if distance == 0 {
        return Err(Error::Contract("shift distance must be >= 1".to_string()));
    }
    if distance < long_step {
        Ok((Step::Short, distance))
    } else if distance % long_step == 0 {
        Ok((Step::Long, distance / long_step))
    } else {
        Err(Error::Contract(format!(
            "distance {} is neither below long_step {} nor a whole multiple of it",
            distance, long_step
        )))
    }
}

/// Move cost in cycles for a shift of `distance` rows.
pub fn move_cost(distance: usize, long_step: usize) -> u64 {
    match move_steps(distance, long_step) {
        Ok((_, count)) => count as u64,
        Err(_) => 0,
    }
}

/// Copies src into dst shifted `distance` rows toward row 0:
/// dst[i] = src[i+distance], zero beyond the bottom. Sources keep their
/// bits. Optional extra (src, dst) column pairs ride along, each treated as
/// one more bit-column. dst must be cleared beforehand.
///
/// Per bit-column: one compare to lift the column into the tag, the tag
/// shift, and one write into the destination column of the tagged rows.
pub fn shift_field_copy(
    ap: &mut ApState,
    dst: &FieldRef,
    src: &FieldRef,
    distance: usize,
    extras: &[(BitRef, BitRef)],
) -> Result<()> {
    if dst.len != src.len {
        return Err(Error::Contract(format!(
            "copy between fields of different lengths ({} vs {})",
            dst.len, src.len
        )));
    }
    if dst.overlaps(src) {
        return Err(Error::Contract("copy source and destination overlap".to_string()));
    }
    let (step, count) = move_steps(distance, ap.long_step())?;
    let width = ap.width();
    let pairs = (0..src.len)
        .map(|i| (src.bit(i), dst.bit(i)))
        .chain(extras.iter().copied());
    for (s_col, d_col) in pairs {
        let mut cmp = KeyMask::new(width);
        cmp.set_bit(s_col.0, true);
        ap.compare(&cmp)?;
        for _ in 0..count {
            ap.move_tag(Dir::Up, step);
        }
        let mut wr = KeyMask::new(width);
        wr.set_bit(d_col.0, true);
        ap.write(&wr)?;
    }
    Ok(())
}

/// Cycle cost of `shift_field_copy` over `columns` bit-columns.
pub fn shift_copy_cycles(columns: usize, distance: usize, long_step: usize) -> u64 {
    columns as u64 * (2 + move_cost(distance, long_step))
}
