//! Associative processor core.
//!
//! The machine is a content-addressable memory: a `depth x width` bit grid
//! (one row per processing unit, PU), a one-bit-per-row tag register, and
//! five instructions — compare, write, fused compare+write, tag move, and
//! if_match — plus a sequential row read. Every instruction costs exactly
//! one cycle; a move over a distance of `s` invocations costs `s` cycles.
//!
//! Storage is column-major: each bit-column is a packed `u64` vector over
//! the rows, so a compare against one column is a handful of word AND/ANDN
//! operations regardless of depth. All bits above `depth` in a column word
//! are kept zero.

use serde::Serialize;

use crate::error::{Error, Result};

const WORD: usize = 64;

fn words_for(bits: usize) -> usize {
    (bits + WORD - 1) / WORD
}

/// Clears bits at positions >= `len`.
fn mask_tail(words: &mut [u64], len: usize) {
    let rem = len % WORD;
    if rem != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << rem) - 1;
        }
    }
}

fn popcount(words: &[u64]) -> u64 {
    words.iter().map(|w| w.count_ones() as u64).sum()
}

/// Tag move direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dir {
    Up,
    Down,
}

/// Tag move distance: short is one row, long is `long_step` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Short,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrKind {
    Compare,
    Write,
    CompareWrite,
    Move,
    IfMatch,
    ReadRow,
    HostWrite,
}

/// One instruction record: what ran and how much of the array it touched.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub kind: InstrKind,
    pub cmp_cols: u32,
    pub wr_cols: u32,
    pub tagged: u64,
    pub rows: u64,
}

/// Running activity totals, enough to reconstruct energy exactly:
/// per-cycle tag events are `cycles * rows`, compare cell events are
/// `compare_col_cycles * rows`, and write cell events are summed as
/// `write_cells_tagged = sum(wr_cols * tagged_rows)` over all cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ActivityStats {
    pub cycles: u64,
    pub compare_col_cycles: u64,
    pub write_cells_tagged: u64,
    pub rows: u64,
}

impl ActivityStats {
    /// Activity accumulated between an earlier snapshot and `self`.
    pub fn since(&self, earlier: &ActivityStats) -> ActivityStats {
        debug_assert_eq!(self.rows, earlier.rows);
        ActivityStats {
            cycles: self.cycles - earlier.cycles,
            compare_col_cycles: self.compare_col_cycles - earlier.compare_col_cycles,
            write_cells_tagged: self.write_cells_tagged - earlier.write_cells_tagged,
            rows: self.rows,
        }
    }

    /// Concatenation of two activity streams on same-depth arrays.
    pub fn merged(&self, other: &ActivityStats) -> ActivityStats {
        debug_assert_eq!(self.rows, other.rows);
        ActivityStats {
            cycles: self.cycles + other.cycles,
            compare_col_cycles: self.compare_col_cycles + other.compare_col_cycles,
            write_cells_tagged: self.write_cells_tagged + other.write_cells_tagged,
            rows: self.rows,
        }
    }
}

/// Key/mask pair: the columns participating in a compare or write and the
/// bit value expected (or driven) in each. Columns not listed are masked
/// out. The canonical form stores only masked-in columns, so key bits under
/// mask=0 do not exist at all.
#[derive(Clone, Debug, Default)]
pub struct KeyMask {
    width: usize,
    // sorted by column, no duplicates
    cols: Vec<(u32, bool)>,
}

impl KeyMask {
    pub fn new(width: usize) -> Self {
        KeyMask {
            width,
            cols: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of masked-in columns.
    pub fn masked_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn cols(&self) -> &[(u32, bool)] {
        &self.cols
    }

    /// Masks in `col` with value `bit`. Setting the same column twice
    /// replaces the previous value.
    pub fn set_bit(&mut self, col: usize, bit: bool) -> &mut Self {
        assert!(col < self.width, "column {} out of width {}", col, self.width);
        let c = col as u32;
        match self.cols.binary_search_by_key(&c, |&(k, _)| k) {
            Ok(i) => self.cols[i].1 = bit,
            Err(i) => self.cols.insert(i, (c, bit)),
        }
        self
    }

    /// Masks in `len` consecutive columns starting at `base`, keyed with the
    /// low `len` bits of `value` (bit i of `value` goes to column `base+i`).
    /// `value` is sign-extended beyond bit 63, so two's complement patterns
    /// wider than 64 bits key correctly.
    pub fn set_bits(&mut self, base: usize, len: usize, value: i64) -> &mut Self {
        for i in 0..len {
            let bit = (value >> i.min(63)) & 1 == 1;
            self.set_bit(base + i, bit);
        }
        self
    }

    /// True if the two key/masks share any masked column.
    pub fn overlaps(&self, other: &KeyMask) -> bool {
        let (mut a, mut b) = (self.cols.iter().peekable(), other.cols.iter().peekable());
        while let (Some(&&(ca, _)), Some(&&(cb, _))) = (a.peek(), b.peek()) {
            match ca.cmp(&cb) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// A snapshot of one row's bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowBits {
    width: usize,
    words: Vec<u64>,
}

impl RowBits {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bit(&self, col: usize) -> bool {
        assert!(col < self.width);
        self.words[col / WORD] >> (col % WORD) & 1 == 1
    }

    /// Unsigned value of `len` consecutive columns (LSB at `base`), len <= 64.
    pub fn bits_u64(&self, base: usize, len: usize) -> u64 {
        assert!(len <= 64, "field wider than 64 bits cannot be extracted");
        let mut v = 0u64;
        for i in 0..len {
            if self.bit(base + i) {
                v |= 1 << i;
            }
        }
        v
    }

    /// Two's complement value of `len` consecutive columns, len <= 63.
    pub fn bits_i64(&self, base: usize, len: usize) -> i64 {
        assert!(len <= 63, "signed field wider than 63 bits cannot be extracted");
        let raw = self.bits_u64(base, len);
        let sign = 1u64 << (len - 1);
        if raw & sign != 0 {
            (raw as i64) - (1i64 << len)
        } else {
            raw as i64
        }
    }
}

struct TraceBuf {
    records: Vec<TraceRecord>,
    limit: usize,
}

/// The associative processor: CAM bit grid, tag vector, cycle and activity
/// counters, and optional instruction trace.
pub struct ApState {
    depth: usize,
    width: usize,
    long_step: usize,
    /// One packed bit-vector (over rows) per column.
    cols: Vec<Vec<u64>>,
    tag: Vec<u64>,
    scratch: Vec<u64>,
    stats: ActivityStats,
    trace: Option<TraceBuf>,
}

impl ApState {
    pub fn new(depth: usize, width: usize, long_step: usize) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::Geometry(format!(
                "depth and width must be positive, got {}x{}",
                depth, width
            )));
        }
        if !long_step.is_power_of_two() || long_step < 2 {
            return Err(Error::Geometry(format!(
                "long_step must be a power of two >= 2, got {}",
                long_step
            )));
        }
        let cells = (depth as u128) * (width as u128);
        if cells > 1 << 36 {
            return Err(Error::Geometry(format!(
                "grid of {} cells exceeds the simulator limit",
                cells
            )));
        }
        let w = words_for(depth);
        Ok(ApState {
            depth,
            width,
            long_step,
            cols: vec![vec![0u64; w]; width],
            tag: vec![0u64; w],
            scratch: vec![0u64; w],
            stats: ActivityStats {
                rows: depth as u64,
                ..ActivityStats::default()
            },
            trace: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn long_step(&self) -> usize {
        self.long_step
    }

    pub fn stats(&self) -> ActivityStats {
        self.stats
    }

    pub fn cycles(&self) -> u64 {
        self.stats.cycles
    }

    /// Starts recording one trace record per cycle, keeping at most `limit`
    /// records. Recording survives until `take_trace`.
    pub fn enable_trace(&mut self, limit: usize) {
        self.trace = Some(TraceBuf {
            records: Vec::new(),
            limit,
        });
    }

    pub fn trace_enabled(&self) -> bool {
        self.trace.is_some()
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.take().map(|t| t.records).unwrap_or_default()
    }

    fn check_km(&self, km: &KeyMask) -> Result<()> {
        if km.width() != self.width {
            return Err(Error::Contract(format!(
                "key/mask sized for width {} used on array of width {}",
                km.width(),
                self.width
            )));
        }
        Ok(())
    }

    fn record(&mut self, kind: InstrKind, cmp_cols: usize, wr_cols: usize, tagged: u64) {
        let seq = self.stats.cycles;
        self.stats.cycles += 1;
        self.stats.compare_col_cycles += cmp_cols as u64;
        self.stats.write_cells_tagged += wr_cols as u64 * tagged;
        if let Some(t) = self.trace.as_mut() {
            if t.records.len() < t.limit {
                t.records.push(TraceRecord {
                    seq,
                    kind,
                    cmp_cols: cmp_cols as u32,
                    wr_cols: wr_cols as u32,
                    tagged,
                    rows: self.depth as u64,
                });
            }
        }
    }

    fn tag_from_compare(&mut self, km: &KeyMask) {
        self.scratch.fill(!0u64);
        mask_tail(&mut self.scratch, self.depth);
        for &(col, bit) in km.cols() {
            let col = &self.cols[col as usize];
            if bit {
                for (t, w) in self.scratch.iter_mut().zip(col) {
                    *t &= *w;
                }
            } else {
                for (t, w) in self.scratch.iter_mut().zip(col) {
                    *t &= !*w;
                }
            }
        }
        std::mem::swap(&mut self.tag, &mut self.scratch);
    }

    fn apply_write(&mut self, km: &KeyMask) {
        for &(col, bit) in km.cols() {
            let col = &mut self.cols[col as usize];
            if bit {
                for (c, t) in col.iter_mut().zip(&self.tag) {
                    *c |= *t;
                }
            } else {
                for (c, t) in col.iter_mut().zip(&self.tag) {
                    *c &= !*t;
                }
            }
        }
    }

    /// Compares all rows against the key in parallel. A row is tagged iff
    /// every masked-in column matches; with an empty mask every row matches
    /// (the tag-all idiom). Replaces the previous tag. One cycle.
    pub fn compare(&mut self, km: &KeyMask) -> Result<()> {
        self.check_km(km)?;
        self.tag_from_compare(km);
        let tagged = popcount(&self.tag);
        self.record(InstrKind::Compare, km.masked_cols(), 0, tagged);
        Ok(())
    }

    /// Writes the key into the masked columns of every tagged row. One cycle.
    pub fn write(&mut self, km: &KeyMask) -> Result<()> {
        self.check_km(km)?;
        let tagged = popcount(&self.tag);
        self.apply_write(km);
        self.record(InstrKind::Write, 0, km.masked_cols(), tagged);
        Ok(())
    }

    /// Fused compare+write: the write is gated by the tags produced by this
    /// same instruction's compare, in one cycle. Compare and write column
    /// sets must be disjoint; read-after-write within one cycle is undefined
    /// in the hardware this models.
    pub fn compare_write(&mut self, cmp: &KeyMask, wr: &KeyMask) -> Result<()> {
        self.check_km(cmp)?;
        self.check_km(wr)?;
        if cmp.overlaps(wr) {
            return Err(Error::Contract(
                "compare and write column sets of a fused compare_write must be disjoint"
                    .to_string(),
            ));
        }
        self.fused_compare_write(cmp, wr)
    }

    /// Fused compare+write without the disjointness check. The compare phase
    /// samples the pre-write bits, then the write applies; this defined
    /// ordering is what in-place truth-table passes rely on. Only the
    /// microcode layer, which proves its passes hazard-free, may use it.
    pub(crate) fn fused_compare_write(&mut self, cmp: &KeyMask, wr: &KeyMask) -> Result<()> {
        self.check_km(cmp)?;
        self.check_km(wr)?;
        self.tag_from_compare(cmp);
        let tagged = popcount(&self.tag);
        self.apply_write(wr);
        self.record(
            InstrKind::CompareWrite,
            cmp.masked_cols(),
            wr.masked_cols(),
            tagged,
        );
        Ok(())
    }

    /// Moves the tag vector one short (1 row) or long (`long_step` rows)
    /// step up or down, shifting zeros in at the boundary. One cycle per
    /// invocation.
    pub fn move_tag(&mut self, dir: Dir, step: Step) {
        let s = match step {
            Step::Short => 1,
            Step::Long => self.long_step,
        };
        let n = self.tag.len();
        self.scratch.fill(0);
        let (word_off, bit_off) = (s / WORD, s % WORD);
        match dir {
            // tag'[i] = tag[i+s]: shift toward row 0
            Dir::Up => {
                for i in 0..n {
                    let lo = self.tag.get(i + word_off).copied().unwrap_or(0) >> bit_off;
                    let hi = if bit_off > 0 {
                        self.tag.get(i + word_off + 1).copied().unwrap_or(0) << (WORD - bit_off)
                    } else {
                        0
                    };
                    self.scratch[i] = lo | hi;
                }
            }
            // tag'[i] = tag[i-s]: shift toward higher rows
            Dir::Down => {
                for i in (0..n).rev() {
                    let lo = if i >= word_off {
                        self.tag[i - word_off] << bit_off
                    } else {
                        0
                    };
                    let hi = if bit_off > 0 && i > word_off {
                        self.tag[i - word_off - 1] >> (WORD - bit_off)
                    } else {
                        0
                    };
                    self.scratch[i] = lo | hi;
                }
            }
        }
        std::mem::swap(&mut self.tag, &mut self.scratch);
        mask_tail(&mut self.tag, self.depth);
        let tagged = popcount(&self.tag);
        self.record(InstrKind::Move, 0, 0, tagged);
    }

    /// Global OR over the tag vector. One cycle, state unchanged.
    pub fn if_match(&mut self) -> bool {
        let any = self.tag.iter().any(|&w| w != 0);
        let tagged = popcount(&self.tag);
        self.record(InstrKind::IfMatch, 0, 0, tagged);
        any
    }

    /// Sequential read of one row. One cycle per row.
    pub fn read_row(&mut self, row: usize) -> Result<RowBits> {
        if row >= self.depth {
            return Err(Error::Contract(format!(
                "read_row index {} out of depth {}",
                row, self.depth
            )));
        }
        let bits = self.snapshot_row(row);
        let tagged = popcount(&self.tag);
        self.record(InstrKind::ReadRow, 0, 0, tagged);
        Ok(bits)
    }

    /// Host-side load of one row: writes the masked columns of row `row`
    /// directly, bypassing the tag path. Costs one write cycle, as a
    /// sequential host load does.
    pub fn host_write_row(&mut self, row: usize, km: &KeyMask) -> Result<()> {
        self.check_km(km)?;
        if row >= self.depth {
            return Err(Error::Contract(format!(
                "host_write_row index {} out of depth {}",
                row, self.depth
            )));
        }
        let (w, b) = (row / WORD, row % WORD);
        for &(col, bit) in km.cols() {
            let word = &mut self.cols[col as usize][w];
            if bit {
                *word |= 1 << b;
            } else {
                *word &= !(1 << b);
            }
        }
        self.record(InstrKind::HostWrite, 0, km.masked_cols(), 1);
        Ok(())
    }

    // ---- host debug access: bypasses the instruction path, costs nothing ----

    fn snapshot_row(&self, row: usize) -> RowBits {
        let mut words = vec![0u64; words_for(self.width)];
        let (w, b) = (row / WORD, row % WORD);
        for (col, cw) in self.cols.iter().enumerate() {
            if cw[w] >> b & 1 == 1 {
                words[col / WORD] |= 1 << (col % WORD);
            }
        }
        RowBits {
            width: self.width,
            words,
        }
    }

    /// Debug read of one bit; not cycle-counted.
    pub fn peek_bit(&self, row: usize, col: usize) -> bool {
        assert!(row < self.depth && col < self.width);
        self.cols[col][row / WORD] >> (row % WORD) & 1 == 1
    }

    /// Debug read of a bit run as an unsigned value; not cycle-counted.
    pub fn peek_bits(&self, row: usize, base: usize, len: usize) -> u64 {
        assert!(len <= 64);
        let mut v = 0u64;
        for i in 0..len {
            if self.peek_bit(row, base + i) {
                v |= 1 << i;
            }
        }
        v
    }

    /// Debug read of a bit run as a two's complement value; not cycle-counted.
    pub fn peek_bits_i64(&self, row: usize, base: usize, len: usize) -> i64 {
        assert!(len >= 1 && len <= 63);
        let raw = self.peek_bits(row, base, len);
        if raw >> (len - 1) & 1 == 1 {
            raw as i64 - (1i64 << len)
        } else {
            raw as i64
        }
    }

    /// Debug write of one bit; not cycle-counted.
    pub fn poke_bit(&mut self, row: usize, col: usize, bit: bool) {
        assert!(row < self.depth && col < self.width);
        let word = &mut self.cols[col][row / WORD];
        if bit {
            *word |= 1 << (row % WORD);
        } else {
            *word &= !(1 << (row % WORD));
        }
    }

    /// Debug write of a bit run from the low bits of `value` (sign-extended
    /// beyond bit 63); not cycle-counted.
    pub fn poke_bits(&mut self, row: usize, base: usize, len: usize, value: i64) {
        for i in 0..len {
            self.poke_bit(row, base + i, (value >> i.min(63)) & 1 == 1);
        }
    }

    /// Debug view of the tag vector; not cycle-counted.
    pub fn peek_tag(&self, row: usize) -> bool {
        assert!(row < self.depth);
        self.tag[row / WORD] >> (row % WORD) & 1 == 1
    }

    /// Debug write of the tag vector; not cycle-counted.
    pub fn poke_tag(&mut self, row: usize, bit: bool) {
        assert!(row < self.depth);
        let word = &mut self.tag[row / WORD];
        if bit {
            *word |= 1 << (row % WORD);
        } else {
            *word &= !(1 << (row % WORD));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ap(depth: usize, width: usize) -> ApState {
        ApState::new(depth, width, 16).unwrap()
    }

    #[test]
    fn construction() {
        let a = ap(4, 8);
        assert_eq!(a.depth(), 4);
        assert_eq!(a.width(), 8);
        for r in 0..4 {
            for c in 0..8 {
                assert!(!a.peek_bit(r, c));
            }
            assert!(!a.peek_tag(r));
        }
        assert_eq!(a.cycles(), 0);

        assert!(ApState::new(1, 1, 2).is_ok());
        assert!(matches!(ApState::new(0, 8, 16), Err(Error::Geometry(_))));
        assert!(matches!(ApState::new(8, 0, 16), Err(Error::Geometry(_))));
        assert!(matches!(ApState::new(8, 8, 3), Err(Error::Geometry(_))));
        assert!(matches!(ApState::new(8, 8, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn compare_prefix_tags_all_sharing_rows() {
        // rows 0101, 0110, 0111 (bit 0 = leftmost string char would be
        // confusing; use values: bit3..bit0). Key 01xx on the two high bits.
        let mut a = ap(3, 4);
        for (r, v) in [0b0101, 0b0110, 0b0111].iter().enumerate() {
            a.poke_bits(r, 0, 4, *v);
        }
        let mut km = KeyMask::new(4);
        km.set_bit(3, false).set_bit(2, true);
        a.compare(&km).unwrap();
        assert!(a.peek_tag(0) && a.peek_tag(1) && a.peek_tag(2));

        // full-mask compare singles out the exact row
        let mut full = KeyMask::new(4);
        full.set_bits(0, 4, 0b0101);
        a.compare(&full).unwrap();
        assert!(a.peek_tag(0));
        assert!(!a.peek_tag(1) && !a.peek_tag(2));
        assert_eq!(a.cycles(), 2);
    }

    #[test]
    fn empty_mask_tags_every_row() {
        let mut a = ap(5, 3);
        a.poke_bits(2, 0, 3, 0b101);
        a.compare(&KeyMask::new(3)).unwrap();
        for r in 0..5 {
            assert!(a.peek_tag(r));
        }
        assert!(a.if_match());
    }

    #[test]
    fn write_only_touches_tagged_rows() {
        let mut a = ap(2, 4);
        a.poke_tag(0, true);
        let mut km = KeyMask::new(4);
        km.set_bit(3, true);
        a.write(&km).unwrap();
        assert!(a.peek_bit(0, 3));
        assert!(!a.peek_bit(1, 3));

        // empty tag: no change, cycle still counted
        let before = a.cycles();
        a.poke_tag(0, false);
        a.write(&km).unwrap();
        assert_eq!(a.cycles(), before + 1);
        assert!(!a.peek_bit(1, 3));

        // empty mask on full tag: no bit changes, cycle counted
        a.poke_tag(0, true);
        a.poke_tag(1, true);
        a.write(&KeyMask::new(4)).unwrap();
        assert!(a.peek_bit(0, 3));
        assert!(!a.peek_bit(1, 3));
    }

    #[test]
    fn compare_write_rejects_overlap() {
        let mut a = ap(2, 4);
        let mut cmp = KeyMask::new(4);
        cmp.set_bit(2, true);
        let mut wr = KeyMask::new(4);
        wr.set_bit(2, false);
        assert!(matches!(
            a.compare_write(&cmp, &wr),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn compare_write_matches_sequential_pair() {
        let mut a = ap(4, 6);
        let mut b = ap(4, 6);
        for r in 0..4 {
            a.poke_bits(r, 0, 6, (r * 13 % 64) as i64);
            b.poke_bits(r, 0, 6, (r * 13 % 64) as i64);
        }
        let mut cmp = KeyMask::new(6);
        cmp.set_bit(0, true);
        let mut wr = KeyMask::new(6);
        wr.set_bit(5, true);

        a.compare_write(&cmp, &wr).unwrap();
        b.compare(&cmp).unwrap();
        b.write(&wr).unwrap();

        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(a.peek_bit(r, c), b.peek_bit(r, c));
            }
            assert_eq!(a.peek_tag(r), b.peek_tag(r));
        }
        assert_eq!(a.cycles() + 1, b.cycles());
    }

    #[test]
    fn move_semantics() {
        let mut a = ap(4, 1);
        // tag = rows 2,3
        a.poke_tag(2, true);
        a.poke_tag(3, true);
        a.move_tag(Dir::Up, Step::Short);
        assert_eq!(
            (0..4).map(|r| a.peek_tag(r)).collect::<Vec<_>>(),
            vec![false, true, true, false]
        );

        let mut a = ap(4, 1);
        a.poke_tag(2, true);
        a.poke_tag(3, true);
        a.move_tag(Dir::Down, Step::Short);
        assert_eq!(
            (0..4).map(|r| a.peek_tag(r)).collect::<Vec<_>>(),
            vec![false, false, false, true]
        );

        // shift out at row 0
        let mut a = ap(4, 1);
        a.poke_tag(0, true);
        a.move_tag(Dir::Up, Step::Short);
        assert!((0..4).all(|r| !a.peek_tag(r)));
        assert!(!a.if_match());
    }

    #[test]
    fn long_move_equals_long_step_short_moves() {
        let mut a = ApState::new(40, 1, 16).unwrap();
        let mut b = ApState::new(40, 1, 16).unwrap();
        for r in [0usize, 17, 18, 31, 39] {
            a.poke_tag(r, true);
            b.poke_tag(r, true);
        }
        a.move_tag(Dir::Up, Step::Long);
        for _ in 0..16 {
            b.move_tag(Dir::Up, Step::Short);
        }
        for r in 0..40 {
            assert_eq!(a.peek_tag(r), b.peek_tag(r));
        }
        assert_eq!(a.cycles(), 1);
        assert_eq!(b.cycles(), 16);
    }

    #[test]
    fn read_row_round_trip() {
        let mut a = ap(4, 8);
        a.poke_tag(2, true);
        let mut km = KeyMask::new(8);
        km.set_bits(0, 4, 0b0101);
        a.write(&km).unwrap();
        let row = a.read_row(2).unwrap();
        assert_eq!(row.bits_u64(0, 4), 0b0101);
        let fresh = a.read_row(0).unwrap();
        assert_eq!(fresh.bits_u64(0, 8), 0);
        assert!(a.read_row(4).is_err());
    }

    #[test]
    fn signed_extraction() {
        let mut a = ap(1, 8);
        a.poke_bits(0, 0, 5, -3);
        assert_eq!(a.peek_bits_i64(0, 0, 5), -3);
        assert_eq!(a.peek_bits(0, 0, 5), 0b11101);
        let row = a.read_row(0).unwrap();
        assert_eq!(row.bits_i64(0, 5), -3);
    }

    #[test]
    fn trace_records_every_cycle_and_respects_limit() {
        let mut a = ap(8, 4);
        a.enable_trace(1000);
        a.compare(&KeyMask::new(4)).unwrap();
        let mut wr = KeyMask::new(4);
        wr.set_bit(1, true);
        a.write(&wr).unwrap();
        a.move_tag(Dir::Up, Step::Short);
        a.if_match();
        a.read_row(3).unwrap();
        let trace = a.take_trace();
        assert_eq!(trace.len() as u64, a.cycles());
        assert_eq!(trace[0].kind, InstrKind::Compare);
        assert_eq!(trace[0].tagged, 8);
        assert_eq!(trace[1].kind, InstrKind::Write);
        assert_eq!(trace[1].wr_cols, 1);

        let mut a = ap(8, 4);
        a.enable_trace(2);
        for _ in 0..5 {
            a.if_match();
        }
        assert_eq!(a.take_trace().len(), 2);
        assert_eq!(a.cycles(), 5);
    }

    #[test]
    fn host_write_row_costs_one_cycle() {
        let mut a = ap(4, 8);
        let mut km = KeyMask::new(8);
        km.set_bits(0, 8, 0xA5u8 as i64);
        a.host_write_row(1, &km).unwrap();
        assert_eq!(a.peek_bits(1, 0, 8), 0xA5);
        assert_eq!(a.peek_bits(0, 0, 8), 0);
        assert_eq!(a.cycles(), 1);
        assert!(a.host_write_row(4, &km).is_err());
    }

    proptest! {
        // write idempotence: applying the same key/mask twice is the same
        // grid as applying it once
        #[test]
        fn prop_write_idempotent(seed in 0u64..1000, cols in 1usize..20, rows in 1usize..100) {
            let mut rng = seed;
            let mut next = move || { rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); rng >> 33 };
            let mut a = ApState::new(rows, cols, 2).unwrap();
            for r in 0..rows {
                a.poke_bits(r, 0, cols.min(32), next() as i64);
                a.poke_tag(r, next() % 2 == 0);
            }
            let mut km = KeyMask::new(cols);
            for c in 0..cols {
                if next() % 3 == 0 { km.set_bit(c, next() % 2 == 0); }
            }
            a.write(&km).unwrap();
            let snap: Vec<u64> = (0..rows).map(|r| a.peek_bits(r, 0, cols.min(64))).collect();
            a.write(&km).unwrap();
            let snap2: Vec<u64> = (0..rows).map(|r| a.peek_bits(r, 0, cols.min(64))).collect();
            prop_assert_eq!(snap, snap2);
        }

        // move algebra: s short moves relocate the tag by s with zero fill
        #[test]
        fn prop_move_relocates(rows in 1usize..200, s in 1usize..8, seed in 0u64..1000) {
            let mut rng = seed;
            let mut next = move || { rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); rng >> 33 };
            let mut a = ApState::new(rows, 1, 2).unwrap();
            let tags: Vec<bool> = (0..rows).map(|_| next() % 2 == 0).collect();
            for (r, &t) in tags.iter().enumerate() { a.poke_tag(r, t); }
            for _ in 0..s { a.move_tag(Dir::Up, Step::Short); }
            for r in 0..rows {
                let expect = if r + s < rows { tags[r + s] } else { false };
                prop_assert_eq!(a.peek_tag(r), expect);
            }
            prop_assert_eq!(a.cycles(), s as u64);
        }
    }
}
