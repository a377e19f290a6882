//! Associative CSR (ACSR) sparse weight format.
//!
//! Like CSR, the matrix is flattened to a value vector and a column-index
//! vector over the nonzeros, one nonzero per CAM row (PU). The row-pointer
//! array is replaced by a two-bit row flag stored alongside each element:
//! `01` marks the first PU of a matrix row, `00` a middle one, `10` the
//! last, and a one-element row is `11`. The CAM depth is therefore exactly
//! the matrix nnz.
//!
//! Soft reduction mutates the flag MSBs, so a pristine copy of the flags is
//! kept in a second field and restored associatively between runs.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::ap::{ApState, KeyMask};
use crate::error::{Error, Result};
use crate::microcode::FieldRef;

/// A sparse integer matrix with declared weight wordlength and fixed-point
/// scale. Entries are unique (row, col) pairs; values must fit the
/// wordlength in two's complement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    /// (row, col, value), sorted by (row, col)
    pub entries: Vec<(u32, u32, i64)>,
    pub wbits: u32,
    pub frac_bits: u32,
}

impl SparseMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        mut entries: Vec<(u32, u32, i64)>,
        wbits: u32,
        frac_bits: u32,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Config("matrix dimensions must be positive".to_string()));
        }
        if wbits == 0 || wbits > 32 {
            return Err(Error::Config(format!(
                "weight wordlength {} outside supported range 1..=32",
                wbits
            )));
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(Error::Config(format!(
                    "duplicate entry at ({}, {})",
                    pair[0].0, pair[0].1
                )));
            }
        }
        let (lo, hi) = signed_range(wbits);
        for &(r, c, v) in &entries {
            if r as usize >= n_rows || c as usize >= n_cols {
                return Err(Error::Config(format!(
                    "entry ({}, {}) outside a {}x{} matrix",
                    r, c, n_rows, n_cols
                )));
            }
            if v < lo || v > hi {
                return Err(Error::Quantization {
                    row: r as usize,
                    col: c as usize,
                    value: v,
                    bits: wbits,
                });
            }
        }
        Ok(SparseMatrix {
            n_rows,
            n_cols,
            entries,
            wbits,
            frac_bits,
        })
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

fn signed_range(bits: u32) -> (i64, i64) {
    (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
}

/// Two-bit per-PU row flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowFlag {
    /// `01`: first element of a multi-element row.
    Start,
    /// `00`: middle element.
    Mid,
    /// `10`: last element.
    End,
    /// `11`: the only element of its row.
    Single,
}

impl RowFlag {
    /// Flag bits with the MSB at bit 1.
    pub fn bits(self) -> u8 {
        match self {
            RowFlag::Start => 0b01,
            RowFlag::Mid => 0b00,
            RowFlag::End => 0b10,
            RowFlag::Single => 0b11,
        }
    }

    pub fn from_bits(bits: u8) -> Self {
        match bits & 0b11 {
            0b01 => RowFlag::Start,
            0b00 => RowFlag::Mid,
            0b10 => RowFlag::End,
            _ => RowFlag::Single,
        }
    }

    /// The reduction gate/termination bit.
    pub fn msb(self) -> bool {
        self.bits() & 0b10 != 0
    }
}

impl fmt::Display for RowFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02b}", self.bits())
    }
}

/// A sparse matrix encoded for the CAM: value/col-index vectors identical
/// to CSR plus the per-element row flags, with host-side bookkeeping of
/// where each stored row's block starts and which original row it was.
/// Rows without nonzeros are simply absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcsrImage {
    pub values: Vec<i64>,
    pub col_index: Vec<u32>,
    pub row_flag: Vec<RowFlag>,
    /// PU index of each stored row's first element.
    pub block_starts: Vec<usize>,
    /// Original matrix row index of each stored row.
    pub row_ids: Vec<u32>,
    pub n_rows: usize,
    pub n_cols: usize,
    pub wbits: u32,
    pub frac_bits: u32,
}

impl AcsrImage {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn block_count(&self) -> usize {
        self.block_starts.len()
    }

    pub fn block_len(&self, block: usize) -> usize {
        let start = self.block_starts[block];
        let end = self
            .block_starts
            .get(block + 1)
            .copied()
            .unwrap_or(self.values.len());
        end - start
    }

    pub fn max_block_len(&self) -> usize {
        (0..self.block_count()).map(|b| self.block_len(b)).max().unwrap_or(0)
    }
}

/// Encodes a matrix into ACSR form. Entries of one row occupy consecutive
/// PUs in ascending column order; flags follow directly from block shape.
pub fn encode_acsr(m: &SparseMatrix) -> Result<AcsrImage> {
    let mut image = AcsrImage {
        values: Vec::with_capacity(m.nnz()),
        col_index: Vec::with_capacity(m.nnz()),
        row_flag: Vec::with_capacity(m.nnz()),
        block_starts: Vec::new(),
        row_ids: Vec::new(),
        n_rows: m.n_rows,
        n_cols: m.n_cols,
        wbits: m.wbits,
        frac_bits: m.frac_bits,
    };
    let mut i = 0;
    while i < m.entries.len() {
        let row = m.entries[i].0;
        let mut j = i;
        while j < m.entries.len() && m.entries[j].0 == row {
            j += 1;
        }
        image.block_starts.push(image.values.len());
        image.row_ids.push(row);
        let len = j - i;
        for (off, &(_, col, val)) in m.entries[i..j].iter().enumerate() {
            image.values.push(val);
            image.col_index.push(col);
            image.row_flag.push(if len == 1 {
                RowFlag::Single
            } else if off == 0 {
                RowFlag::Start
            } else if off == len - 1 {
                RowFlag::End
            } else {
                RowFlag::Mid
            });
        }
        i = j;
    }
    debug_assert!(validate_flags(&image.row_flag).is_ok());
    Ok(image)
}

/// Checks a flag vector against the block grammar: each block is either
/// `01 00* 10` or a single `11`, and blocks tile the vector exactly.
/// Reports the first violating PU with the expected and actual flags.
pub fn validate_flags(flags: &[RowFlag]) -> Result<()> {
    let mut in_block = false;
    for (pu, &f) in flags.iter().enumerate() {
        let ok = if in_block {
            matches!(f, RowFlag::Mid | RowFlag::End)
        } else {
            matches!(f, RowFlag::Start | RowFlag::Single)
        };
        if !ok {
            return Err(Error::FlagViolation {
                pu,
                expected: if in_block {
                    "00 or 10".to_string()
                } else {
                    "01 or 11".to_string()
                },
                actual: f.to_string(),
            });
        }
        in_block = match f {
            RowFlag::Start | RowFlag::Mid => true,
            RowFlag::End | RowFlag::Single => false,
        };
    }
    if in_block {
        return Err(Error::FlagViolation {
            pu: flags.len(),
            expected: "10 before end of image".to_string(),
            actual: "end of image".to_string(),
        });
    }
    Ok(())
}

/// Named bit-column layout of one PU word.
///
/// `t` is scratch: bits 0..2 are the multiplier's product and carry
/// columns, the rest is the reduction staging area (an accumulator-wide
/// copy buffer plus one staged flag-MSB bit).
#[derive(Clone, Copy, Debug)]
pub struct FieldMap {
    pub row_flag: FieldRef,
    pub pristine_flag: FieldRef,
    pub col_index: FieldRef,
    pub w: FieldRef,
    pub b: FieldRef,
    pub c: FieldRef,
    pub t: FieldRef,
    width: usize,
}

impl FieldMap {
    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-flag MSB: the reduction gate bit.
    pub fn flag_msb(&self) -> crate::microcode::BitRef {
        self.row_flag.msb()
    }

    pub fn c_sign(&self) -> crate::microcode::BitRef {
        self.c.msb()
    }

    /// Multiplier scratch: product bit.
    pub fn t_product(&self) -> crate::microcode::BitRef {
        self.t.bit(0)
    }

    /// Shared scratch carry/borrow column.
    pub fn t_carry(&self) -> crate::microcode::BitRef {
        self.t.bit(1)
    }

    /// Reduction staging copy of the accumulator.
    pub fn t_stage(&self) -> FieldRef {
        FieldRef::new(self.t.base + 2, self.c.len)
    }

    /// Staged incoming flag MSB.
    pub fn t_stage_msb(&self) -> crate::microcode::BitRef {
        self.t.bit(2 + self.c.len)
    }

    /// Staging area plus staged MSB as one clearable run.
    pub fn t_stage_all(&self) -> FieldRef {
        FieldRef::new(self.t.base + 2, self.c.len + 1)
    }
}

pub fn ceil_log2(x: usize) -> u32 {
    if x <= 1 {
        0
    } else {
        x.next_power_of_two().trailing_zeros()
    }
}

/// Minimum accumulator wordlength for which no block dot-product sum can
/// overflow: full product width plus room to sum `max_block_len` terms.
pub fn min_accumulator_bits(m: u32, n: u32, max_block_len: usize) -> u32 {
    m + n + ceil_log2(max_block_len.max(1)) + 1
}

/// Builds the PU field layout for a layer: weight wordlength `m`,
/// activation wordlength `n`, and enough accumulator bits for blocks up to
/// `max_block_len`. An explicit `k` may only widen the accumulator.
pub fn build_field_map(
    n_cols: usize,
    m: u32,
    n: u32,
    max_block_len: usize,
    k_override: Option<u32>,
) -> Result<FieldMap> {
    if n_cols == 0 || m == 0 || n == 0 {
        return Err(Error::FieldMap("all field widths must be positive".to_string()));
    }
    let k_min = min_accumulator_bits(m, n, max_block_len);
    let k = match k_override {
        Some(k) if k < k_min => {
            return Err(Error::FieldMap(format!(
                "k override {} below the safe minimum {}",
                k, k_min
            )));
        }
        Some(k) => k,
        None => k_min,
    };
    let idx_bits = ceil_log2(n_cols).max(1);
    let mut base = 0;
    let mut take = |len: u32| {
        let f = FieldRef::new(base, len as usize);
        base += len as usize;
        f
    };
    let row_flag = take(2);
    let pristine_flag = take(2);
    let col_index = take(idx_bits);
    let w = take(m);
    let b = take(n);
    let c = take(k);
    let t = take(2 + k + 1);
    Ok(FieldMap {
        row_flag,
        pristine_flag,
        col_index,
        w,
        b,
        c,
        t,
        width: base,
    })
}

/// Loads an image into the CAM: per PU one host write covering the whole
/// word, filling flags (both copies), column index and weight, and zeroing
/// B, C, and scratch. One write cycle per PU.
pub fn load_image(ap: &mut ApState, image: &AcsrImage, fmap: &FieldMap) -> Result<()> {
    if ap.depth() < image.nnz() {
        return Err(Error::Contract(format!(
            "image of {} PUs does not fit array depth {}",
            image.nnz(),
            ap.depth()
        )));
    }
    if ap.width() < fmap.width() {
        return Err(Error::Contract(format!(
            "field map of width {} does not fit array width {}",
            fmap.width(),
            ap.width()
        )));
    }
    if image
        .col_index
        .iter()
        .any(|&c| fmap.col_index.len < 64 && (c as u64) >= (1u64 << fmap.col_index.len))
    {
        return Err(Error::Contract(
            "column index does not fit its field".to_string(),
        ));
    }
    for pu in 0..image.nnz() {
        let mut km = KeyMask::new(ap.width());
        km.set_bits(0, fmap.width(), 0);
        let flag = image.row_flag[pu].bits() as i64;
        km.set_bits(fmap.row_flag.base, 2, flag);
        km.set_bits(fmap.pristine_flag.base, 2, flag);
        km.set_bits(fmap.col_index.base, fmap.col_index.len, image.col_index[pu] as i64);
        km.set_bits(fmap.w.base, fmap.w.len, image.values[pu]);
        ap.host_write_row(pu, &km)?;
    }
    Ok(())
}

/// Reads the matrix back from the CAM using the host bookkeeping. One read
/// cycle per PU. Flags are validated against the block grammar on the way.
pub fn decode_image(ap: &mut ApState, fmap: &FieldMap, image: &AcsrImage) -> Result<SparseMatrix> {
    let mut entries = Vec::with_capacity(image.nnz());
    let mut flags = Vec::with_capacity(image.nnz());
    for block in 0..image.block_count() {
        let row = image.row_ids[block];
        let start = image.block_starts[block];
        for pu in start..start + image.block_len(block) {
            let bits = ap.read_row(pu)?;
            flags.push(RowFlag::from_bits(
                bits.bits_u64(fmap.row_flag.base, 2) as u8
            ));
            let col = bits.bits_u64(fmap.col_index.base, fmap.col_index.len) as u32;
            let val = bits.bits_i64(fmap.w.base, fmap.w.len);
            entries.push((row, col, val));
        }
    }
    validate_flags(&flags)?;
    SparseMatrix::new(image.n_rows, image.n_cols, entries, image.wbits, image.frac_bits)
}

/// Fixed-point quantization: round-half-even of `value * 2^frac`, saturated
/// to the signed range of `bits`.
pub fn quantize(value: f64, frac_bits: u32, bits: u32) -> i64 {
    let scaled = value * (1u64 << frac_bits) as f64;
    // round half to even
    let rounded = {
        let floor = scaled.floor();
        let diff = scaled - floor;
        if diff > 0.5 {
            floor + 1.0
        } else if diff < 0.5 {
            floor
        } else if (floor as i64) % 2 == 0 {
            floor
        } else {
            floor + 1.0
        }
    };
    let (lo, hi) = signed_range(bits);
    (rounded as i64).clamp(lo, hi)
}

/// Reads a Matrix Market coordinate file into a `SparseMatrix`.
///
/// Real values are quantized with `quantize`; integer files are taken
/// verbatim (out-of-range integers are an error, not saturated). Symmetric
/// files are mirrored. Entries that quantize to zero are dropped, since
/// ACSR stores nonzeros only.
pub fn read_matrix_market(path: &Path, wbits: u32, frac_bits: u32) -> Result<SparseMatrix> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot read weights file {}: {}", path.display(), e)))?;
    let mut lines = BufReader::new(file).lines();
    let context = |msg: &str| Error::Config(format!("{}: {}", path.display(), msg));

    let header = lines
        .next()
        .ok_or_else(|| context("empty file"))?
        .map_err(Error::Io)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 5 || fields[0] != "%%MatrixMarket" || fields[1] != "matrix" {
        return Err(context("missing %%MatrixMarket matrix header"));
    }
    if fields[2] != "coordinate" {
        return Err(context("only coordinate format is supported"));
    }
    let integer = match fields[3] {
        "real" => false,
        "integer" => true,
        other => return Err(context(&format!("unsupported value type {:?}", other))),
    };
    let symmetric = match fields[4] {
        "general" => false,
        "symmetric" => true,
        other => return Err(context(&format!("unsupported symmetry {:?}", other))),
    };

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut entries: Vec<(u32, u32, i64)> = Vec::new();
    for line in lines {
        let line = line.map_err(Error::Io)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let mut it = line.split_whitespace();
        if dims.is_none() {
            let r = parse_num::<usize>(it.next(), path)?;
            let c = parse_num::<usize>(it.next(), path)?;
            let nnz = parse_num::<usize>(it.next(), path)?;
            dims = Some((r, c, nnz));
            continue;
        }
        let r = parse_num::<usize>(it.next(), path)?;
        let c = parse_num::<usize>(it.next(), path)?;
        let (rows, cols, _) = dims.unwrap();
        if r < 1 || r > rows || c < 1 || c > cols {
            return Err(context(&format!("index ({}, {}) out of bounds", r, c)));
        }
        let v = if integer {
            parse_num::<i64>(it.next(), path)?
        } else {
            quantize(parse_num::<f64>(it.next(), path)?, frac_bits, wbits)
        };
        if v != 0 {
            entries.push((r as u32 - 1, c as u32 - 1, v));
            if symmetric && r != c {
                entries.push((c as u32 - 1, r as u32 - 1, v));
            }
        }
    }
    let (rows, cols, nnz_declared) = dims.ok_or_else(|| context("missing size line"))?;
    if !symmetric && entries.len() > nnz_declared {
        return Err(context("more entries than declared"));
    }
    SparseMatrix::new(rows, cols, entries, wbits, frac_bits)
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, path: &Path) -> Result<T> {
    tok.ok_or_else(|| Error::Config(format!("{}: truncated line", path.display())))?
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{}: malformed number", path.display())))
}
