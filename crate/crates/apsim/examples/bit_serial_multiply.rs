//! Bit-serial multiplication by perfect induction: every PU multiplies its
//! own operand pair simultaneously, in a cycle count that depends only on
//! the wordlengths.
//!
//! ```bash
//! cargo run --example bit_serial_multiply
//! ```

use apsim::ap::ApState;
use apsim::microcode::{multiply_cycles, multiply_fields, FieldRef, MulOperands};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> apsim::Result<()> {
    let (m, n) = (8usize, 8usize);
    let k = m + n;
    let w = FieldRef::new(0, m);
    let b = FieldRef::new(m, n);
    let c = FieldRef::new(m + n, k);
    let t = FieldRef::new(m + n + k, 2);
    let ops = MulOperands::default(); // signed weights, unsigned activations

    let depth = 1000;
    let mut ap = ApState::new(depth, m + n + k + 2, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<(i64, i64)> = (0..depth)
        .map(|_| (rng.gen_range(-128..128), rng.gen_range(0..256)))
        .collect();
    for (row, &(wv, bv)) in pairs.iter().enumerate() {
        ap.poke_bits(row, w.base, m, wv);
        ap.poke_bits(row, b.base, n, bv);
    }

    let before = ap.cycles();
    multiply_fields(&mut ap, &c, &w, &b, &t, ops)?;
    let cycles = ap.cycles() - before;
    println!(
        "{} simultaneous {}x{}-bit products in {} cycles (formula: {})",
        depth,
        m,
        n,
        cycles,
        multiply_cycles(m, n, k, ops)
    );

    let mut bad = 0;
    for (row, &(wv, bv)) in pairs.iter().enumerate() {
        if ap.peek_bits_i64(row, c.base, k) != wv * bv {
            bad += 1;
        }
    }
    println!("host check: {} mismatches", bad);
    for (row, &(wv, bv)) in pairs.iter().take(5).enumerate() {
        println!("  PU {row}: {wv} * {bv} = {}", ap.peek_bits_i64(row, c.base, k));
    }

    // the quadratic wordlength law
    println!("\ncycles by wordlength (m = n, k = 2n):");
    for bits in [4usize, 8, 16, 32] {
        println!("  {:2} bits -> {} cycles", bits, multiply_cycles(bits, bits, 2 * bits, ops));
    }
    Ok(())
}
