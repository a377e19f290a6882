//! Bit-parallel multiplication for weight-shared networks: when only a few
//! distinct operand values occur, one compare+write per (w, b) combination
//! beats bit-serial arithmetic, at a cost independent of wordlength.
//!
//! ```bash
//! cargo run --example lut_multiply
//! ```

use apsim::ap::ApState;
use apsim::microcode::{
    lut_multiply, multiply_cycles, multiply_fields, verify_lut_coverage, FieldRef, MulOperands,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> apsim::Result<()> {
    let ops = MulOperands::default();
    // 16 shared weight values x 16 activation values
    let wvals: Vec<i64> = (-8..8).collect();
    let bvals: Vec<i64> = (0..16).collect();
    let table: Vec<(i64, i64, i64)> = wvals
        .iter()
        .flat_map(|&w| bvals.iter().map(move |&b| (w, b, w * b)))
        .collect();

    for bits in [8usize, 16] {
        let (m, n) = (bits, bits);
        let k = m + n;
        let w = FieldRef::new(0, m);
        let b = FieldRef::new(m, n);
        let c = FieldRef::new(m + n, k);
        let t = FieldRef::new(m + n + k, 2);

        let depth = 4096;
        let mut lut_ap = ApState::new(depth, m + n + k + 2, 16)?;
        let mut ser_ap = ApState::new(depth, m + n + k + 2, 16)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for row in 0..depth {
            let wv = wvals[rng.gen_range(0..wvals.len())];
            let bv = bvals[rng.gen_range(0..bvals.len())];
            for ap in [&mut lut_ap, &mut ser_ap] {
                ap.poke_bits(row, w.base, m, wv);
                ap.poke_bits(row, b.base, n, bv);
            }
        }
        verify_lut_coverage(&lut_ap, &w, &b, &table, ops)?;

        let before = lut_ap.cycles();
        lut_multiply(&mut lut_ap, &c, &w, &b, &table, ops)?;
        let lut_cycles = lut_ap.cycles() - before;
        multiply_fields(&mut ser_ap, &c, &w, &b, &t, ops)?;

        let agree = (0..depth).all(|row| {
            lut_ap.peek_bits(row, c.base, k) == ser_ap.peek_bits(row, c.base, k)
        });
        println!(
            "m=n={:2}: table multiply {} cycles vs bit-serial {} cycles, results agree: {}",
            bits,
            lut_cycles,
            multiply_cycles(m, n, k, ops),
            agree
        );
    }
    println!("table cost is |table| cycles regardless of operand width");
    Ok(())
}
