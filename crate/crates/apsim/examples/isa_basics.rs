//! The five-instruction CAM core: compare, write, fused compare+write,
//! tag moves, and if_match, with the per-cycle trace.
//!
//! ```bash
//! cargo run --example isa_basics
//! ```

use apsim::ap::{ApState, Dir, KeyMask, Step};

fn show(ap: &ApState, label: &str) {
    print!("{label:24}");
    for row in 0..ap.depth() {
        print!(" {}{}", ap.peek_bits(row, 0, 4), if ap.peek_tag(row) { "*" } else { " " });
    }
    println!("   ({} cycles)", ap.cycles());
}

fn main() -> apsim::Result<()> {
    // 8 PUs of 4 bits each, long tag moves jump 4 rows
    let mut ap = ApState::new(8, 4, 4)?;
    ap.enable_trace(64);
    for row in 0..8 {
        ap.poke_bits(row, 0, 4, row as i64);
    }
    show(&ap, "seeded values");

    // tag every row whose low two bits are 0b10 (values 2 and 6)
    let mut km = KeyMask::new(4);
    km.set_bits(0, 2, 0b10);
    ap.compare(&km)?;
    show(&ap, "compare low bits = 10");
    println!("if_match -> {}", ap.if_match());

    // parallel write: set bit 3 in all tagged rows
    let mut wr = KeyMask::new(4);
    wr.set_bit(3, true);
    ap.write(&wr)?;
    show(&ap, "write bit3 to tagged");

    // fused compare+write does both in a single cycle
    let mut cmp = KeyMask::new(4);
    cmp.set_bits(0, 3, 0b011);
    let mut wr = KeyMask::new(4);
    wr.set_bit(3, true);
    ap.compare_write(&cmp, &wr)?;
    show(&ap, "fused cmp(011)+set bit3");

    // the tag vector shifts like a register file selector
    ap.move_tag(Dir::Up, Step::Short);
    show(&ap, "move up short");
    ap.move_tag(Dir::Down, Step::Long);
    show(&ap, "move down long (4)");

    // empty mask compares match everything: the tag-all idiom
    ap.compare(&KeyMask::new(4))?;
    show(&ap, "tag-all");

    let row = ap.read_row(6)?;
    println!("read_row(6) -> {:04b}", row.bits_u64(0, 4));

    println!("\ninstruction trace:");
    for r in ap.take_trace() {
        println!(
            "  #{:<3} {:13} cmp_cols={} wr_cols={} tagged={}/{}",
            r.seq,
            format!("{:?}", r.kind),
            r.cmp_cols,
            r.wr_cols,
            r.tagged,
            r.rows
        );
    }
    Ok(())
}
