//! The associative CSR format: row pointers replaced by two-bit flags so
//! every nonzero carries its own block structure, one CAM row per nonzero.
//!
//! ```bash
//! cargo run --example acsr_format
//! ```

use apsim::acsr::{
    build_field_map, decode_image, encode_acsr, load_image, validate_flags, SparseMatrix,
};
use apsim::ap::ApState;

fn main() -> apsim::Result<()> {
    // [[0, 2, 0],
    //  [1, 0, 3],
    //  [0, 0, 0],
    //  [4, 5, 6]]
    let matrix = SparseMatrix::new(
        4,
        3,
        vec![(0, 1, 2), (1, 0, 1), (1, 2, 3), (3, 0, 4), (3, 1, 5), (3, 2, 6)],
        8,
        0,
    )?;
    let image = encode_acsr(&matrix)?;

    println!("matrix {}x{}, nnz = {} (CAM depth = nnz)", matrix.n_rows, matrix.n_cols, image.nnz());
    println!("{:>4} {:>6} {:>4} {:>5}", "PU", "value", "col", "flag");
    for pu in 0..image.nnz() {
        println!(
            "{:>4} {:>6} {:>4} {:>5}",
            pu, image.values[pu], image.col_index[pu], image.row_flag[pu]
        );
    }
    println!("block starts {:?} for original rows {:?}", image.block_starts, image.row_ids);
    println!("(the empty matrix row 2 is simply absent)");

    validate_flags(&image.row_flag)?;
    println!("flag grammar: ok");

    // load into a CAM and read it back bit-exactly
    let fmap = build_field_map(matrix.n_cols, 8, 8, image.max_block_len(), None)?;
    println!(
        "field map: flags@{} pristine@{} col@{} W@{} B@{} C@{} T@{}, width {}",
        fmap.row_flag.base,
        fmap.pristine_flag.base,
        fmap.col_index.base,
        fmap.w.base,
        fmap.b.base,
        fmap.c.base,
        fmap.t.base,
        fmap.width()
    );
    let mut ap = ApState::new(image.nnz(), fmap.width(), 16)?;
    load_image(&mut ap, &image, &fmap)?;
    println!("loaded in {} cycles (one host write per PU)", ap.cycles());

    let decoded = decode_image(&mut ap, &fmap, &image)?;
    println!("decode(load(encode(M))) == M: {}", decoded == matrix);
    Ok(())
}
