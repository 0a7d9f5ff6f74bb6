//! Fuse three hand-built proposals and print the weighted attention under
//! each fusion variant. The low-confidence third proposal gets damped
//! columns; scaling pins each row maximum at T, clamping only caps it.

use anyhow::Result;
use lat::numerics::Matrix;
use lat::sff::{fuse, variants, SffConfig, SffParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let roi = Matrix::new(3, 4, vec![1.0, 0.2, 0.0, 0.5, 0.9, 0.1, 0.1, 0.4, 0.0, 1.0, 0.8, 0.0])?;
    // score vectors over 4 classes plus background
    let scores = Matrix::new(
        3,
        5,
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.9, 0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0],
    )?;
    let s_c = [1.0, 0.9, 0.3];
    let base = SffConfig { dim: 4, ..SffConfig::default() };
    for cfg in variants(&base) {
        let params = SffParams::init(4, 5, 3, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        let (_, trace) = fuse(&roi, &scores, &s_c, &params)?;
        println!("{}\n{trace}", cfg.variant_name());
    }
    Ok(())
}
