//! Ad-hoc timing harness for the transportation solver at compare-scale
//! instances: `cargo run --release -p leam-core --example emd_bench [side]`.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use leam_core::mapsim::{emd, normalize_distribution};
use leam_core::tensor::Tensor;

fn main() {
    let side: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(32);
    let mut rng = Xoshiro256StarStar::seed_from_u64(1);
    let p = normalize_distribution(&Tensor::from_fn(vec![side, side], |_| {
        rng.gen_range(0.01..1.0)
    }))
    .unwrap();
    let q = normalize_distribution(&Tensor::from_fn(vec![side, side], |_| {
        rng.gen_range(0.01..1.0)
    }))
    .unwrap();
    let start = std::time::Instant::now();
    let value = emd(&p, &q).unwrap();
    println!(
        "side {side} ({} cells/side): emd = {value:.6} in {:?}",
        side * side,
        start.elapsed()
    );
}
