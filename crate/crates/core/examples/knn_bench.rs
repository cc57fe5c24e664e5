//! Times batched k-NN scoring on random Gaussian data.
//!
//! `cargo run --release -p mlod --example knn_bench -- [points] [queries] [dim] [k]`

use std::time::Instant;

use mlod::knn::KnnIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let n = args.first().copied().unwrap_or(100_000);
    let q = args.get(1).copied().unwrap_or(2_000);
    let dim = args.get(2).copied().unwrap_or(64);
    let k = args.get(3).copied().unwrap_or(50);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let queries: Vec<f32> = (0..q * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let index = KnnIndex::build(&data, dim, false).expect("index");
    let start = Instant::now();
    let d = index.kth_distances(&queries, k).expect("distances");
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{n} points, {q} queries, d={dim}, k={k}: {:.0} queries/s ({} threads), mean distance {:.4}",
        q as f64 / secs,
        rayon::current_num_threads(),
        d.iter().sum::<f64>() / q as f64
    );
}
