//! Acceptance suite: one PASS/FAIL line per criterion A1–A7.
//!
//! Run with `cargo test -p mlod --test acceptance`. Exits nonzero if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use mlod::calibrator::CalibrationTable;
use mlod::combiner::{CombineMethod, Combiner, CombinerConfig};
use mlod::evaluator::{self, EvalConfig};
use mlod::knn::KnnIndex;
use mlod::scorers::{ScorerAssignment, ScorerConfig};
use mlod::statfn;
use mlod::synthgen::{self, Scenario};
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

struct Outcome {
    id: &'static str,
    pass: bool,
    summary: String,
    notes: Vec<String>,
}

impl Outcome {
    fn new(id: &'static str, pass: bool, summary: String) -> Self {
        Self {
            id,
            pass,
            summary,
            notes: Vec::new(),
        }
    }

    fn note(mut self, note: String) -> Self {
        self.notes.push(note);
        self
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn combiners(method: CombineMethod, alpha: f64, max_m: usize) -> Vec<Combiner> {
    (1..=max_m)
        .map(|m| Combiner::new(CombinerConfig::new(method, alpha), m).unwrap())
        .collect()
}

fn oracle(method: CombineMethod, p: &[f64], alpha: f64) -> bool {
    match method {
        CombineMethod::Bh => common::bh(p, alpha),
        CombineMethod::Adabh => common::adabh(p, alpha).0,
        CombineMethod::By => common::by(p, alpha),
        CombineMethod::Fisher => common::fisher(p, alpha),
        CombineMethod::Cauchy => common::cauchy(p, alpha),
        CombineMethod::NaiveAnd => common::naive_and(p, alpha),
        CombineMethod::LastLayer => common::last_layer(p, alpha),
    }
}

fn a1_oracle_equivalence() -> Outcome {
    const N: usize = 100_000;
    const MAX_M: usize = 32;
    let alphas = [0.01, 0.05, 0.1];
    let start = Instant::now();
    let table: Vec<Vec<Vec<Combiner>>> = CombineMethod::ALL
        .iter()
        .map(|&method| alphas.iter().map(|&a| combiners(method, a, MAX_M)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let mut mismatches = 0usize;
    let mut ood_decisions = 0usize;
    let mut first_mismatch = None;
    for _ in 0..N {
        let m = rng.gen_range(1..=MAX_M);
        let gamma: f64 = if rng.gen_bool(0.5) {
            1.0
        } else {
            rng.gen_range(1.0..8.0)
        };
        let p: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Open01).powf(gamma)).collect();
        for (mi, &method) in CombineMethod::ALL.iter().enumerate() {
            for (ai, &alpha) in alphas.iter().enumerate() {
                let got = table[mi][ai][m - 1].decide(&p).unwrap().is_ood();
                let want = oracle(method, &p, alpha);
                ood_decisions += got as usize;
                if got != want {
                    mismatches += 1;
                    first_mismatch.get_or_insert((method, alpha, p.clone()));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let total = N * alphas.len() * CombineMethod::ALL.len();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(30);
    let mut out = Outcome::new(
        "A1",
        pass,
        format!(
            "combiner oracle equivalence: {N} p-vectors, m in 1..={MAX_M}, alpha in {alphas:?}, 7 methods; \
             {mismatches}/{total} mismatches, {:.1}% OOD decisions, {:.1}s (limit 30s)",
            100.0 * ood_decisions as f64 / total as f64,
            secs(elapsed)
        ),
    );
    if let Some((method, alpha, p)) = first_mismatch {
        out = out.note(format!("first mismatch: {method} alpha={alpha} p={p:?}"));
    }
    out
}

fn a2_level_control() -> Outcome {
    const TRIALS: usize = 1_000_000;
    const M: usize = 12;
    const CHUNK: usize = 10_000;
    let alpha = 0.05;
    let start = Instant::now();
    let methods = [
        CombineMethod::Fisher,
        CombineMethod::Cauchy,
        CombineMethod::Bh,
        CombineMethod::NaiveAnd,
    ];
    let cs: Vec<Combiner> = methods
        .iter()
        .map(|&m| Combiner::new(CombinerConfig::new(m, alpha), M).unwrap())
        .collect();
    let counts = (0..TRIALS / CHUNK)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
            rng.set_stream(chunk as u64);
            let mut counts = [0usize; 4];
            let mut p = [0.0f64; M];
            for _ in 0..CHUNK {
                for v in p.iter_mut() {
                    *v = rng.sample(Open01);
                }
                for (c, count) in cs.iter().zip(counts.iter_mut()) {
                    *count += c.decide(&p).unwrap().is_ood() as usize;
                }
            }
            counts
        })
        .reduce(|| [0; 4], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]);
    let elapsed = start.elapsed();
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / TRIALS as f64).collect();
    let naive_target = 1.0 - 0.95f64.powi(M as i32);
    let level_ok = rates[..3].iter().all(|r| (r - alpha).abs() <= 0.002);
    let naive_ok = (rates[3] - naive_target).abs() <= 0.003;
    let pass = level_ok && naive_ok && elapsed < Duration::from_secs(60);
    Outcome::new(
        "A2",
        pass,
        format!(
            "level control, m={M}, {TRIALS} null trials: fisher {:.4}, cauchy {:.4}, bh {:.4} (target 0.05 +/- 0.002); \
             naive_and {:.4} (target {naive_target:.4} +/- 0.003); {:.1}s (limit 60s)",
            rates[0],
            rates[1],
            rates[2],
            rates[3],
            secs(elapsed)
        ),
    )
}

fn a3_fusion_power() -> Outcome {
    let start = Instant::now();
    let spec = Scenario::EarlyShift.spec();
    let pack = synthgen::generate(&spec).unwrap();
    let scorer = ScorerConfig::knn(50).with_normalize(false);
    let config = EvalConfig::new(
        ScorerAssignment::uniform_features(scorer),
        [CombineMethod::Fisher, CombineMethod::Cauchy, CombineMethod::LastLayer]
            .iter()
            .map(|&m| CombinerConfig::new(m, 0.05))
            .collect(),
    );
    let report = evaluator::evaluate(&pack, &config).unwrap();
    let elapsed = start.elapsed();
    let get = |m| report.method(m).unwrap().average;
    let (fisher, cauchy, last) = (
        get(CombineMethod::Fisher),
        get(CombineMethod::Cauchy),
        get(CombineMethod::LastLayer),
    );
    let fpr_gain = last.fpr95 - fisher.fpr95;
    let auc_gain = cauchy.auroc - last.auroc;
    let pass = fpr_gain >= 0.20 && auc_gain >= 0.10 && elapsed < Duration::from_secs(300);
    Outcome::new(
        "A3",
        pass,
        format!(
            "fusion power on early_shift (m=4, d={}, mu=4, k-NN k=50): FPR95 fisher {:.4} vs last {:.4} \
             (gain {:.1} pp, need >= 20); AUROC cauchy {:.4} vs last {:.4} (gain {:.3}, need >= 0.10); {:.1}s (limit 300s)",
            spec.dims[0],
            fisher.fpr95,
            last.fpr95,
            100.0 * fpr_gain,
            cauchy.auroc,
            last.auroc,
            auc_gain,
            secs(elapsed)
        ),
    )
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Two-sample KS p-value with the usual effective-size correction.
fn ks_two_sample_p(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    statfn::kolmogorov_sf((ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d)
}

fn a4_uniformity() -> Outcome {
    const TRIALS: u64 = 200;
    const N: usize = 5000;
    let start = Instant::now();
    let results: Vec<(bool, bool)> = (0..TRIALS)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
            rng.set_stream(trial);
            let cal = normals(&mut rng, N);
            let test = normals(&mut rng, N);
            let table = CalibrationTable::fit(&cal).unwrap();
            let p: Vec<f64> = test.iter().map(|&s| table.p_value(s)).collect();
            let one_sample = statfn::ks_uniform(&p).unwrap().p_value >= 0.01;
            let two_sample = ks_two_sample_p(&test, &cal) >= 0.01;
            (one_sample, two_sample)
        })
        .collect();
    let elapsed = start.elapsed();
    let rate = results.iter().filter(|r| r.0).count() as f64 / TRIALS as f64;
    let two_rate = results.iter().filter(|r| r.1).count() as f64 / TRIALS as f64;
    let pass = rate >= 0.95 && elapsed < Duration::from_secs(120);
    Outcome::new(
        "A4",
        pass,
        format!(
            "p-value uniformity: one-sample KS vs U(0,1) at 0.01 passes in {:.1}% of {TRIALS} trials \
             (n_cal = n_test = {N}; need >= 95%); {:.1}s (limit 120s)",
            100.0 * rate,
            secs(elapsed)
        ),
    )
    .note(format!(
        "the {N} test p-values share one calibration set, so they are exchangeable but not \
         independent, and the one-sample KS null is too narrow by a factor sqrt(2) in the statistic"
    ))
    .note(format!(
        "two-sample KS of test vs calibration scores (same data, dependence accounted for) \
         passes in {:.1}% of trials",
        100.0 * two_rate
    ))
}

fn a5_special_functions() -> Outcome {
    let q95 = statfn::chi2_quantile(0.95, 2).unwrap();
    let closed_ok = (q95 - 5.991465).abs() <= 1e-6;
    let mut worst = 0.0f64;
    let mut worst_at = (0.0, 0);
    for df in (2..=200u64).step_by(2) {
        for i in 1..=99 {
            let q = i as f64 / 100.0;
            let x = statfn::chi2_quantile(q, df).unwrap();
            let err = (statfn::chi2_cdf_even(x, df).unwrap() - q).abs();
            if err > worst {
                worst = err;
                worst_at = (q, df);
            }
        }
    }
    let identity_ok = worst <= 1e-10;
    let c95 = statfn::cauchy_quantile(0.95).unwrap();
    let cauchy_ok = (c95 - 6.313752).abs() <= 1e-6;
    Outcome::new(
        "A5",
        closed_ok && identity_ok && cauchy_ok,
        format!(
            "special functions: chi2_quantile(0.95, 2) = {q95:.9} (want 5.991465 +/- 1e-6); \
             max |cdf(quantile(q)) - q| = {worst:.2e} at q={}, df={} over q in 0.01..0.99, even df 2..200 (limit 1e-10); \
             cauchy_quantile(0.95) = {c95:.9} (want 6.313752 +/- 1e-6)",
            worst_at.0, worst_at.1
        ),
    )
}

/// k-th smallest Euclidean distance for every query, from sequential f64
/// sums over all points. Points are laid out in transposed blocks so several
/// independent sums run side by side; each sum still adds coordinates in order.
fn brute_kth(data: &[f32], queries: &[f32], dim: usize, k: usize) -> Vec<f64> {
    const B: usize = 8;
    const TILE: usize = 32;
    let n = data.len() / dim;
    let nb = n.div_ceil(B);
    let mut blocks = vec![0.0f64; nb * dim * B];
    for p in 0..n {
        for c in 0..dim {
            blocks[(p / B) * dim * B + c * B + p % B] = data[p * dim + c] as f64;
        }
    }
    let q64: Vec<f64> = queries.iter().map(|&v| v as f64).collect();
    q64.par_chunks(TILE * dim)
        .flat_map_iter(|tile| {
            let nq = tile.len() / dim;
            let mut dists = vec![vec![0.0f64; nb * B]; nq];
            for b in 0..nb {
                let block = &blocks[b * dim * B..(b + 1) * dim * B];
                for (qi, q) in tile.chunks_exact(dim).enumerate() {
                    let mut s = [0.0f64; B];
                    for c in 0..dim {
                        let qc = q[c];
                        for j in 0..B {
                            let d = qc - block[c * B + j];
                            s[j] += d * d;
                        }
                    }
                    dists[qi][b * B..(b + 1) * B].copy_from_slice(&s);
                }
            }
            dists
                .into_iter()
                .map(|mut d| {
                    d.truncate(n);
                    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
                    kth.sqrt()
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn a6_knn_exactness() -> Outcome {
    const N: usize = 100_000;
    const Q: usize = 10_000;
    const D: usize = 64;
    const K: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(0xA6);
    let data: Vec<f32> = (0..N * D).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let queries: Vec<f32> = (0..Q * D).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let build_start = Instant::now();
    let index = KnnIndex::build(&data, D, false).unwrap();
    let build = build_start.elapsed();
    let start = Instant::now();
    let got = index.kth_distances(&queries, K).unwrap();
    let query_time = start.elapsed();
    let oracle_start = Instant::now();
    let want = brute_kth(&data, &queries, D, K);
    let oracle_time = oracle_start.elapsed();
    let mismatches = got
        .iter()
        .zip(&want)
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    let throughput = Q as f64 / secs(query_time);
    Outcome::new(
        "A6",
        mismatches == 0,
        format!(
            "k-NN exactness: {Q} queries over {N} points, d={D}, k={K}: {mismatches} distances differ bitwise \
             from brute force; index {:.0} queries/s on {} thread(s) (advisory target 1e4/s: {}), build {:.2}s, oracle {:.1}s",
            throughput,
            rayon::current_num_threads(),
            if throughput >= 1e4 { "met" } else { "not met" },
            secs(build),
            secs(oracle_time)
        ),
    )
}

fn a7_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA7);
    let mut fpr_mismatches = 0;
    for _ in 0..100 {
        let n_id = rng.gen_range(1..300);
        let n_ood = rng.gen_range(1..300);
        // rounding to a coarse grid produces ties
        let scale = [1.0, 10.0, 1000.0][rng.gen_range(0..3)];
        let id: Vec<f64> = (0..n_id)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale).round())
            .collect();
        let ood: Vec<f64> = (0..n_ood)
            .map(|_| ((rng.sample::<f64, _>(StandardNormal) - 1.0) * scale).round())
            .collect();
        let target = if rng.gen_bool(0.5) {
            0.95
        } else {
            rng.gen_range(0.05..=1.0)
        };
        if evaluator::fpr_at_tpr(&id, &ood, target).unwrap() != common::fpr_brute(&id, &ood, target) {
            fpr_mismatches += 1;
        }
    }

    let id: Vec<f64> = (0..400).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ood: Vec<f64> = (0..300).map(|_| rng.gen_range(-3.5..2.5)).collect();
    let base = evaluator::auroc(&id, &ood).unwrap();
    let pair_gap = (base - common::auroc_pairs(&id, &ood)).abs();
    let mut worst = 0.0f64;
    for t in 0..50 {
        let a: f64 = rng.gen_range(0.1..10.0);
        let b: f64 = rng.gen_range(-5.0..5.0);
        let s: f64 = rng.gen_range(0.2..1.0);
        let f = |x: f64| -> f64 {
            let u = s * x;
            let g = match t % 5 {
                0 => u,
                1 => u.atan(),
                2 => u.powi(3) + u,
                3 => u.exp(),
                _ => u.sinh(),
            };
            a * g + b
        };
        let id_t: Vec<f64> = id.iter().map(|&x| f(x)).collect();
        let ood_t: Vec<f64> = ood.iter().map(|&x| f(x)).collect();
        worst = worst.max((evaluator::auroc(&id_t, &ood_t).unwrap() - base).abs());
    }
    Outcome::new(
        "A7",
        fpr_mismatches == 0 && worst <= 1e-12 && pair_gap <= 1e-12,
        format!(
            "metric oracles: fpr_at_tpr differs from exhaustive-threshold brute force on {fpr_mismatches}/100 instances; \
             max AUROC change under 50 increasing transforms {worst:.1e} (limit 1e-12); rank-sum vs pair count {pair_gap:.1e}"
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("A1", a1_oracle_equivalence),
        ("A2", a2_level_control),
        ("A3", a3_fusion_power),
        ("A4", a4_uniformity),
        ("A5", a5_special_functions),
        ("A6", a6_knn_exactness),
        ("A7", a7_metric_oracles),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (id, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let outcome = run();
        assert_eq!(outcome.id, id);
        println!(
            "{} {} {}",
            outcome.id,
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.summary
        );
        for note in &outcome.notes {
            println!("   {} note: {note}", outcome.id);
        }
        if !outcome.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
