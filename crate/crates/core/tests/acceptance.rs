//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use redcb_core::analysis::{analyze_corpus, AblationMode, AnalysisConfig};
use redcb_core::baselines::{compare_strategies, CompareConfig, Strategy};
use redcb_core::clustering::{dpc_cluster, dpc_delta, dpc_local_density};
use redcb_core::codebook::{
    calibrate_threshold, decode_codebook, encode_codebook, keep_at_most, keep_lowest,
};
use redcb_core::export::export_store;
use redcb_core::numerics::{cosine, jsd, softmax, ProbDist};
use redcb_core::synthcorpus::{self, background_direction, SynthParams};
use redcb_core::{
    build_codebook, load_codebook, probing_flops, prune_threshold, save_codebook, AnalyticOracle,
    Error, Profile, RedundancyCodebook, ReplayOracle, TokenMatrix, ToyConfig, ToyTransformer,
};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(limit: Duration, start: Instant) -> Check {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(String::new())
}

fn brute_force_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        if p[i] > 0.0 {
            total += 0.5 * p[i] * (p[i] / m).ln();
        }
        if q[i] > 0.0 {
            total += 0.5 * q[i] * (q[i] / m).ln();
        }
    }
    total
}

fn numerics_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_norm = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_self = 0.0f64;
    let mut worst_bound = f64::NEG_INFINITY;
    for _ in 0..500 {
        let n = rng.random_range(1..64);
        let scale = rng.random_range(0.1..50.0);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let pa = softmax(&a).map_err(err)?;
        let pb = softmax(&b).map_err(err)?;
        worst_norm = worst_norm.max((pa.iter().sum::<f64>() - 1.0).abs());
        let ids: Vec<u32> = (0..n as u32).collect();
        let da = ProbDist::new(ids.clone(), pa).map_err(err)?;
        let db = ProbDist::new(ids, pb).map_err(err)?;
        let ab = jsd(&da, &db).map_err(err)?;
        let ba = jsd(&db, &da).map_err(err)?;
        worst_sym = worst_sym.max((ab - ba).abs());
        worst_self = worst_self.max(jsd(&da, &da).map_err(err)?.abs());
        worst_bound = worst_bound.max(ab - std::f64::consts::LN_2);
    }
    ensure!(worst_norm <= 1e-9, "softmax sums off by {worst_norm:e}");
    ensure!(worst_sym <= 1e-12, "jsd asymmetry {worst_sym:e}");
    ensure!(worst_self <= 1e-12, "jsd(p, p) = {worst_self:e}");
    ensure!(worst_bound <= 1e-9, "jsd exceeds ln 2 by {worst_bound:e}");

    let p = ProbDist::new(vec![0, 1], vec![0.5, 0.5]).map_err(err)?;
    let q = ProbDist::new(vec![0, 1], vec![0.25, 0.75]).map_err(err)?;
    let v = jsd(&p, &q).map_err(err)?;
    let reference = brute_force_jsd(&[0.5, 0.5], &[0.25, 0.75]);
    ensure!((v - 0.033822).abs() < 1e-5, "worked value {v}");
    ensure!(
        (v - reference).abs() < 1e-12,
        "worked value {v} vs brute force {reference}"
    );
    within(Duration::from_secs(1), start)?;
    Ok(format!(
        "worked value {v:.6}, max softmax error {worst_norm:.1e}"
    ))
}

fn points(rows: &[&[f64]]) -> TokenMatrix {
    TokenMatrix::from_rows(rows).expect("fixture")
}

fn dpc_suite() -> Check {
    let start = Instant::now();
    let x = points(&[&[0.0], &[1.0], &[3.0]]);
    let rho = dpc_local_density(&x, 2).map_err(err)?;
    let want = [(-2.0f64).exp(), (-1.5f64).exp(), (-2.5f64).exp()];
    for (got, want) in rho.iter().zip(want) {
        ensure!((got - want).abs() < 1e-6, "rho {rho:?}");
    }
    let delta = dpc_delta(&x, &rho).map_err(err)?;
    for (got, want) in delta.iter().zip([1.0, 3.0, 2.0]) {
        ensure!((got - want).abs() < 1e-6, "delta {delta:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 1.0).map_err(err)?;
    let mut rows = Vec::new();
    for center in [0.0, 10.0] {
        for _ in 0..20 {
            rows.push(vec![
                center + noise.sample(&mut rng) * 0.1,
                noise.sample(&mut rng) * 0.1,
            ]);
        }
    }
    let blobs = TokenMatrix::from_rows(&rows).map_err(err)?;
    let res = dpc_cluster(&blobs, 5, 2).map_err(err)?;
    for i in 0..40 {
        ensure!(
            (res.assignment[i] == res.assignment[0]) == (i < 20),
            "point {i} in the wrong blob"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let big: Vec<Vec<f64>> = (0..600)
        .map(|_| (0..16).map(|_| noise.sample(&mut rng)).collect())
        .collect();
    let big = TokenMatrix::from_rows(&big).map_err(err)?;
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(err)?
            .install(|| {
                let rho = dpc_local_density(&big, 16)?;
                let delta = dpc_delta(&big, &rho)?;
                let c = dpc_cluster(&big, 16, 10)?;
                Ok::<_, Error>((rho, delta, c))
            })
            .map_err(err)
    };
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    let (rho1, delta1, c1) = run(1)?;
    for threads in [1, 2, 8] {
        let (rho, delta, c) = run(threads)?;
        ensure!(
            bits(&rho) == bits(&rho1),
            "density differs with {threads} threads"
        );
        ensure!(
            bits(&delta) == bits(&delta1),
            "delta differs with {threads} threads"
        );
        ensure!(c == c1, "clusters differ with {threads} threads");
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!("two blobs split {:?}", res.sizes))
}

fn null_ablation() -> Check {
    let corpus = synthcorpus::generate(&SynthParams {
        n_images: 10,
        ..SynthParams::default()
    })
    .map_err(err)?;
    let oracle = AnalyticOracle::for_synthetic(4, 32, AnalyticOracle::DEFAULT_BETA).map_err(err)?;
    let cfg = AnalysisConfig {
        ablation: AblationMode::Identity,
        ..AnalysisConfig::default()
    };
    let records = analyze_corpus(&oracle, &corpus, &cfg).map_err(err)?;
    ensure!(records.len() == 640, "{} records", records.len());
    let worst = records
        .iter()
        .flat_map(|r| [r.jsd_region, r.jsd_global, r.jsd_final])
        .fold(0.0f64, |a, v| a.max(v.abs()));
    ensure!(worst <= 1e-12, "largest divergence {worst:e}");
    Ok(format!("{} records, max |jsd| {worst:.1e}", records.len()))
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(err)?;
    pool.install(|| {
        let params = SynthParams::default();
        let corpus = synthcorpus::generate(&params).map_err(err)?;
        let oracle = AnalyticOracle::for_synthetic(params.n_classes, params.dim, AnalyticOracle::DEFAULT_BETA)
            .map_err(err)?;
        let profile = Profile::Synthetic;
        let cfg = AnalysisConfig {
            cls_embedding: Some(oracle.cls_embedding()),
            ..AnalysisConfig::default()
        };
        let build = build_codebook(&corpus, &oracle, &cfg, &profile.thresholds(), profile.k_pool())
            .map_err(err)?;
        let cb = &build.codebook;
        ensure!(!cb.is_empty(), "empty codebook");
        let bg = background_direction(params.dim);
        let min_cos = cb
            .prototypes
            .iter_rows()
            .map(|r| cosine(r, &bg))
            .fold(1.0f64, f64::min);
        ensure!(min_cos >= 0.95, "prototype at cosine {min_cos} to the background");

        let tokens: Vec<&TokenMatrix> = corpus.images.iter().map(|i| &i.tokens).collect();
        let target = 0.2 * corpus.mean_len();
        let cal = calibrate_threshold(&tokens, cb, target).map_err(err)?;
        let (mut obj, mut obj_kept, mut bg_n, mut bg_removed) = (0usize, 0usize, 0usize, 0usize);
        for img in &corpus.images {
            let kept = prune_threshold(&img.tokens, cb, cal.r_threshold).map_err(err)?.kept;
            let labels = img.labels.as_ref().ok_or("unlabelled synthetic image")?;
            for (i, l) in labels.iter().enumerate() {
                let k = kept.binary_search(&i).is_ok();
                if l.is_background() {
                    bg_n += 1;
                    bg_removed += usize::from(!k);
                } else {
                    obj += 1;
                    obj_kept += usize::from(k);
                }
            }
        }
        let obj_frac = obj_kept as f64 / obj as f64;
        let bg_frac = bg_removed as f64 / bg_n as f64;
        ensure!(obj_frac >= 0.9, "object tokens kept {obj_frac:.3}");
        ensure!(bg_frac >= 0.9, "background tokens removed {bg_frac:.3}");

        let budget = (0.2 * corpus.mean_len()).round() as usize;
        let cmp = compare_strategies(
            &corpus,
            &oracle,
            cb,
            &CompareConfig {
                budget,
                cls_embedding: Some(oracle.cls_embedding()),
                ..CompareConfig::default()
            },
        )
        .map_err(err)?;
        let acc = |s| cmp.aggregate(s).map(|r| r.toy_accuracy).ok_or("missing aggregate row");
        let (ours, random) = (acc(Strategy::Codebook)?, acc(Strategy::Random)?);
        ensure!(ours >= random, "codebook accuracy {ours:.3} below random {random:.3}");
        within(Duration::from_secs(120), start)?;
        Ok(format!(
            "N={} min cos {min_cos:.4}, r={:.4}, objects kept {obj_frac:.3}, background removed {bg_frac:.3}, accuracy {ours:.3} vs random {random:.3} at R={budget}",
            cb.len(),
            cal.r_threshold
        ))
    })
}

fn flops() -> Check {
    let v = probing_flops(576, 969, 4096).map_err(err)?;
    ensure!(v == 4_571_757_504, "got {v}");
    Ok(v.to_string())
}

fn codebook_file() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f64> = (0..37 * 24).map(|_| rng.random_range(-2.0..2.0)).collect();
    let cb = RedundancyCodebook::new(
        TokenMatrix::new(37, 24, data).map_err(err)?,
        "acceptance",
        Profile::Reference.thresholds(),
        64,
    );
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("book.rcb");
    save_codebook(&cb, &path).map_err(err)?;
    let back = load_codebook(&path).map_err(err)?;
    let bits = |c: &RedundancyCodebook| -> Vec<u64> {
        c.prototypes
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    ensure!(
        back == cb && bits(&back) == bits(&cb),
        "round trip changed the codebook"
    );

    let bytes = encode_codebook(&cb).map_err(err)?;
    let mut flipped = bytes.clone();
    let at = bytes.len() - 4 - 100;
    flipped[at] ^= 0x10;
    ensure!(
        matches!(decode_codebook(&flipped), Err(Error::CorruptStore(_))),
        "flipped payload bit not detected"
    );
    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    ensure!(
        matches!(decode_codebook(&v2), Err(Error::UnsupportedVersion(2))),
        "version 2 accepted"
    );
    Ok(format!("{} bytes", bytes.len()))
}

fn cross_mode() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut scores: Vec<f64> = (0..576).map(|_| rng.random_range(-1.0..1.0)).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    scores.shuffle(&mut rng);
    let n = scores.len();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    for pick in (0..n).step_by(7) {
        let by_threshold = keep_at_most(&scores, sorted[pick]);
        let by_budget = keep_lowest(&scores, by_threshold.len());
        ensure!(
            by_threshold == by_budget,
            "modes disagree at r={}",
            sorted[pick]
        );
    }
    let mut last = 0;
    for step in 0..100 {
        let r = -1.0 + 2.0 * step as f64 / 99.0;
        let count = keep_at_most(&scores, r).len();
        ensure!(count >= last, "retained count fell to {count} at r={r}");
        last = count;
    }
    ensure!(last == n, "r=1 keeps {last} of {n}");
    Ok(format!("{n} distinct scores, 100-step sweep monotone"))
}

fn replay_round_trip() -> Check {
    let corpus = synthcorpus::generate(&SynthParams {
        n_images: 4,
        ..SynthParams::default()
    })
    .map_err(err)?;
    let toy = ToyTransformer::new(ToyConfig {
        vocab: 96,
        article_ids: [3u32, 7, 11].into_iter().collect(),
        repeat_for_single_input: true,
        uses_image_newline: true,
        ..ToyConfig::default()
    })
    .map_err(err)?;
    let cfg = AnalysisConfig::default();
    let dir = tempfile::tempdir().map_err(err)?;
    let summary = export_store(&toy, &corpus, &cfg, 50, dir.path()).map_err(err)?;
    let replay = ReplayOracle::open(dir.path()).map_err(err)?;
    let replayed = analyze_corpus(&replay, &corpus, &cfg).map_err(err)?;
    ensure!(
        replayed.len() == summary.records.len(),
        "{} replayed vs {} live records",
        replayed.len(),
        summary.records.len()
    );
    let mut worst = 0.0f64;
    for (a, b) in summary.records.iter().zip(&replayed) {
        ensure!(
            a.image_id == b.image_id && a.token_idx == b.token_idx,
            "record order differs"
        );
        for (x, y) in [
            (a.p1, b.p1),
            (a.jsd_region, b.jsd_region),
            (a.jsd_global, b.jsd_global),
            (a.jsd_final, b.jsd_final),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    ensure!(worst <= 1e-5, "largest deviation {worst:e}");
    Ok(format!(
        "{} records from {} stored responses, max deviation {worst:.1e}",
        replayed.len(),
        summary.requests
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("numerics suite", numerics_suite),
        ("DPC-kNN fixtures and determinism", dpc_suite),
        ("null-ablation pipeline", null_ablation),
        ("end-to-end synthetic pruning", end_to_end),
        ("probing FLOPs", flops),
        ("codebook file round trip", codebook_file),
        ("cross-mode pruning consistency", cross_mode),
        ("toy export and replay round trip", replay_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({took:.2?}): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
