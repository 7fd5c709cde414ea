//! End-to-end acceptance checks. Each test prints one PASS/FAIL line straight
//! to stderr so the verdicts show up even when output is captured.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::time::{Duration, Instant};

use disentangle_core::denoiser::{
    forward_denoise, AttentionRecord, AttnKind, LatentGrid, LayerAttention, LayerKind, LayerTag, NoiseSchedule,
};
use disentangle_core::harness::checks::gradcheck_suite;
use disentangle_core::harness::experiment::{run_experiment, ExperimentConfig, Phase, MANIFEST_FILE};
use disentangle_core::harness::metrics::leakage_mass;
use disentangle_core::harness::scenario::{generate_scenario, Scenario, ScenarioConfig};
use disentangle_core::kkt::{
    costed_multipliers, projected_descent, random_simplex_point, LossKind, PixelAttentionProblem, DEFAULT_ITERS,
    DEFAULT_STEP,
};
use disentangle_core::learning::{joint_sample, run_semantic_learning, InstanceSet, LearningConfig, LearningProblem};
use disentangle_core::refine::{assign_clusters, compute_ca_masks, kmeans_self_attention, RefineConfig};
use disentangle_core::synthesis::{
    alpha_decay, run_synthesis, BoxLayout, ScheduleParams, SynthesisConfig, SynthesisProblem,
};
use disentangle_core::tensor::{AttentionMap, BinaryMask, DenseTensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXPERIMENT: &str = include_str!("../../../configs/disentangle.toml");

fn verdict(id: usize, name: &str, ok: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "ACCEPTANCE {id} {} {name} ({:.1} ms): {detail}\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64() * 1e3
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {detail}");
}

fn random_rows(pixels: usize, width: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Array2::zeros((pixels, width));
    for p in 0..pixels {
        rows.row_mut(p).assign(&random_simplex_point(width, &mut rng));
    }
    rows
}

#[test]
fn c1_kkt_reward_fixed_point() {
    let start = Instant::now();
    let (k, alpha) = (2, 0.5);
    // Projecting (0, α, 0) onto the simplex shifts every coordinate by
    // (α − 1)/3; the multiplier is −2 times the background coordinate.
    let shift = (alpha - 1.0) / (k + 1) as f64;
    let expected = [-shift, alpha - shift, -shift];
    let expected_mult = 2.0 * shift;
    assert!((expected[2] - 1.0 / 6.0).abs() < 1e-15 && (expected_mult + 1.0 / 3.0).abs() < 1e-15);

    let problem = PixelAttentionProblem::new(k, alpha, vec![1]).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_mult: f64 = 0.0;
    for seed in 0..20 {
        let run = projected_descent(
            &problem,
            LossKind::RewardCosted,
            &random_rows(1, k + 1, seed),
            DEFAULT_STEP,
            DEFAULT_ITERS,
        )
        .unwrap();
        for (a, e) in run.rows.row(0).iter().zip(expected) {
            worst = worst.max((a - e).abs());
        }
        worst_mult = worst_mult.max((costed_multipliers(&run.rows)[0] - expected_mult).abs());
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-3 && worst_mult <= 1e-3 && elapsed < Duration::from_secs(1);
    verdict(
        1,
        "KKT reward fixed point",
        ok,
        elapsed,
        &format!("20 inits, max coord dev {worst:.2e}, max multiplier dev {worst_mult:.2e} (tol 1e-3, off-target 1/6, multiplier -1/3)"),
    );
}

#[test]
fn c2_kkt_penalty_uniqueness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in [1, 2, 4] {
        let problem = PixelAttentionProblem::canonical(k, 0.5).unwrap();
        for seed in 0..20 {
            let init = random_rows(problem.pixels(), k + 1, 100 * k as u64 + seed);
            let run = projected_descent(&problem, LossKind::Penalty, &init, DEFAULT_STEP, DEFAULT_ITERS).unwrap();
            for (p, &label) in problem.labels().iter().enumerate() {
                for j in 0..=k {
                    let one_hot = if j == label { 1.0 } else { 0.0 };
                    worst = worst.max((run.rows[[p, j]] - one_hot).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-3 && elapsed < Duration::from_secs(1);
    verdict(
        2,
        "KKT penalty uniqueness",
        ok,
        elapsed,
        &format!("K in {{1, 2, 4}} x 20 inits, max dev from one-hot {worst:.2e} (tol 1e-3)"),
    );
}

#[test]
fn c3_gradient_suite() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut per_loss: BTreeMap<String, f64> = BTreeMap::new();
    for seed in 0..3 {
        let report = gradcheck_suite(seed).unwrap();
        for e in report.entries {
            let slot = per_loss.entry(format!("{}/{}", e.loss, e.wrt)).or_default();
            *slot = slot.max(e.max_rel_error);
            worst = worst.max(e.max_rel_error);
        }
    }
    let elapsed = start.elapsed();
    let ok = per_loss.len() == 5 && worst <= 1e-5 && elapsed < Duration::from_secs(10);
    let detail: Vec<String> = per_loss.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        3,
        "gradient suite",
        ok,
        elapsed,
        &format!("3 seeds, max rel err {worst:.2e} (tol 1e-5): {}", detail.join(", ")),
    );
}

#[test]
fn c4_schedule_identities() {
    let start = Instant::now();
    let p = ScheduleParams::default();
    let a = |t| alpha_decay(t, &p).unwrap();
    let values: Vec<f64> = (1..=15).map(a).collect();
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let ok = a(1) == 0.5 && a(3) == 0.2 && a(15) == 0.1 && (a(9) - 0.15).abs() < 1e-12 && monotone;
    verdict(
        4,
        "schedule identities",
        ok,
        start.elapsed(),
        &format!(
            "alpha(1, 3, 9, 15) = {}, {}, {}, {}; nonincreasing over 1..15: {monotone}",
            a(1),
            a(3),
            a(9),
            a(15)
        ),
    );
}

#[test]
fn c5_joint_sampling_coverage() {
    let start = Instant::now();
    let masks = (0..3)
        .map(|i| BinaryMask::from_fn(4, 6, |_, c| c / 2 == i).unwrap())
        .collect();
    let set = InstanceSet::with_placeholders(masks, vec![1, 2, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        *counts.entry(joint_sample(&set, &mut rng).lambda_set).or_default() += 1;
    }
    let worst = counts
        .values()
        .map(|&c| (c as f64 / draws as f64 - 1.0 / 7.0).abs())
        .fold(0.0, f64::max);
    let ok = counts.len() == 7 && worst <= 0.015;
    verdict(
        5,
        "joint-sampling coverage",
        ok,
        start.elapsed(),
        &format!(
            "{} distinct subsets in {draws} draws, max |freq - 1/7| = {worst:.4} (tol 0.015)",
            counts.len()
        ),
    );
}

fn final_leakage(s: &Scenario, config: &LearningConfig) -> Vec<f64> {
    let problem = LearningProblem {
        z0: s.z0.clone(),
        instances: s.instance_set().unwrap(),
        tokens: s.tokens.clone(),
        params: s.params.clone(),
        schedule: NoiseSchedule::default(),
    };
    let out = run_semantic_learning(&problem, config).unwrap();
    let (_, record) = forward_denoise(&s.z0, 0, &out.tokens, &out.params, &problem.schedule).unwrap();
    (0..s.masks.len())
        .map(|i| leakage_mass(&record, s.placeholder(i), &s.masks[i]).unwrap())
        .collect()
}

fn spread(runs: &[Vec<f64>]) -> f64 {
    let means: Vec<f64> = runs.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    means.iter().copied().fold(f64::MIN, f64::max) - means.iter().copied().fold(f64::MAX, f64::min)
}

#[test]
fn c6_disentanglement_experiment() {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml(EXPERIMENT).unwrap();
    let l = &cfg.learning;
    assert_eq!(cfg.scenario.rho, 0.8);
    assert_eq!((l.e_coarse, l.stage1_iters - l.e_coarse), (200, 600));
    let s = generate_scenario(&cfg.scenario).unwrap();

    let c2f = |seed| final_leakage(&s, &LearningConfig { seed, ..l.clone() });
    let penalty = |seed| {
        final_leakage(
            &s,
            &LearningConfig {
                seed,
                e_coarse: 0,
                ..l.clone()
            },
        )
    };
    let reward = final_leakage(
        &s,
        &LearningConfig {
            e_coarse: l.stage1_iters,
            ..l.clone()
        },
    );
    let c2f_runs: Vec<Vec<f64>> = (0..5).map(|k| c2f(l.seed + k)).collect();
    let pen_runs: Vec<Vec<f64>> = (0..5).map(|k| penalty(l.seed + k)).collect();

    let ratios: Vec<f64> = c2f_runs[0].iter().zip(&reward).map(|(c, r)| c / r).collect();
    let (pen_spread, c2f_spread) = (spread(&pen_runs), spread(&c2f_runs));
    let elapsed = start.elapsed();
    let ok = ratios.iter().all(|&r| r <= 0.5) && pen_spread >= 2.0 * c2f_spread && elapsed < Duration::from_secs(120);
    verdict(
        6,
        "disentanglement experiment",
        ok,
        elapsed,
        &format!(
            "leakage c2f {:.4}/{:.4} vs reward-only {:.4}/{:.4} (ratios {:.2}/{:.2}, need <= 0.5); \
             5-seed spread penalty-only {pen_spread:.4} vs c2f {c2f_spread:.4} (x{:.1}, need >= 2)",
            c2f_runs[0][0],
            c2f_runs[0][1],
            reward[0],
            reward[1],
            ratios[0],
            ratios[1],
            pen_spread / c2f_spread
        ),
    );
}

#[test]
fn c7_synthesis_control() {
    let start = Instant::now();
    let s = generate_scenario(&ScenarioConfig::default()).unwrap();
    let mut tokens = s.tokens.clone();
    for i in 0..s.masks.len() {
        tokens[s.placeholder(i)].vector = (&s.directions[i] * 3.0).to_vec();
    }
    let groups = (0..s.masks.len()).map(|i| vec![s.placeholder(i)]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let problem = SynthesisProblem {
        tokens,
        params: s.params.clone(),
        schedule: NoiseSchedule::default(),
        boxes: BoxLayout::new(s.masks.clone(), groups).unwrap(),
        z_init: LatentGrid::standard_normal_like(&s.z0, &mut rng).unwrap(),
    };
    let run = |out_of_box| {
        let cfg = SynthesisConfig {
            out_of_box,
            ..Default::default()
        };
        run_synthesis(&problem, &cfg, &ScheduleParams::default(), &RefineConfig::default()).unwrap()
    };
    let full = run(true);
    let in_box_only = run(false);
    let t_bound = SynthesisConfig::default().t_bound;
    let descending = full
        .steps
        .iter()
        .take(t_bound)
        .filter(|st| st.optimized && st.total_after < st.total)
        .count();
    let lower = full
        .final_leakage
        .iter()
        .zip(&in_box_only.final_leakage)
        .all(|(f, o)| f < o);
    let elapsed = start.elapsed();
    let ok = t_bound == 15 && descending >= 14 && lower && elapsed < Duration::from_secs(60);
    verdict(
        7,
        "synthesis control",
        ok,
        elapsed,
        &format!(
            "loss fell in {descending}/{t_bound} optimized steps (need >= 14); final leakage full {:.4}/{:.4} vs out-of-box off {:.4}/{:.4}",
            full.final_leakage[0], full.final_leakage[1], in_box_only.final_leakage[0], in_box_only.final_leakage[1]
        ),
    );
}

/// 8×8 grid: two instance rectangles and background, each a cluster of
/// self-attention rows; cross-attention is a noisy blob per instance.
fn refinement_fixture() -> (AttentionRecord, DenseTensor, Vec<BinaryMask>) {
    let res = 8;
    let truth = vec![
        BinaryMask::from_fn(res, res, |r, c| (1..4).contains(&r) && (1..4).contains(&c)).unwrap(),
        BinaryMask::from_fn(res, res, |r, c| (4..7).contains(&r) && (4..8).contains(&c)).unwrap(),
    ];
    let region = |p: usize| truth.iter().position(|m| m.bits()[p]).map_or(0, |i| i + 1);
    let n = res * res;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sa = Array2::from_shape_fn((n, n), |(p, q)| {
        (if region(p) == region(q) { 1.0 } else { 0.05 }) + rng.random_range(0.0..0.02)
    });
    let sa = &sa / &sa.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    let ca = Array2::from_shape_fn((n, 3), |(p, j)| {
        let inside = region(p) == j;
        (if inside { 0.8 } else { 0.1 }) + rng.random_range(0.0..0.05)
    });
    let ca = &ca / &ca.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
    let record = AttentionRecord {
        timestep: 0,
        layers: vec![
            LayerAttention {
                index: 0,
                tag: LayerTag::new(LayerKind::Decoder, res, AttnKind::CrossAttention),
                map: AttentionMap::new(ca).unwrap(),
            },
            LayerAttention {
                index: 1,
                tag: LayerTag::new(LayerKind::Decoder, res, AttnKind::SelfAttention),
                map: AttentionMap::new(sa.clone()).unwrap(),
            },
        ],
    };
    (record, DenseTensor::from_array2(sa).unwrap(), truth)
}

#[test]
fn c8_mask_refinement() {
    let start = Instant::now();
    let (record, features, truth) = refinement_fixture();
    let cfg = RefineConfig::default();
    let groups = vec![vec![1], vec![2]];
    let coarse = compute_ca_masks(&record, &groups, cfg.smoothing, cfg.sigma_noun).unwrap();
    let clusters = kmeans_self_attention(&features, truth.len() + 1, None, 0).unwrap();
    let refined = assign_clusters(&coarse.masks, &clusters, cfg.sigma_cluster).unwrap();
    let ious: Vec<f64> = refined.iter().zip(&truth).map(|(r, t)| r.iou(t).unwrap()).collect();
    let coarse_ious: Vec<f64> = coarse
        .masks
        .iter()
        .zip(&truth)
        .map(|(r, t)| r.iou(t).unwrap())
        .collect();
    let warm = kmeans_self_attention(&features, clusters.k, Some(&clusters.centers), 1).unwrap();
    let ok = ious.iter().all(|&v| v >= 0.9) && warm.reassignments == 0 && warm.assignments == clusters.assignments;
    verdict(
        8,
        "mask refinement",
        ok,
        start.elapsed(),
        &format!(
            "refined IoU {:.3}/{:.3} (need >= 0.9, coarse {:.3}/{:.3}); warm restart reassignments {}",
            ious[0], ious[1], coarse_ious[0], coarse_ious[1], warm.reassignments
        ),
    );
}

#[test]
fn c9_reproducibility() {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml(EXPERIMENT).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["first", "second", "from_manifest"]
        .iter()
        .map(|d| tmp.path().join(d))
        .collect();
    run_experiment(&cfg, Phase::Synthesize, &dirs[0]).unwrap();
    run_experiment(&cfg, Phase::Synthesize, &dirs[1]).unwrap();
    let again = ExperimentConfig::load(&dirs[0].join(MANIFEST_FILE)).unwrap();
    run_experiment(&again, Phase::Synthesize, &dirs[2]).unwrap();

    let mut names: Vec<String> = fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mismatched: Vec<&String> = names
        .iter()
        .filter(|n| {
            let a = fs::read(dirs[0].join(n)).unwrap();
            dirs[1..].iter().any(|d| fs::read(d.join(n)).unwrap() != a)
        })
        .collect();
    let ok = names.len() == 7 && mismatched.is_empty();
    verdict(
        9,
        "reproducibility",
        ok,
        start.elapsed(),
        &format!(
            "{} files compared across 3 runs, mismatches: {mismatched:?}",
            names.len()
        ),
    );
}
