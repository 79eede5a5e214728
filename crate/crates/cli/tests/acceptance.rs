//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line with its measured values (visible with `--nocapture`).
//!
//! The end-to-end criteria (5-7) share one set of training runs on the
//! reference synthetic instance: dataset seed 1 (n=500, dx=64, dy=128,
//! 5 classes, noise 0.1), split 350/75/75, and training seed 7 with b=16,
//! 50 epochs, batch 64, momentum 0.9, lr 0.01, lambda 1, gamma 0.3. The
//! thresholds below were confirmed by a pilot run of this exact
//! configuration before being frozen.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chn_core::data::{generate_synthetic, make_split, BimodalDataset, SplitSpec, SyntheticConfig};
use chn_core::eval::{map_at_r, precision_at_top_r, precision_recall_curve, RelevanceJudge};
use chn_core::hashing::{
    all_codes, binarize, hamming, quantization_bound_report, sample_interior_embeddings,
    sample_vertex_embeddings, search, verify_identities, verify_identities_exhaustive,
    HashCodeMatrix, Neighbor, RankedResult,
};
use chn_core::losses::{cosine, gradcheck_case, joint_loss, output_residuals, SimilaritySet};
use chn_core::training::{cross_modal_map, encode, train, TrainConfig, TrainOutput, Variant};
use chn_core::Matrix;

// --- criterion 1 -------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let cases = 120;
    let mut max_err = 0.0_f64;
    for seed in 0..cases {
        let case = gradcheck_case(seed);
        let err = case.check(1e-5).unwrap();
        max_err = max_err.max(err);
    }
    assert!(
        max_err <= 1e-5,
        "max relative error {max_err} exceeds 1e-5 over {cases} configurations"
    );

    // The harness must catch a sign-mutated quantization residual.
    let mutated = (0..cases)
        .map(gradcheck_case)
        .find(|c| c.gamma >= 0.05)
        .expect("some case has a live quantization term");
    let mutated_err = mutated.check_quant_flipped(1e-5).unwrap();
    assert!(
        mutated_err > 1e-2,
        "flipped quantization sign went undetected: {mutated_err}"
    );

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "[PASS] criterion 1: max rel error {max_err:.3e} over {cases} configs, \
         mutation detected at {mutated_err:.3e}, {elapsed:.2?}"
    );
}

// --- criterion 2 -------------------------------------------------------------

#[test]
fn criterion_2_hamming_identities() {
    let started = Instant::now();

    // Exhaustively over the full code space for b <= 8.
    for bits in 1..=8 {
        let codes = all_codes(bits).unwrap();
        let report = verify_identities_exhaustive(&codes);
        assert_eq!(report.pairs_checked, (1usize << bits) * (1usize << bits));
        assert_eq!(
            report.max_inner_deviation, 0,
            "b={bits}: integer identity must be exact"
        );
        assert!(
            report.max_cosine_deviation <= 1e-9,
            "b={bits}: cosine identity deviates by {}",
            report.max_cosine_deviation
        );
    }

    // 1e5 random pairs at b = 64.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut codes = HashCodeMatrix::new(512, 64).unwrap();
    for i in 0..codes.len() {
        codes.item_mut(i)[0] = rng.random();
    }
    let report = verify_identities(&codes, 100_000, 3).unwrap();
    assert_eq!(report.pairs_checked, 100_000);
    assert_eq!(report.max_inner_deviation, 0);
    assert!(report.max_cosine_deviation <= 1e-9);

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "[PASS] criterion 2: exhaustive b<=8 and 1e5 random b=64 pairs exact \
         (worst cosine deviation {:.1e}), {elapsed:.2?}",
        report.max_cosine_deviation
    );
}

// --- criterion 3 -------------------------------------------------------------

#[test]
fn criterion_3_quantization_bound_suite() {
    let started = Instant::now();

    // (a) Exact identities on 1e4 random embeddings across widths.
    let mut checked = 0usize;
    for (bits, seed) in [(2usize, 10u64), (4, 11), (8, 12), (16, 13), (64, 14)] {
        let u = sample_interior_embeddings(2_000, bits, seed);
        let report = quantization_bound_report(&u).unwrap();
        for row in &report.rows {
            assert!((row.itq_error - row.identity_lhs).abs() <= 1e-9);
            assert!((row.identity_lhs - row.exact_rhs).abs() <= 1e-9);
        }
        checked += report.rows.len();
    }
    assert_eq!(checked, 10_000);

    // (b) Equality on every sign vertex for b in {2, 4, 8, 16}.
    for bits in [2usize, 4, 8, 16] {
        let vertices = sample_vertex_embeddings(bits, 1 << 16, 0);
        assert_eq!(vertices.rows(), 1 << bits, "all vertices enumerated");
        let report = quantization_bound_report(&vertices).unwrap();
        for row in &report.rows {
            assert!(
                (row.itq_error - row.bound_rhs).abs() <= 1e-9,
                "b={bits}: vertex equality violated"
            );
            assert!(!row.violated);
        }
    }

    // (c) The interior counterexample and a nonzero violation rate.
    let u = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
    let row = quantization_bound_report(&u).unwrap().rows[0];
    assert!((row.itq_error - 0.5).abs() <= 1e-12);
    assert!(row.bound_rhs.abs() <= 1e-12);
    assert!(
        row.violated,
        "u = (0.5, 0.5) must violate the claimed bound"
    );

    let interior = sample_interior_embeddings(10_000, 16, 21);
    let rate = quantization_bound_report(&interior)
        .unwrap()
        .violation_rate();
    assert!(rate > 0.0, "interior samples must show violations");

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "[PASS] criterion 3: identities exact on 1e4 embeddings, vertex equality \
         at b in {{2,4,8,16}}, counterexample flagged, interior violation rate {rate:.3}, \
         {elapsed:.2?}"
    );
}

// --- criterion 4 -------------------------------------------------------------

mod naive {
    //! Independent brute-force metric implementations. Per-query
    //! accumulation follows ascending index order so f64 results are
    //! comparable to the library output at tight tolerance.

    pub fn rank(db_bits: &[Vec<bool>], query: &[bool]) -> Vec<(usize, u32)> {
        let mut out: Vec<(usize, u32)> = db_bits
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let d = row.iter().zip(query).filter(|(a, b)| a != b).count() as u32;
                (i, d)
            })
            .collect();
        out.sort_by_key(|&(i, d)| (d, i));
        out
    }

    pub fn relevant(q: &[bool], d: &[bool]) -> bool {
        q.iter().zip(d).any(|(&a, &b)| a && b)
    }

    pub fn ap(rel: &[bool], r: usize, total: usize) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (idx, &is_rel) in rel.iter().take(r).enumerate() {
            if is_rel {
                hits += 1;
                sum += hits as f64 / (idx + 1) as f64;
            }
        }
        sum / r.min(total) as f64
    }

    /// Mean AP over queries with at least one relevant item; None when no
    /// query is eligible.
    pub fn map(
        rankings: &[Vec<(usize, u32)>],
        q_labels: &[Vec<bool>],
        d_labels: &[Vec<bool>],
        r: usize,
    ) -> Option<f64> {
        let mut sum = 0.0;
        let mut eligible = 0usize;
        for (q, ranking) in rankings.iter().enumerate() {
            let total = d_labels
                .iter()
                .filter(|d| relevant(&q_labels[q], d))
                .count();
            if total == 0 {
                continue;
            }
            let rel: Vec<bool> = ranking
                .iter()
                .map(|&(i, _)| relevant(&q_labels[q], &d_labels[i]))
                .collect();
            sum += ap(&rel, r, total);
            eligible += 1;
        }
        (eligible > 0).then(|| sum / eligible as f64)
    }

    pub fn pr_curve(
        rankings: &[Vec<(usize, u32)>],
        q_labels: &[Vec<bool>],
        d_labels: &[Vec<bool>],
        bits: usize,
    ) -> Vec<(f64, f64)> {
        let eligible: Vec<usize> = (0..q_labels.len())
            .filter(|&q| d_labels.iter().any(|d| relevant(&q_labels[q], d)))
            .collect();
        if eligible.is_empty() {
            return Vec::new();
        }
        let mut points: Vec<(f64, f64)> = Vec::new();
        for t in 0..=bits as u32 {
            let mut p_sum = 0.0;
            let mut r_sum = 0.0;
            for &q in &eligible {
                let total = d_labels
                    .iter()
                    .filter(|d| relevant(&q_labels[q], d))
                    .count();
                let retrieved: Vec<usize> = rankings[q]
                    .iter()
                    .take_while(|&&(_, d)| d <= t)
                    .map(|&(i, _)| i)
                    .collect();
                let hits = retrieved
                    .iter()
                    .filter(|&&i| relevant(&q_labels[q], &d_labels[i]))
                    .count();
                p_sum += if retrieved.is_empty() {
                    1.0
                } else {
                    hits as f64 / retrieved.len() as f64
                };
                r_sum += hits as f64 / total as f64;
            }
            let precision = p_sum / eligible.len() as f64;
            let recall = r_sum / eligible.len() as f64;
            if points.last().is_none_or(|&(x, _)| recall > x) {
                points.push((recall, precision));
            }
        }
        points
    }

    pub fn precision_at(
        rankings: &[Vec<(usize, u32)>],
        q_labels: &[Vec<bool>],
        d_labels: &[Vec<bool>],
        r: usize,
    ) -> f64 {
        let mut sum = 0.0;
        for (q, ranking) in rankings.iter().enumerate() {
            let hits = ranking
                .iter()
                .take(r)
                .filter(|&&(i, _)| relevant(&q_labels[q], &d_labels[i]))
                .count();
            sum += hits as f64 / r as f64;
        }
        sum / rankings.len() as f64
    }
}

#[test]
fn criterion_4_metric_oracle_equivalence() {
    let started = Instant::now();

    // Pinned hand case.
    let ap = chn_core::eval::average_precision(&[true, false, true, false], 4, 2).unwrap();
    assert!((ap - 0.833_333_333_333_333_4).abs() <= 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut instances = 0usize;
    for n in 1..=10usize {
        for bits in 1..=4usize {
            for _rep in 0..5 {
                instances += 1;
                let queries = 3usize;
                let classes = 3usize;

                let draw_bits =
                    |rng: &mut ChaCha8Rng, rows: usize, width: usize| -> Vec<Vec<bool>> {
                        (0..rows)
                            .map(|_| (0..width).map(|_| rng.random::<bool>()).collect())
                            .collect()
                    };
                let db_bits = draw_bits(&mut rng, n, bits);
                let query_bits = draw_bits(&mut rng, queries, bits);
                let draw_labels = |rng: &mut ChaCha8Rng, rows: usize| -> Vec<Vec<bool>> {
                    (0..rows)
                        .map(|_| (0..classes).map(|_| rng.random::<f64>() < 0.4).collect())
                        .collect()
                };
                let db_labels = draw_labels(&mut rng, n);
                let query_labels = draw_labels(&mut rng, queries);

                // Library-side structures.
                let to_codes = |rows: &[Vec<bool>]| -> HashCodeMatrix {
                    let mut m = HashCodeMatrix::new(rows.len(), bits).unwrap();
                    for (i, row) in rows.iter().enumerate() {
                        for (j, &b) in row.iter().enumerate() {
                            m.set_bit(i, j, b);
                        }
                    }
                    m
                };
                let db = to_codes(&db_bits);
                let qs = to_codes(&query_bits);
                let to_matrix = |rows: &[Vec<bool>]| -> Matrix {
                    Matrix::from_rows(
                        &rows
                            .iter()
                            .map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect())
                            .collect::<Vec<_>>(),
                    )
                    .unwrap()
                };
                let judge =
                    RelevanceJudge::new(to_matrix(&query_labels), to_matrix(&db_labels)).unwrap();

                let rankings: Vec<RankedResult> = (0..queries)
                    .map(|q| search(&db, qs.item(q), n).unwrap())
                    .collect();
                let naive_rankings: Vec<Vec<(usize, u32)>> = (0..queries)
                    .map(|q| naive::rank(&db_bits, &query_bits[q]))
                    .collect();

                // The rankings themselves must agree.
                for (a, b) in rankings.iter().zip(&naive_rankings) {
                    let a: Vec<(usize, u32)> = a.iter().map(|h| (h.index, h.distance)).collect();
                    assert_eq!(&a, b);
                }

                // MAP at several cutoffs.
                for r in [1usize, 3, n, 50] {
                    let expected = naive::map(&naive_rankings, &query_labels, &db_labels, r);
                    match (map_at_r(&rankings, &judge, r), expected) {
                        (Ok(out), Some(want)) => {
                            assert!(
                                (out.mean - want).abs() <= 1e-12,
                                "map@{r}: {} vs naive {want}",
                                out.mean
                            );
                        }
                        (Err(_), None) => {}
                        (got, want) => panic!("map@{r} eligibility mismatch: {got:?} vs {want:?}"),
                    }
                }

                // PR curve (skip when no query is eligible).
                let naive_pr = naive::pr_curve(&naive_rankings, &query_labels, &db_labels, bits);
                match precision_recall_curve(&rankings, &judge, bits) {
                    Ok(curve) => {
                        assert_eq!(curve.points().len(), naive_pr.len());
                        for (a, b) in curve.points().iter().zip(&naive_pr) {
                            assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
                        }
                    }
                    Err(_) => assert!(naive_pr.is_empty()),
                }

                // precision@top-R over every cutoff in range.
                let grid: Vec<usize> = (1..=n).collect();
                let curve = precision_at_top_r(&rankings, &judge, &grid).unwrap();
                for (point, &r) in curve.points().iter().zip(&grid) {
                    let want = naive::precision_at(&naive_rankings, &query_labels, &db_labels, r);
                    assert!((point.1 - want).abs() <= 1e-12, "p@{r}");
                }
            }
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "[PASS] criterion 4: rankings, MAP@R, PR and P@top-R match brute force on \
         {instances} instances (n<=10, b<=4) plus the pinned AP hand case, {elapsed:.2?}"
    );
}

// --- shared end-to-end fixture (criteria 5-7) ---------------------------------

struct VariantRun {
    output: TrainOutput,
    map_i2t: f64,
    map_t2i: f64,
    train_secs: f64,
}

struct EndToEnd {
    dataset: BimodalDataset,
    split: SplitSpec,
    untrained: (f64, f64),
    chn: VariantRun,
    chn_q: VariantRun,
    chn_c: VariantRun,
    chn_w: VariantRun,
}

fn reference_config() -> TrainConfig {
    let mut config = TrainConfig::new(16, 50);
    config.seed = 7;
    config.lambda = 1.0;
    config.gamma = 0.3;
    config.learning_rate = 0.01;
    config.momentum = 0.9;
    config.batch_size = 64;
    config
}

fn end_to_end() -> &'static EndToEnd {
    static FIXTURE: OnceLock<EndToEnd> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dataset = generate_synthetic(&SyntheticConfig::new(500, 64, 128, 5, 0.1, 1)).unwrap();
        let split = make_split(dataset.len(), 75, 75, 1).unwrap();

        let run = |variant: Variant| -> VariantRun {
            let started = Instant::now();
            let mut config = reference_config();
            config.variant = variant;
            let output = train(&dataset, &split, &config).unwrap();
            let train_secs = started.elapsed().as_secs_f64();
            let (map_i2t, map_t2i) = cross_modal_map(
                &output.image_net,
                &output.text_net,
                &dataset,
                &split.val,
                &split.train,
                50,
            )
            .unwrap();
            VariantRun {
                output,
                map_i2t,
                map_t2i,
                train_secs,
            }
        };

        let chn = run(Variant::Chn);
        let chn_q = run(Variant::ChnQ);
        let chn_c = run(Variant::ChnC);
        let chn_w = run(Variant::ChnW);

        let mut zero = reference_config();
        zero.epochs = 0;
        let base = train(&dataset, &split, &zero).unwrap();
        let untrained = cross_modal_map(
            &base.image_net,
            &base.text_net,
            &dataset,
            &split.val,
            &split.train,
            50,
        )
        .unwrap();

        EndToEnd {
            dataset,
            split,
            untrained,
            chn,
            chn_q,
            chn_c,
            chn_w,
        }
    })
}

// --- criterion 5 -------------------------------------------------------------

#[test]
fn criterion_5_end_to_end_synthetic_retrieval() {
    let fx = end_to_end();
    assert!(
        fx.chn.map_i2t >= 0.95 && fx.chn.map_t2i >= 0.95,
        "trained MAP ({:.4}, {:.4}) below 0.95",
        fx.chn.map_i2t,
        fx.chn.map_t2i
    );
    assert!(
        fx.untrained.0 <= 0.35 && fx.untrained.1 <= 0.35,
        "untrained MAP ({:.4}, {:.4}) above 0.35",
        fx.untrained.0,
        fx.untrained.1
    );
    // Loss decreases monotonically over the first 10 epochs.
    let totals: Vec<f64> = fx
        .chn
        .output
        .history
        .epochs
        .iter()
        .take(10)
        .map(|e| e.loss.total)
        .collect();
    assert!(
        totals.windows(2).all(|w| w[1] < w[0]),
        "loss not strictly decreasing: {totals:?}"
    );
    assert!(
        fx.chn.train_secs < 300.0,
        "training took {:.1}s",
        fx.chn.train_secs
    );
    println!(
        "[PASS] criterion 5: trained MAP@50 ({:.4}, {:.4}) >= 0.95, untrained \
         ({:.4}, {:.4}) <= 0.35, loss strictly decreasing, {:.1}s",
        fx.chn.map_i2t, fx.chn.map_t2i, fx.untrained.0, fx.untrained.1, fx.chn.train_secs
    );
}

// --- criterion 6 -------------------------------------------------------------

#[test]
fn criterion_6_ablation_trend() {
    let fx = end_to_end();
    let mean = |run: &VariantRun| (run.map_i2t + run.map_t2i) / 2.0;

    // CHN >= CHN-Q in both retrieval directions.
    assert!(
        fx.chn.map_i2t >= fx.chn_q.map_i2t && fx.chn.map_t2i >= fx.chn_q.map_t2i,
        "CHN ({:.4}, {:.4}) vs CHN-Q ({:.4}, {:.4})",
        fx.chn.map_i2t,
        fx.chn.map_t2i,
        fx.chn_q.map_i2t,
        fx.chn_q.map_t2i
    );
    // CHN-Q > CHN-W strictly.
    assert!(
        fx.chn_q.map_i2t > fx.chn_w.map_i2t && fx.chn_q.map_t2i > fx.chn_w.map_t2i,
        "CHN-Q ({:.4}, {:.4}) vs CHN-W ({:.4}, {:.4})",
        fx.chn_q.map_i2t,
        fx.chn_q.map_t2i,
        fx.chn_w.map_i2t,
        fx.chn_w.map_t2i
    );
    // CHN >= CHN-C.
    assert!(
        fx.chn.map_i2t >= fx.chn_c.map_i2t && fx.chn.map_t2i >= fx.chn_c.map_t2i,
        "CHN ({:.4}, {:.4}) vs CHN-C ({:.4}, {:.4})",
        fx.chn.map_i2t,
        fx.chn.map_t2i,
        fx.chn_c.map_i2t,
        fx.chn_c.map_t2i
    );
    // The cross-modal term is worth at least 0.2 MAP.
    let margin = mean(&fx.chn) - mean(&fx.chn_w);
    assert!(margin >= 0.2, "CHN - CHN-W margin {margin:.4} below 0.2");

    let total_secs =
        fx.chn.train_secs + fx.chn_q.train_secs + fx.chn_c.train_secs + fx.chn_w.train_secs;
    assert!(total_secs < 900.0, "four runs took {total_secs:.1}s");
    println!(
        "[PASS] criterion 6: CHN {:.4} >= CHN-Q {:.4} > CHN-W {:.4}, CHN >= CHN-C {:.4}, \
         margin {margin:.4} >= 0.2, 4 runs in {total_secs:.1}s",
        mean(&fx.chn),
        mean(&fx.chn_q),
        mean(&fx.chn_w),
        mean(&fx.chn_c)
    );
}

// --- criterion 7 -------------------------------------------------------------

/// Mean |cos(u_i, v_j) - cos(h_i, h_j)| over validation cross-modal pairs.
fn binarization_gap(run: &VariantRun, dataset: &BimodalDataset, split: &SplitSpec) -> f64 {
    let (u, hu) = encode(
        &run.output.image_net,
        &BimodalDataset::select(&dataset.image_features, &split.val),
    )
    .unwrap();
    let (v, hv) = encode(
        &run.output.text_net,
        &BimodalDataset::select(&dataset.text_features, &split.val),
    )
    .unwrap();
    let mut gap = 0.0;
    let mut count = 0usize;
    for i in 0..u.rows() {
        for j in (i + 1)..u.rows() {
            let continuous = cosine(u.row(i), v.row(j)).unwrap();
            let binary = cosine(&hu.unpack(i), &hv.unpack(j)).unwrap();
            gap += (continuous - binary).abs();
            count += 1;
        }
    }
    gap / count as f64
}

#[test]
fn criterion_7_quantization_gap_reduction() {
    let fx = end_to_end();
    let gap_chn = binarization_gap(&fx.chn, &fx.dataset, &fx.split);
    let gap_chn_q = binarization_gap(&fx.chn_q, &fx.dataset, &fx.split);
    assert!(
        gap_chn < gap_chn_q,
        "cosine quantization loss did not shrink the binarization gap: \
         CHN {gap_chn:.4} vs CHN-Q {gap_chn_q:.4}"
    );
    println!(
        "[PASS] criterion 7: mean |cos(u,v) - cos(h,h')| = {gap_chn:.4} (CHN) < \
         {gap_chn_q:.4} (CHN-Q)"
    );
}

// --- criterion 8 -------------------------------------------------------------

fn sample_pairs(rows: usize, count: usize, seed: u64) -> SimilaritySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let a = rng.random_range(0..rows);
        let b = rng.random_range(0..rows);
        if a == b {
            continue;
        }
        let (i, j) = (a.min(b), a.max(b));
        if seen.insert((i, j)) {
            pairs.push((i, j, if rng.random::<bool>() { 1 } else { -1 }));
        }
    }
    SimilaritySet::new(pairs).unwrap()
}

#[test]
fn criterion_8_pairwise_work_scales_linearly() {
    // The per-epoch stage that varies with |S| is the loss + residual
    // evaluation; forward/backward costs depend on the batch, which is held
    // fixed here. Time that stage at |S| in {1k, 2k, 4k}; doubling |S| must
    // land between 1.5x and 2.5x.
    let rows = 256;
    let bits = 16;
    let u = sample_interior_embeddings(rows, bits, 31);
    let v = sample_interior_embeddings(rows, bits, 32);

    let time_stage = |pairs: &SimilaritySet| -> f64 {
        let mut best = f64::INFINITY;
        for _ in 0..15 {
            let started = Instant::now();
            let loss = joint_loss(&u, &v, pairs, 1.0, 0.1).unwrap();
            let residuals = output_residuals(&u, &v, pairs, 1.0, 0.1).unwrap();
            let elapsed = started.elapsed().as_secs_f64();
            assert!(loss.total.is_finite());
            assert!(residuals.image.is_finite());
            best = best.min(elapsed);
        }
        best
    };

    let sizes = [1_000usize, 2_000, 4_000];
    let times: Vec<f64> = sizes
        .iter()
        .map(|&count| time_stage(&sample_pairs(rows, count, 33)))
        .collect();

    let r1 = times[1] / times[0];
    let r2 = times[2] / times[1];
    assert!(
        (1.5..=2.5).contains(&r1) && (1.5..=2.5).contains(&r2),
        "doubling ratios {r1:.2}, {r2:.2} outside [1.5, 2.5] (times {times:?})"
    );
    println!(
        "[PASS] criterion 8: pairwise stage times {:.3}ms / {:.3}ms / {:.3}ms, \
         doubling ratios {r1:.2} and {r2:.2}",
        times[0] * 1e3,
        times[1] * 1e3,
        times[2] * 1e3
    );
}

// --- criterion 9 -------------------------------------------------------------

#[test]
fn criterion_9_cli_outputs_are_deterministic() {
    use std::process::Command;
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_chn"))
            .current_dir(d)
            .args(args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "chn {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    run(&[
        "gen-data",
        "--n",
        "150",
        "--dx",
        "16",
        "--dy",
        "24",
        "--classes",
        "3",
        "--seed",
        "1",
        "--out",
        "data",
    ]);
    for out_dir in ["run1", "run2"] {
        run(&[
            "train",
            "--data",
            "data",
            "--bits",
            "8",
            "--epochs",
            "3",
            "--image-layer-dims",
            "16",
            "--text-layer-dims",
            "16",
            "--seed",
            "7",
            "--out",
            out_dir,
        ]);
    }
    for file in ["image.chnm", "text.chnm", "history.csv"] {
        let a = std::fs::read(d.join("run1").join(file)).unwrap();
        let b = std::fs::read(d.join("run2").join(file)).unwrap();
        assert_eq!(a, b, "{file} not byte-identical");
    }

    run(&[
        "encode",
        "--model",
        "run1/image.chnm",
        "--features",
        "data/image_features.tsv",
        "--out",
        "img.chnb",
    ]);
    run(&[
        "encode",
        "--model",
        "run1/text.chnm",
        "--features",
        "data/text_features.tsv",
        "--out",
        "txt.chnb",
    ]);
    for results in ["r1.tsv", "r2.tsv"] {
        run(&[
            "search",
            "--db",
            "txt.chnb",
            "--queries",
            "img.chnb",
            "--r",
            "10",
            "--out",
            results,
        ]);
    }
    let a = std::fs::read(d.join("r1.tsv")).unwrap();
    let b = std::fs::read(d.join("r2.tsv")).unwrap();
    assert_eq!(a, b, "search results not identical");

    println!(
        "[PASS] criterion 9: repeated train runs byte-identical (models + history), \
         repeated search identical"
    );
}

/// With an active quantization term, trained embeddings sit near hypercube
/// vertices: cos(|u|, 1) averages at least 0.9 per item.
#[test]
fn quantization_loss_drives_embeddings_toward_vertices() {
    use chn_core::losses::quant_cosine;
    let fx = end_to_end();
    for (net, features) in [
        (&fx.chn.output.image_net, &fx.dataset.image_features),
        (&fx.chn.output.text_net, &fx.dataset.text_features),
    ] {
        let (u, _) = encode(net, &BimodalDataset::select(features, &fx.split.val)).unwrap();
        let mean: f64 =
            (0..u.rows()).map(|i| quant_cosine(u.row(i))).sum::<f64>() / u.rows() as f64;
        assert!(mean >= 0.9, "mean cos(|u|, 1) = {mean:.4}");
    }
}

#[test]
fn encode_codes_match_binarized_embeddings() {
    let fx = end_to_end();
    let (u, codes) = encode(
        &fx.chn.output.image_net,
        &BimodalDataset::select(&fx.dataset.image_features, &fx.split.val),
    )
    .unwrap();
    assert_eq!(binarize(&u).unwrap(), codes);
    for i in 0..codes.len() {
        let d = hamming(codes.item(i), codes.item(i), codes.bits()).unwrap();
        assert_eq!(d, 0);
    }
    let hits = search(&codes, codes.item(0), 1).unwrap();
    assert_eq!(
        hits[0],
        Neighbor {
            index: 0,
            distance: 0
        }
    );
}
