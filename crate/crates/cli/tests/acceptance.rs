//! Acceptance gate: one test per criterion. Every test prints one
//! "acceptance criterion NN (title): pass|fail" line before asserting, so a
//! full run (`cargo test --test acceptance -- --nocapture`) reads as a
//! checklist. Tolerances are pinned here and nowhere else.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{array, s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zeroseg_core::dpgmm::{self, niw, DpgmmConfig};
use zeroseg_core::eval::abx::{self, AbxItem, SpeakerCondition};
use zeroseg_core::eval::dtw::dtw_distance;
use zeroseg_core::eval::{self, reports, PhoneSpan, ReferenceAlignment};
use zeroseg_core::features::{FeatureArchive, FeatureMatrix};
use zeroseg_core::labeling::{self, LabelSequence};
use zeroseg_core::linalg;
use zeroseg_core::mtlnet::{MtlNetwork, TaskSpec};
use zeroseg_core::segclust;
use zeroseg_core::segmentation::{fuse_boundaries, BoundarySet, Posteriorgram};
use zeroseg_core::syncorpus::{generate, CorpusSpec};

/// Collects named sub-checks and prints the verdict line before asserting,
/// so the checklist stays complete even when a criterion fails.
struct Criterion {
    n: u32,
    title: &'static str,
    failures: Vec<String>,
}

impl Criterion {
    fn new(n: u32, title: &'static str) -> Self {
        Criterion {
            n,
            title,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, what: &str, ok: bool) {
        if !ok {
            self.failures.push(what.to_string());
        }
    }

    fn finish(self) {
        let verdict = if self.failures.is_empty() {
            "pass"
        } else {
            "fail"
        };
        println!(
            "acceptance criterion {:02} ({}): {verdict}",
            self.n, self.title
        );
        assert!(
            self.failures.is_empty(),
            "criterion {:02} ({}) failed: {}",
            self.n,
            self.title,
            self.failures.join("; ")
        );
    }
}

fn zeroseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_zeroseg"))
        .args(args)
        .env("ZEROSEG_LOG", "quiet")
        .output()
        .expect("binary runs")
}

#[test]
fn criterion_01_dpgmm_recovery() {
    let mut c = Criterion::new(1, "mixture recovery on separated Gaussians");
    let mut spec = CorpusSpec::separated(3, 1, 10, 2, 41).unwrap();
    spec.phones_per_utterance = (5, 5);
    spec.frames_per_phone = (12, 12);
    let corpus = generate(&spec).unwrap();
    c.check(
        "corpus has 600 frames",
        corpus.features.total_frames() == 600,
    );

    let config = DpgmmConfig {
        alpha: 1.0,
        prior: None,
        iterations: 100,
        seed: 7,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let (_, labels) = pool
        .install(|| dpgmm::run(&corpus.features, &config))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let purity = eval::purity(&labels, &corpus.alignment).unwrap();
    c.check(
        &format!("purity {:.3} >= 0.95", purity.overall),
        purity.overall >= 0.95,
    );
    c.check(
        &format!("single-threaded runtime {secs:.1}s < 60s"),
        secs < 60.0,
    );
    c.finish();
}

#[test]
fn criterion_02_niw_posterior_identity() {
    let mut c = Criterion::new(2, "posterior with no data equals the prior");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = Array2::from_shape_fn((40, 3), |_| rng.gen_range(-2.0..2.0));
    let prior = dpgmm::default_prior(&data.view());
    let post = niw::posterior(&prior, &niw::SuffStats::empty(3));
    c.check("mean m", post.m == prior.m);
    c.check("scale S", post.s == prior.s);
    c.check("kappa", post.kappa == prior.kappa);
    c.check("nu", post.nu == prior.nu);
    c.finish();
}

#[test]
fn criterion_03_parallel_determinism() {
    let mut c = Criterion::new(3, "label files identical across thread counts");
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let corpus = dir.join("corpus");
    let out = zeroseg(&[
        "gen-corpus",
        "--out",
        corpus.to_str().unwrap(),
        "--utterances",
        "12",
        "--seed",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    for threads in ["1", "8"] {
        let out = zeroseg(&[
            "dpgmm",
            "--features",
            corpus.join("features.feat").to_str().unwrap(),
            "--model",
            dir.join(format!("t{threads}.dpgm")).to_str().unwrap(),
            "--labels",
            dir.join(format!("t{threads}.tsv")).to_str().unwrap(),
            "--iterations",
            "40",
            "--seed",
            "7",
            "--threads",
            threads,
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let labels_1 = std::fs::read(dir.join("t1.tsv")).unwrap();
    let labels_8 = std::fs::read(dir.join("t8.tsv")).unwrap();
    c.check("label files byte-identical", labels_1 == labels_8);
    let model_1 = std::fs::read(dir.join("t1.dpgm")).unwrap();
    let model_8 = std::fs::read(dir.join("t8.dpgm")).unwrap();
    c.check("model files byte-identical", model_1 == model_8);
    c.finish();
}

#[test]
fn criterion_04_label_filtering() {
    let mut c = Criterion::new(4, "filtering keeps the requested mass");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base: Vec<LabelSequence> = (0..50)
        .map(|u| {
            let labels = (0..40)
                .map(|_| {
                    let r: f64 = rng.gen();
                    (r * r * 12.0) as usize
                })
                .collect();
            LabelSequence::new(format!("u{u:02}"), labels)
        })
        .collect();
    let total: usize = base.iter().map(LabelSequence::len).sum();

    let mut prev_kept: Option<BTreeSet<usize>> = None;
    for step in 0..8 {
        let p = 0.60 + 0.05 * step as f64;
        let mut seqs = base.clone();
        let kept = labeling::filter_labels(&mut seqs, p).unwrap();
        let unmasked: usize = seqs
            .iter()
            .map(|s| s.removed_mask.iter().filter(|&&m| !m).count())
            .sum();
        c.check(
            &format!("retained fraction >= {p:.2}"),
            unmasked as f64 / total as f64 >= p - 1e-12,
        );
        if let Some(prev) = &prev_kept {
            c.check(
                &format!("kept clusters nest at {p:.2}"),
                prev.is_subset(&kept),
            );
        }
        prev_kept = Some(kept);
    }

    let mut seqs = base.clone();
    let kept = labeling::filter_labels(&mut seqs, 1.0).unwrap();
    c.check("P=1 removes nothing", seqs == base);
    let all: BTreeSet<usize> = base.iter().flat_map(|s| s.labels.iter().copied()).collect();
    c.check("P=1 keeps every cluster", kept == all);
    c.finish();
}

#[test]
fn criterion_05_collapsing() {
    let mut c = Criterion::new(5, "label runs collapse to tokens");
    let seq = LabelSequence::new("u", vec![1, 3, 3, 3, 7, 10, 10]);
    let t = labeling::collapse_to_transcription(&seq);
    let labels: Vec<usize> = t.tokens.iter().map(|tok| tok.label).collect();
    c.check("token labels are 1,3,7,10", labels == vec![1, 3, 7, 10]);
    let spans: Vec<(usize, usize)> = t
        .tokens
        .iter()
        .map(|tok| (tok.start_frame, tok.end_frame))
        .collect();
    c.check(
        "token spans tile the sequence",
        spans == vec![(0, 0), (1, 3), (4, 4), (5, 6)],
    );
    c.finish();
}

#[test]
fn criterion_06_boundary_fusion() {
    let mut c = Criterion::new(6, "fusion drops and merges close boundaries");
    let set = |b: &[u32]| BoundarySet::new("u", b.to_vec());
    let drop = fuse_boundaries(&[set(&[100, 200]), set(&[100, 210])], 10, 30).unwrap();
    c.check(
        "boundaries 10ms apart collapse to the earlier one",
        drop.boundaries_ms == vec![100, 200],
    );
    let mid = fuse_boundaries(&[set(&[100, 200]), set(&[100, 220])], 10, 30).unwrap();
    c.check(
        "boundaries 20ms apart fuse to the midpoint",
        mid.boundaries_ms == vec![100, 210],
    );

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ok = true;
    for _ in 0..1000 {
        let n_sets = rng.gen_range(1..=4);
        let sets: Vec<BoundarySet> = (0..n_sets)
            .map(|_| {
                let mut b: Vec<u32> = (0..rng.gen_range(0..20))
                    .map(|_| rng.gen_range(1..100) * 10)
                    .collect();
                b.sort_unstable();
                b.dedup();
                set(&b)
            })
            .collect();
        let out = fuse_boundaries(&sets, 10, 30).unwrap();
        ok &= out.boundaries_ms.windows(2).all(|w| w[1] - w[0] >= 30);
    }
    c.check("no fused gap under 30ms across 1000 random instances", ok);
    c.finish();
}

#[test]
fn criterion_07_purity_oracle() {
    let mut c = Criterion::new(7, "purity matches a brute-force tally");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut exact = true;
    for _ in 0..100 {
        let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..6)).collect();
        let seq = LabelSequence::new("u", labels.clone());
        let mut spans = Vec::new();
        let mut at = 0usize;
        while at < 200 {
            let len = rng.gen_range(3..=15).min(200 - at);
            spans.push(PhoneSpan {
                phone: rng.gen_range(0..5),
                start_frame: at,
                end_frame: at + len - 1,
            });
            at += len;
        }
        let alignment = ReferenceAlignment {
            utterances: BTreeMap::from([("u".to_string(), spans.clone())]),
            inventory: (0..5).collect(),
            silence_phones: BTreeSet::new(),
        };
        let report = eval::purity(&[seq], &alignment).unwrap();

        let mut tally: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
        for (f, &label) in labels.iter().enumerate() {
            let phone = spans
                .iter()
                .find(|s| s.start_frame <= f && f <= s.end_frame)
                .unwrap()
                .phone;
            *tally.entry(label).or_default().entry(phone).or_insert(0) += 1;
        }
        let majority: u64 = tally
            .values()
            .map(|m| m.values().copied().max().unwrap())
            .sum();
        exact &= report.overall == majority as f64 / 200.0 && report.scored_frames == 200;
    }
    c.check("overall purity exact on 100 random instances", exact);
    c.finish();
}

fn random_distribution(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let mut p = Array1::from_shape_fn(d, |_| rng.gen_range(0.05..1.0));
    let sum = p.sum();
    p /= sum;
    p
}

#[test]
fn criterion_08_kl_properties() {
    let mut c = Criterion::new(8, "symmetric KL is a premetric");
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut symmetric = true;
    let mut nonnegative = true;
    for _ in 0..10_000 {
        let d = rng.gen_range(2..=8);
        let p = random_distribution(&mut rng, d);
        let q = random_distribution(&mut rng, d);
        let dpq = eval::symmetric_kl(&p.view(), &q.view()).unwrap();
        let dqp = eval::symmetric_kl(&q.view(), &p.view()).unwrap();
        symmetric &= dpq == dqp;
        nonnegative &= dpq >= 0.0;
    }
    c.check("symmetry exact on 10^4 pairs", symmetric);
    c.check("non-negative on 10^4 pairs", nonnegative);

    let mut self_small = true;
    for _ in 0..100 {
        let d = rng.gen_range(2..=8);
        let p = random_distribution(&mut rng, d);
        self_small &= eval::symmetric_kl(&p.view(), &p.view()).unwrap() <= 1e-12;
    }
    c.check("D(P,P) <= 1e-12", self_small);

    let p = array![0.5, 0.5];
    let q = array![0.25, 0.75];
    let got = eval::symmetric_kl(&p.view(), &q.view()).unwrap();
    let direct = 0.5 * (0.5f64 / 0.25).ln()
        + 0.5 * (0.5f64 / 0.75).ln()
        + 0.25 * (0.25f64 / 0.5).ln()
        + 0.75 * (0.75f64 / 0.5).ln();
    c.check(
        "hand-computed value within 1e-10",
        (got - direct).abs() <= 1e-10,
    );
    c.finish();
}

/// Segment posteriorgram whose rows only touch phones inside one block, so
/// the phone affinity graph is exactly block-diagonal.
fn block_gram(blocks: usize, rows_per_block: usize) -> Posteriorgram {
    let phones = 2 * blocks;
    let mut rows = Array2::zeros((blocks * rows_per_block, phones));
    for b in 0..blocks {
        for i in 0..rows_per_block {
            let lead = 0.4 + 0.05 * (i % 3) as f64;
            rows[[b * rows_per_block + i, 2 * b]] = lead;
            rows[[b * rows_per_block + i, 2 * b + 1]] = 1.0 - lead;
        }
    }
    Posteriorgram::single_source(rows).unwrap()
}

#[test]
fn criterion_09_spectral_block_recovery() {
    let mut c = Criterion::new(9, "spectral clustering recovers blocks");
    for blocks in [2usize, 5] {
        let gram = block_gram(blocks, 4);
        let assignment = segclust::spectral_cluster(&gram, blocks, 11).unwrap();
        let got = assignment.co_membership();
        let phones = 2 * blocks;
        let mut ok = true;
        for i in 0..phones {
            for j in 0..phones {
                ok &= got[[i, j]] == (i / 2 == j / 2);
            }
        }
        c.check(&format!("{blocks}-block co-membership exact"), ok);
    }

    let gram = block_gram(5, 4);
    let (l, _active) = segclust::phone_laplacian(&gram);
    let (values, vectors) = linalg::jacobi_eigen(&l.view());
    let mut max_residual = 0.0f64;
    for k in 0..values.len() {
        let v = vectors.column(k);
        let r = l.dot(&v) - values[k] * &v.to_owned();
        max_residual = max_residual.max(r.dot(&r).sqrt());
    }
    c.check(
        &format!("eigenpair residuals {max_residual:.2e} <= 1e-8"),
        max_residual <= 1e-8,
    );
    c.finish();
}

#[test]
fn criterion_10_abx() {
    let mut c = Criterion::new(10, "ABX chance level, separation, DTW identity");

    // Category-blind: random features with arbitrary category labels.
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut archive = FeatureArchive::new();
    let mut items = Vec::new();
    for (cat, phone) in [(0usize, 1usize), (1, 2)] {
        for i in 0..25 {
            let utt = format!("c{cat}i{i:02}");
            let frames = Array2::from_shape_fn((8, 4), |_| rng.gen::<f64>());
            archive
                .push(FeatureMatrix::new(utt.clone(), frames).unwrap())
                .unwrap();
            items.push(AbxItem {
                utterance_id: utt,
                onset_frame: 0,
                offset_frame: 7,
                center: phone,
                left: 0,
                right: 3,
                speaker_id: "s0".into(),
            });
        }
    }
    let blind = abx::abx_error(&items, &archive, SpeakerCondition::Within).unwrap();
    c.check(
        &format!("{} triples >= 10^4", blind.total_triples),
        blind.total_triples >= 10_000,
    );
    let aggregate = blind.aggregate.unwrap();
    c.check(
        &format!("category-blind error {aggregate:.3} within 0.50 +/- 0.03"),
        (aggregate - 0.5).abs() <= 0.03,
    );

    // Separable corpus with speaker offsets strong enough to matter across
    // speakers while leaving within-speaker angles clean.
    let mut spec = CorpusSpec::separated(3, 2, 60, 3, 53).unwrap();
    spec.speaker_offsets[1] = array![0.0, 9.0, 0.0];
    let corpus = generate(&spec).unwrap();
    let within = abx::abx_error(&corpus.items, &corpus.features, SpeakerCondition::Within)
        .unwrap()
        .aggregate
        .unwrap();
    let across = abx::abx_error(&corpus.items, &corpus.features, SpeakerCondition::Across)
        .unwrap()
        .aggregate
        .unwrap();
    c.check(
        &format!("within-speaker error {within:.4} < 0.01"),
        within < 0.01,
    );
    c.check(
        &format!("across {across:.4} > within {within:.4}"),
        across > within,
    );

    let a = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
    let self_distance = dtw_distance(&a.view(), &a.view()).unwrap();
    c.check("DTW self-distance is exactly zero", self_distance == 0.0);
    c.finish();
}

fn combined_loss(
    net: &MtlNetwork,
    x: &Array2<f64>,
    yp: &[usize],
    ys: &[usize],
    lambda: f64,
) -> f64 {
    net.task_loss(0, &x.view(), yp).unwrap() - lambda * net.task_loss(1, &x.view(), ys).unwrap()
}

#[test]
fn criterion_11_network_gradients() {
    let mut c = Criterion::new(11, "gradients match finite differences");
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let h = 1e-5;
    let mut max_rel = 0.0f64;

    for t in 0..10u64 {
        let din = rng.gen_range(2..=4);
        let widths = vec![rng.gen_range(3..=5), rng.gen_range(2..=4)];
        let bottleneck = rng.gen_range(0..widths.len());
        let classes_p = rng.gen_range(2..=4);
        let classes_s = rng.gen_range(2..=3);
        let lambda = if t % 2 == 0 { 0.0 } else { 0.6 };
        let specs = [
            TaskSpec {
                name: "p".into(),
                classes: classes_p,
                weight: 0.7,
            },
            TaskSpec {
                name: "s".into(),
                classes: classes_s,
                weight: 1.3,
            },
        ];
        let net = MtlNetwork::new(din, &widths, bottleneck, &specs, 1000 + t).unwrap();
        let n = rng.gen_range(3..=6);
        let x = Array2::from_shape_fn((n, din), |_| rng.gen_range(-1.0..1.0));
        let yp: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes_p)).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes_s)).collect();

        let (gp, _) = net.task_gradients(0, &x.view(), &yp).unwrap();
        let (gs, _) = net.task_gradients(1, &x.view(), &ys).unwrap();

        let mut rel = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((analytic - fd).abs() / denom);
        };

        // Shared layers against the combined objective (plain when λ=0).
        for l in 0..net.shared.len() {
            for idx in 0..net.shared[l].w.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.shared[l].w.as_slice_mut().unwrap()[idx] += h;
                minus.shared[l].w.as_slice_mut().unwrap()[idx] -= h;
                let fd = (combined_loss(&plus, &x, &yp, &ys, lambda)
                    - combined_loss(&minus, &x, &yp, &ys, lambda))
                    / (2.0 * h);
                let analytic = gp.shared[l].0.as_slice().unwrap()[idx]
                    - lambda * gs.shared[l].0.as_slice().unwrap()[idx];
                rel(analytic, fd);
            }
            for idx in 0..net.shared[l].b.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.shared[l].b[idx] += h;
                minus.shared[l].b[idx] -= h;
                let fd = (combined_loss(&plus, &x, &yp, &ys, lambda)
                    - combined_loss(&minus, &x, &yp, &ys, lambda))
                    / (2.0 * h);
                let analytic = gp.shared[l].1[idx] - lambda * gs.shared[l].1[idx];
                rel(analytic, fd);
            }
        }

        // Each head against its own weighted loss.
        for (task, grad, labels) in [(0usize, &gp, &yp), (1, &gs, &ys)] {
            for idx in 0..net.heads[task].layer.w.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.heads[task].layer.w.as_slice_mut().unwrap()[idx] += h;
                minus.heads[task].layer.w.as_slice_mut().unwrap()[idx] -= h;
                let fd = (plus.task_loss(task, &x.view(), labels).unwrap()
                    - minus.task_loss(task, &x.view(), labels).unwrap())
                    / (2.0 * h);
                rel(grad.head.0.as_slice().unwrap()[idx], fd);
            }
            for idx in 0..net.heads[task].layer.b.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.heads[task].layer.b[idx] += h;
                minus.heads[task].layer.b[idx] -= h;
                let fd = (plus.task_loss(task, &x.view(), labels).unwrap()
                    - minus.task_loss(task, &x.view(), labels).unwrap())
                    / (2.0 * h);
                rel(grad.head.1[idx], fd);
            }
        }
    }
    c.check(
        &format!("max relative error {max_rel:.2e} <= 1e-4 over 10 nets"),
        max_rel <= 1e-4,
    );
    c.finish();
}

#[test]
fn criterion_12_lambda_zero_collapse() {
    let mut c = Criterion::new(12, "zero-weight adversary matches plain training");
    let specs = [
        TaskSpec {
            name: "p".into(),
            classes: 3,
            weight: 1.0,
        },
        TaskSpec {
            name: "s".into(),
            classes: 2,
            weight: 1.0,
        },
    ];
    let mut adv = MtlNetwork::new(4, &[6, 3], 1, &specs, 99).unwrap();
    let mut plain = adv.clone();
    let lr = 0.05;
    let lambda = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut max_dev = 0.0f64;

    for _ in 0..60 {
        let n = rng.gen_range(3..=6);
        let x = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let yp: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();

        plain.apply_task_batch(0, &x.view(), &yp, lr).unwrap();

        let (gp, _) = adv.task_gradients(0, &x.view(), &yp).unwrap();
        let (gs, _) = adv.task_gradients(1, &x.view(), &ys).unwrap();
        for (l, layer) in adv.shared.iter_mut().enumerate() {
            let gw = &gp.shared[l].0 - &(lambda * &gs.shared[l].0);
            let gb = &gp.shared[l].1 - &(lambda * &gs.shared[l].1);
            layer.w.scaled_add(-lr, &gw);
            layer.b.scaled_add(-lr, &gb);
        }
        adv.heads[0].layer.w.scaled_add(-lr, &gp.head.0);
        adv.heads[0].layer.b.scaled_add(-lr, &gp.head.1);
        adv.heads[1].layer.w.scaled_add(-lr, &gs.head.0);
        adv.heads[1].layer.b.scaled_add(-lr, &gs.head.1);

        for (la, lp) in adv.shared.iter().zip(&plain.shared) {
            for (a, b) in la.w.iter().zip(lp.w.iter()) {
                max_dev = max_dev.max((a - b).abs());
            }
            for (a, b) in la.b.iter().zip(lp.b.iter()) {
                max_dev = max_dev.max((a - b).abs());
            }
        }
    }
    c.check(
        &format!("shared deviation {max_dev:.2e} <= 1e-10 at every step"),
        max_dev <= 1e-10,
    );
    c.finish();
}

#[test]
fn criterion_13_kl_purity_trend() {
    let mut c = Criterion::new(13, "refining a confusion raises purity and delta");
    let spec = CorpusSpec::separated(4, 2, 50, 4, 83).unwrap();
    let corpus = generate(&spec).unwrap();
    let order: Vec<(String, usize)> = corpus
        .features
        .iter()
        .map(|m| (m.utterance_id.clone(), m.num_frames()))
        .collect();
    let phones = eval::frame_phone_map(&order, &corpus.alignment).unwrap();

    // Refined clustering: one unit per phone. Coarse: phones 0 and 1 share
    // a unit; the refinement fixes exactly that confusion.
    let merge = |p: usize| if p == 1 { 0 } else { p };
    let mut refined_seqs = Vec::new();
    let mut coarse_seqs = Vec::new();
    let mut at = 0;
    for (utt, n) in &order {
        let truth: Vec<usize> = phones[at..at + n]
            .iter()
            .map(|p| p.expect("synthetic corpus has no silence"))
            .collect();
        coarse_seqs.push(LabelSequence::new(
            utt.clone(),
            truth.iter().map(|&p| merge(p)).collect(),
        ));
        refined_seqs.push(LabelSequence::new(utt.clone(), truth));
        at += n;
    }
    let purity_refined = eval::purity(&refined_seqs, &corpus.alignment)
        .unwrap()
        .overall;
    let purity_coarse = eval::purity(&coarse_seqs, &corpus.alignment)
        .unwrap()
        .overall;
    c.check(
        &format!("purity rises: {purity_coarse:.3} -> {purity_refined:.3}"),
        purity_refined > purity_coarse,
    );

    let classes = 4;
    let mut rows = Array2::zeros((corpus.features.total_frames(), classes));
    let mut at = 0;
    for m in corpus.features.iter() {
        let p = &corpus.recognizer_posteriors[0][&m.utterance_id];
        rows.slice_mut(s![at..at + p.nrows(), ..]).assign(p);
        at += p.nrows();
    }
    let inventory: BTreeSet<usize> = phones.iter().flatten().copied().collect();
    let centroids = eval::phone_centroids(&rows.view(), &phones, &inventory).unwrap();
    let mean_delta = |units: &[Option<usize>]| {
        let matrix = eval::unit_phone_distances(&rows.view(), units, &phones, &centroids).unwrap();
        eval::relevance_summary(&matrix, &rows.view(), &phones, &centroids)
            .unwrap()
            .mean_delta
            .expect("more than one phone")
    };
    let refined_units: Vec<Option<usize>> = phones.clone();
    let coarse_units: Vec<Option<usize>> = phones.iter().map(|p| p.map(merge)).collect();
    let delta_refined = mean_delta(&refined_units);
    let delta_coarse = mean_delta(&coarse_units);
    c.check(
        &format!("mean delta rises: {delta_coarse:.3} -> {delta_refined:.3}"),
        delta_refined > delta_coarse,
    );
    c.finish();
}

#[test]
fn criterion_14_end_to_end_pipeline() {
    let mut c = Criterion::new(14, "bundled pipeline discovers pure, covering units");
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("demo.cfg");
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");

    let start = Instant::now();
    let out = zeroseg(&[
        "pipeline",
        "--config",
        demo.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    let secs = start.elapsed().as_secs_f64();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    c.check(
        &format!("single-threaded runtime {secs:.0}s < 300s"),
        secs < 300.0,
    );

    let purity = reports::read_summary(&out_dir.join("purity.report")).unwrap();
    let overall: f64 = purity["overall_purity"].parse().unwrap();
    c.check(&format!("unit purity {overall:.3} >= 0.8"), overall >= 0.8);

    let relevance = reports::read_summary(&out_dir.join("relevance.report")).unwrap();
    c.check(
        &format!("phone coverage is {}", relevance["coverage"]),
        relevance["coverage"] == "full",
    );

    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    for stage in [
        "gen-corpus",
        "dpgmm",
        "filter-labels",
        "collapse",
        "fuse-bounds",
        "segclust",
        "mtl-train",
        "adv-train",
        "extract-bnf",
        "eval-purity",
        "eval-kl",
        "eval-abx",
    ] {
        c.check(
            &format!("manifest records stage {stage}"),
            manifest.contains(&format!("[stage {stage}]")),
        );
    }
    c.finish();
}
