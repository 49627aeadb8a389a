//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 1 3 9`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::oracles::*;
use common::{corpus, tiny_pretrain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslwb::dataset::{
    render_sample, split_dataset, Background, ClassSpec, DatasetManifest, ImageRecord, Split, SplitRatios,
    SyntheticCorpusSpec,
};
use sslwb::engine::{finetune, pretrain, pretrain_with, Corpus, FinetuneConfig, Method, PretrainConfig, RunOptions, TraceEvent};
use sslwb::evaluation::{accuracy_from_confusion, evaluate, ConfusionMatrix, ResultsRecord, Setup};
use sslwb::models::{ema_step, ema_update, Model, TeacherState, BACKBONE_PREFIX};
use sslwb::objectives::*;
use sslwb::tensor::Mat;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn m(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
    Mat::from_vec(rows, cols, v.to_vec())
}

fn c1_closed_forms() -> Check {
    let e = 1f64.exp();
    let tol = 1e-6;
    let geo = SimClrBatchRepr::new(m(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])).unwrap();
    let s = (8f64 / 9.0).sqrt();
    let t = (2f64 / 9.0).sqrt();
    let u = (2f64 / 3.0).sqrt();
    let tetra = SimClrBatchRepr::new(m(4, 3, &[0.0, 0.0, 1.0, s, 0.0, -1.0 / 3.0, -t, u, -1.0 / 3.0, -t, -u, -1.0 / 3.0])).unwrap();
    let tau = |v| Temperature::new(v).unwrap();
    let one_hot = |a: usize, k: usize| PseudoLabels { assignments: vec![a], k, epoch_id: 0 }.one_hot();
    let uniform = m(2, 4, &[0.25; 8]);
    let cases: Vec<(&str, f64, f64)> = vec![
        ("nt_xent aligned tau=1", nt_xent(&geo, tau(1.0)).unwrap().loss, -(e / (e + 2.0)).ln()),
        ("nt_xent equal cosines", nt_xent(&tetra, tau(1.0)).unwrap().loss, 3f64.ln()),
        ("nt_xent aligned tau=0.5", nt_xent(&geo, tau(0.5)).unwrap().loss, -(e * e / (e * e + 2.0)).ln()),
        ("dino uniform k=0", dino_loss(&DinoOutputs::new(uniform.clone(), uniform).unwrap()).unwrap().loss, 2.0 * 4f64.ln()),
        (
            "mae unit",
            mae_loss(&MaeTarget::new(2, 2, vec![1.0; 12], vec![0.0; 12], vec![true; 4]).unwrap()).unwrap().loss,
            1.0,
        ),
        ("deepcluster uniform K=3", deepcluster_loss(&one_hot(0, 3), &m(1, 3, &[0.2; 3])).unwrap().loss, 3f64.ln()),
        (
            "deepcluster (2,0)",
            deepcluster_loss(&one_hot(0, 2), &m(1, 2, &[2.0, 0.0])).unwrap().loss,
            -(e * e / (e * e + 1.0)).ln(),
        ),
        ("mixed 0.45/0.55", mixed_loss(1.0, 2.0, MixedWeights::new(0.45, 0.55).unwrap()).unwrap(), 0.45 + 1.1),
    ];
    let mut worst = 0f64;
    for (name, got, want) in &cases {
        ensure!(close(*got, *want, tol), "{name}: {got} vs {want}");
        worst = worst.max((got - want).abs());
    }
    Ok(format!("{} cases, max deviation {worst:.1e}", cases.len()))
}

fn c2_gradients() -> Check {
    const N: usize = 25;
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0f64;
    let mut note = |name: &str, err: f64| -> Result<(), String> {
        worst = worst.max(err);
        if err < 1e-4 {
            Ok(())
        } else {
            Err(format!("{name}: relative error {err:.2e}"))
        }
    };
    for _ in 0..N {
        let (b, d, tau) = (rng.gen_range(2..=4), rng.gen_range(2..=5), rng.gen_range(0.2..1.5));
        let z = random_mat(2 * b, d, &mut rng);
        let lg = nt_xent(&SimClrBatchRepr::new(z.clone()).unwrap(), Temperature::new(tau).unwrap()).unwrap();
        let num = numeric_grad(&z.data, H, |x| nt_xent_ref(&Mat::from_vec(2 * b, d, x.to_vec()), tau));
        note("nt_xent", relative_error(&lg.grad.data, &num))?;

        let (k, c) = (rng.gen_range(0..=4), rng.gen_range(2..=6));
        let teacher = random_dists(2, c, &mut rng);
        let student = random_dists(k + 2, c, &mut rng);
        let lg = dino_loss(&DinoOutputs::new(teacher.clone(), student.clone()).unwrap()).unwrap();
        let num = numeric_grad(&student.data, H, |x| dino_ref(&teacher, &Mat::from_vec(k + 2, c, x.to_vec())));
        note("dino_loss", relative_error(&lg.grad.data, &num))?;

        let (w, h) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let px = w * h;
        let mut mask: Vec<bool> = (0..px).map(|_| rng.gen_bool(0.5)).collect();
        mask[0] = true;
        let p: Vec<f64> = (0..px * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..px * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lg = mae_loss(&MaeTarget::new(w, h, p.clone(), y.clone(), mask.clone()).unwrap()).unwrap();
        let num = numeric_grad(&p, H, |q| {
            let idx: Vec<usize> = (0..px * 3).filter(|i| mask[i / 3]).collect();
            idx.iter().map(|&i| (q[i] - y[i]).powi(2)).sum::<f64>() / idx.len() as f64
        });
        note("mae_loss", relative_error(&lg.grad.data, &num))?;

        let (n, kk) = (rng.gen_range(1..=5), rng.gen_range(2..=6));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kk)).collect();
        let targets = PseudoLabels { assignments: labels.clone(), k: kk, epoch_id: 0 }.one_hot();
        let logits = Mat::from_vec(n, kk, (0..n * kk).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let lg = deepcluster_loss(&targets, &logits).unwrap();
        let num = numeric_grad(&logits.data, H, |x| ce_ref(&Mat::from_vec(n, kk, x.to_vec()), &labels));
        note("deepcluster_loss", relative_error(&lg.grad.data, &num))?;

        let wts = MixedWeights::new(rng.gen_range(0.0..1.0), rng.gen_range(0.01..1.0)).unwrap();
        let at = [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)];
        let num = numeric_grad(&at, H, |x| mixed_loss(x[0], x[1], wts).unwrap());
        note("mixed_loss", relative_error(&[wts.supervised, wts.ssl], &num))?;
    }
    Ok(format!("{N} instances per loss, max relative error {worst:.1e}"))
}

fn c3_kmeans() -> Check {
    let pts = m(4, 1, &[0.0, 0.1, 10.0, 10.1]);
    let km = kmeans(&pts, 2, 50, 0).unwrap();
    let (best, _) = brute_force_wcss(&pts, 2);
    let got = wcss(&pts, &km.labels.assignments, 2);
    ensure!(close(got, best, 1e-12), "four points: wcss {got} vs optimum {best}");
    let mut cents = km.centroids.data.clone();
    cents.sort_by(f64::total_cmp);
    ensure!(close(cents[0], 0.05, 1e-12) && close(cents[1], 10.05, 1e-12), "centroids {cents:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for case in 0..50u64 {
        let n = rng.gen_range(3..=10);
        let d = rng.gen_range(1..=2);
        let k = rng.gen_range(1..=3usize.min(n));
        let pts = random_mat(n, d, &mut rng);
        let km = kmeans(&pts, k, 100, case).unwrap();
        let a = &km.labels.assignments;
        ensure!((0..k).all(|j| a.contains(&j)), "case {case}: empty cluster");
        ensure!(!improving_move_exists(&pts, a, k, 1e-9), "case {case}: a single-point move lowers the objective");
    }
    Ok("global optimum on the 4-point case, 50 local-optimum certificates".into())
}

fn c4_traces() -> Check {
    use TraceEvent::*;
    let data = corpus(3, 8, 0, 16, 4);
    for method in [Method::Simclr, Method::Dino, Method::Mae, Method::Deepcluster, Method::Mixed, Method::Supervised] {
        let cfg = tiny_pretrain(method);
        let out = pretrain_with(&cfg, &data, RunOptions { trace: true, ..RunOptions::default() }).map_err(|e| e.to_string())?;
        let mut block = vec![Forward, Loss, Backward, StudentUpdate];
        if method.has_teacher() {
            block.extend([TeacherUpdate, CenterUpdate]);
        }
        let mut expected = Vec::new();
        for e in 1..=cfg.epochs {
            expected.push(EpochStart(e));
            if method == Method::Deepcluster {
                expected.push(Recluster(e));
            }
            for _ in 0..data.len().div_ceil(cfg.batch_size) {
                expected.extend(block.iter().cloned());
            }
            expected.push(EpochEnd(e));
        }
        ensure!(out.trace == expected, "{method}: trace differs from the expected loop");
        let reclusters = out.trace.iter().filter(|t| matches!(t, Recluster(_))).count();
        let want = if method == Method::Deepcluster { cfg.epochs } else { 0 };
        ensure!(reclusters == want, "{method}: {reclusters} reclusterings");
    }
    Ok("6 methods".into())
}

fn desk_corpus(per_class: usize, seed: u64) -> Corpus {
    corpus(10, per_class, 0, 32, seed)
}

fn c5_label_blindness() -> Check {
    let data = desk_corpus(20, 5);
    let n = data.len();
    let mut permuted = data.clone();
    permuted.labels = (0..n).map(|i| data.labels[(i * 37 + 11) % n]).collect();
    ensure!(permuted.labels != data.labels, "permutation is the identity");
    for method in [Method::Simclr, Method::Dino, Method::Mae, Method::Deepcluster] {
        let cfg = PretrainConfig { method, epochs: 2, batch_size: 32, seed: 3, ..PretrainConfig::default() };
        let a = pretrain(&cfg, &data).map_err(|e| e.to_string())?.checkpoint.to_bytes().unwrap();
        let b = pretrain(&cfg, &permuted).map_err(|e| e.to_string())?.checkpoint.to_bytes().unwrap();
        ensure!(a == b, "{method}: checkpoints differ under label permutation");
    }
    Ok(format!("{n} images, 4 methods bit-equal"))
}

fn c6_mixed_degenerate() -> Check {
    let data = desk_corpus(20, 6);
    let base = PretrainConfig { epochs: 2, batch_size: 32, seed: 4, ..PretrainConfig::default() };
    let run = |method, w: Option<(f64, f64)>| {
        let mut cfg = PretrainConfig { method, ..base.clone() };
        if let Some((a, b)) = w {
            cfg.params.supervised_weight = a;
            cfg.params.ssl_weight = b;
        }
        pretrain(&cfg, &data).map_err(|e| e.to_string())
    };
    let mut worst = 0f64;
    for (w, pure) in [((1.0, 0.0), Method::Supervised), ((0.0, 1.0), Method::Dino)] {
        let mixed = run(Method::Mixed, Some(w))?;
        let single = run(pure, None)?;
        let (a, b) = (mixed.log.losses(), single.log.losses());
        ensure!(a.len() == b.len() && !a.is_empty(), "{pure}: step counts {} vs {}", a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            worst = worst.max((x - y).abs());
            ensure!(close(*x, *y, 1e-6), "{pure} step {i}: {x} vs {y}");
        }
        let (ma, mb) = (mixed.checkpoint.student.subset(BACKBONE_PREFIX), single.checkpoint.student.subset(BACKBONE_PREFIX));
        ensure!(ma == mb, "{pure}: backbones differ");
    }
    Ok(format!("max per-step deviation {worst:.1e}"))
}

fn c7_masked_only() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let (w, h) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let px = w * h;
        let mut mask: Vec<bool> = (0..px).map(|_| rng.gen_bool(0.75)).collect();
        mask[rng.gen_range(0..px)] = true;
        let p: Vec<f64> = (0..px * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..px * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = mae_loss(&MaeTarget::new(w, h, p.clone(), y.clone(), mask.clone()).unwrap()).unwrap().loss;
        let fuzzed: Vec<f64> = p.iter().enumerate().map(|(i, &v)| if mask[i / 3] { v } else { rng.gen_range(-1e3..1e3) }).collect();
        let l = mae_loss(&MaeTarget::new(w, h, fuzzed, y, mask).unwrap()).unwrap().loss;
        ensure!(l == base, "trial {trial}: {l} vs {base}");
    }
    Ok("1000 trials, loss unchanged".into())
}

fn c8_ema() -> Check {
    let student = Model::new(common::tiny_encoder(), 1).unwrap().params;
    let teacher = TeacherState::new(Model::new(common::tiny_encoder(), 2).unwrap().params, 1.0, 4).unwrap();
    ensure!(ema_update(&teacher, &student).unwrap().params == teacher.params, "m = 1 moved the teacher");
    let zero = TeacherState { momentum: 0.0, ..teacher.clone() };
    ensure!(ema_update(&zero, &student).unwrap().params == student.subset(""), "m = 0 did not copy the student");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0f64;
    for _ in 0..200 {
        let mom = rng.gen_range(0.0..=1.0);
        let t0: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let s: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut t = t0.clone();
        ema_step(&mut t, &s, mom);
        ema_step(&mut t, &s, mom);
        for ((got, a), b) in t.iter().zip(&t0).zip(&s) {
            let want = mom * mom * a + (1.0 - mom * mom) * b;
            worst = worst.max((got - want).abs());
            ensure!(close(*got, want, 1e-12), "m = {mom}: {got} vs {want}");
        }
    }
    Ok(format!("endpoints exact, two-step max deviation {worst:.1e}"))
}

/// Class-balanced slice of the criterion-9 corpus.
fn slice(spec: &SyntheticCorpusSpec, range: std::ops::Range<usize>) -> Corpus {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..spec.num_classes {
        for i in range.clone() {
            images.push(render_sample(spec, c, i));
            labels.push(Some(c));
        }
    }
    Corpus::new(images, labels, (0..spec.num_classes).map(|c| format!("class-{c}")).collect()).unwrap()
}

fn c9_directional() -> Check {
    let mut spec = SyntheticCorpusSpec::uniform(10, 280, 32, 7);
    spec.variance.hue_bands = 2;
    spec.variance.backgrounds = vec![Background::Flat, Background::Gradient];
    let train = slice(&spec, 0..200);
    let val = slice(&spec, 200..240);
    let test = slice(&spec, 240..280);

    let mut acc: [Vec<f64>; 3] = Default::default();
    for seed in 0..3u64 {
        for (slot, method) in [(0, Method::None), (1, Method::Dino), (2, Method::Simclr)] {
            let ck = if method == Method::None {
                None
            } else {
                let mut cfg = PretrainConfig { method, epochs: 12, seed, ..PretrainConfig::default() };
                cfg.params.teacher_momentum = 0.99;
                Some(pretrain(&cfg, &train).map_err(|e| e.to_string())?.checkpoint)
            };
            let fc = FinetuneConfig { epochs: 10, seed, ..FinetuneConfig::default() };
            let out = finetune(&fc, ck.as_ref(), &train, &val).map_err(|e| e.to_string())?;
            let (_, report) = evaluate(&out.best, &test, &fc.augmentation).map_err(|e| e.to_string())?;
            acc[slot].push(report.accuracy * 100.0);
            println!("    seed {seed} {:<11} test accuracy {:.2}%", method.label(), report.accuracy * 100.0);
        }
    }
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (none, dino, simclr) = (median(&acc[0]), median(&acc[1]), median(&acc[2]));
    let detail = format!("medians: random init {none:.2}%, DINO {dino:.2}%, SimCLR {simclr:.2}%");
    ensure!(dino >= none + 2.0 && simclr >= none + 2.0, "{detail}");
    Ok(detail)
}

fn c10_split_counts() -> Check {
    // 23 classes of uneven sizes totalling 25000
    let mut sizes: Vec<usize> = (0..23).map(|c| 600 + 37 * c).collect();
    let rest = 25000 - sizes.iter().sum::<usize>();
    sizes[0] += rest;
    let mut records = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            records.push(ImageRecord { path: format!("{c}/{i}.png"), class_id: Some(c as u32), split: None, width: 32, height: 32 });
        }
    }
    let classes = sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| ClassSpec { class_id: c as u32, name: format!("c{c}"), expected_count: n, description: String::new() })
        .collect();
    let manifest = DatasetManifest { classes, records, seed: 0 };
    let out = split_dataset(&manifest, SplitRatios::new(0.70, 0.15, 0.15).unwrap(), 1).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = Split::ALL.iter().map(|&s| out.indices_in(s).len()).collect();
    ensure!(counts == [17500, 3750, 3750], "counts {counts:?}");
    Ok(format!("{}/{}/{}", counts[0], counts[1], counts[2]))
}

fn c11_confusion_and_tables() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let classes = rng.gen_range(2..=23);
        let n = rng.gen_range(1..400);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let bias = rng.gen_range(0.0..1.0);
        let pred: Vec<usize> = truth.iter().map(|&t| if rng.gen_bool(bias) { t } else { rng.gen_range(0..classes) }).collect();
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, names).map_err(|e| e.to_string())?;
        ensure!(cm.total() == n as u64, "trial {trial}: total {} vs {n}", cm.total());
        for c in 0..classes {
            let want = truth.iter().filter(|&&t| t == c).count() as u64;
            ensure!(cm.row_sum(c) == want, "trial {trial}: row {c}");
        }
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        ensure!(accuracy_from_confusion(&cm).unwrap() == correct as f64 / n as f64, "trial {trial}: accuracy");
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let record = |method: Method, setup, pre: &str, acc: f64| ResultsRecord {
        experiment: sslwb::cli::experiment_label(method).into(),
        method: method.label().into(),
        setup,
        arch: "ViT".into(),
        pretrain_dataset: pre.into(),
        finetune_dataset: "firearms".into(),
        seed: 0,
        test_accuracy: acc / 100.0,
        test_accuracy_last: acc / 100.0,
        best_epoch: 1,
        matrix_csv: None,
        plot: None,
    };
    let transfer = [
        record(Method::Supervised, Setup::Transfer, "ImageNet-100", 66.81),
        record(Method::Supervised, Setup::Transfer, "ImageNet-1k", 68.32),
        record(Method::Mae, Setup::Transfer, "ImageNet-100", 67.89),
        record(Method::Simclr, Setup::Transfer, "ImageNet-100", 69.18),
        record(Method::Deepcluster, Setup::Transfer, "ImageNet-100", 67.40),
        record(Method::Dino, Setup::Transfer, "ImageNet-100", 71.94),
        record(Method::Mixed, Setup::Transfer, "ImageNet-100", 71.71),
    ];
    let single = [
        record(Method::None, Setup::SingleDataset, "firearms", 69.78),
        record(Method::Simclr, Setup::SingleDataset, "firearms", 69.23),
        record(Method::Deepcluster, Setup::SingleDataset, "firearms", 66.29),
        record(Method::Dino, Setup::SingleDataset, "firearms", 72.31),
        record(Method::Mae, Setup::SingleDataset, "firearms", 66.82),
    ];
    let reload = |recs: &[ResultsRecord], tag: &str| -> Result<Vec<ResultsRecord>, String> {
        recs.iter()
            .enumerate()
            .map(|(i, r)| {
                let p = dir.path().join(format!("{tag}-{i}.rec"));
                r.save(&p).and_then(|_| ResultsRecord::load(&p)).map_err(|e| e.to_string())
            })
            .collect()
    };
    let t2 = sslwb::cli::report(&reload(&transfer, "t")?, Setup::Transfer, "ViT");
    let t4 = sslwb::cli::report(&reload(&single, "s")?, Setup::SingleDataset, "ViT");

    let body = |t: &str| t.lines().filter(|l| l.starts_with('|')).skip(2).map(String::from).collect::<Vec<_>>();
    let cells = |l: &str| l.trim_matches('|').split(" | ").map(|c| c.trim().to_string()).collect::<Vec<_>>();

    ensure!(t2.starts_with("Results for the ViT architecture in the transfer learning setup."), "caption: {t2}");
    ensure!(t2.contains("| Experiment | Pretraining Dataset | Classification Accuracy (%) |"), "header: {t2}");
    let rows2 = body(&t2);
    ensure!(rows2.len() == 7, "transfer rows: {}", rows2.len());
    let want2 = [
        ["Supervised", "ImageNet-100", "66.81"],
        ["Supervised", "ImageNet-1k", "68.32"],
        ["MAE", "ImageNet-100", "67.89"],
        ["SimCLR", "ImageNet-100", "69.18"],
        ["DeepCluster", "ImageNet-100", "67.40"],
        ["**DINO**", "**ImageNet-100**", "**71.94**"],
        ["Mixed (DINO+Supervised)", "ImageNet-100", "71.71"],
    ];
    for (row, want) in rows2.iter().zip(&want2) {
        ensure!(cells(row) == want, "transfer row {row}");
    }

    ensure!(t4.starts_with("Results for the ViT architecture in the single-dataset setup."), "caption: {t4}");
    ensure!(t4.contains("| Experiment | Classification Accuracy (%) |") && !t4.contains("Pretraining Dataset"), "header: {t4}");
    let rows4 = body(&t4);
    let want4 = [
        ["No pretraining (random initialization)", "69.78"],
        ["SimCLR", "69.23"],
        ["DeepCluster", "66.29"],
        ["**DINO**", "**72.31**"],
        ["MAE", "66.82"],
    ];
    ensure!(rows4.len() == 5, "single-dataset rows: {}", rows4.len());
    for (row, want) in rows4.iter().zip(&want4) {
        ensure!(cells(row) == want, "single-dataset row {row}");
    }
    Ok("100 fuzzed classifiers; 7-row transfer and 5-row single-dataset tables".into())
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "closed-form loss oracles", budget: Duration::from_secs(10), run: c1_closed_forms },
        Criterion { id: 2, name: "finite-difference gradients", budget: Duration::from_secs(60), run: c2_gradients },
        Criterion { id: 3, name: "k-means optimality", budget: Duration::from_secs(30), run: c3_kmeans },
        Criterion { id: 4, name: "training-loop step order", budget: Duration::from_secs(10), run: c4_traces },
        Criterion { id: 5, name: "label blindness", budget: Duration::from_secs(300), run: c5_label_blindness },
        Criterion { id: 6, name: "degenerate mixed weights", budget: Duration::from_secs(180), run: c6_mixed_degenerate },
        Criterion { id: 7, name: "masked-only reconstruction loss", budget: Duration::MAX, run: c7_masked_only },
        Criterion { id: 8, name: "EMA invariants", budget: Duration::MAX, run: c8_ema },
        Criterion { id: 9, name: "pretraining beats random init", budget: Duration::from_secs(1200), run: c9_directional },
        Criterion { id: 10, name: "split arithmetic", budget: Duration::MAX, run: c10_split_counts },
        Criterion { id: 11, name: "confusion conservation and report tables", budget: Duration::MAX, run: c11_confusion_and_tables },
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.budget => Err(format!("{d}; exceeded the {}s budget", c.budget.as_secs())),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {tag} {} ({:.1}s): {detail}", c.id, c.name, took.as_secs_f64());
        failed += outcome.is_err() as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
