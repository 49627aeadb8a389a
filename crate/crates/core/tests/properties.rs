mod common;

use std::collections::BTreeMap;

use common::oracles::{improving_move_exists, nt_xent_ref, wcss};
use proptest::collection::vec;
use proptest::prelude::*;
use sslwb::augment::{make_eval_view, make_mask, make_multicrop, AugmentationPolicy};
use sslwb::dataset::{
    render_sample, split_dataset, ClassSpec, DatasetManifest, ImageRecord, Split, SplitRatios, SyntheticCorpusSpec,
};
use sslwb::evaluation::{accuracy_from_confusion, render_results_table, ConfusionMatrix, EvalReport, ResultRow, Setup};
use sslwb::models::ema_step;
use sslwb::objectives::{kmeans, mae_loss, mixed_loss, nt_xent, MaeTarget, MixedWeights, SimClrBatchRepr, Temperature};
use sslwb::tensor::Mat;

fn manifest(per_class: &[usize], unlabeled: usize) -> DatasetManifest {
    let classes = (0..per_class.len())
        .map(|c| ClassSpec {
            class_id: c as u32 * 3 + 1,
            name: format!("c{c}"),
            expected_count: per_class[c],
            description: String::new(),
        })
        .collect::<Vec<_>>();
    let mut records = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        for i in 0..n {
            records.push(ImageRecord {
                path: format!("{c}/{i}.png"),
                class_id: Some(classes[c].class_id),
                split: None,
                width: 16,
                height: 16,
            });
        }
    }
    for i in 0..unlabeled {
        records.push(ImageRecord {
            path: format!("u/{i}.png"),
            class_id: None,
            split: None,
            width: 16,
            height: 16,
        });
    }
    DatasetManifest {
        classes,
        records,
        seed: 0,
    }
}

fn ratios() -> impl Strategy<Value = SplitRatios> {
    (1u32..=18, 1u32..=18).prop_filter_map("train share must stay positive", |(v, t)| {
        (v + t < 20).then(|| SplitRatios {
            train: 1.0 - (v + t) as f64 / 20.0,
            val: v as f64 / 20.0,
            test: t as f64 / 20.0,
        })
    })
}

proptest! {
    #[test]
    fn splits_partition_and_stratify(per_class in vec(1usize..60, 1..6), unlabeled in 0usize..20, r in ratios(), seed: u64) {
        let m = manifest(&per_class, unlabeled);
        let out = split_dataset(&m, r, seed).unwrap();
        prop_assert_eq!(out.records.len(), m.records.len());
        for (a, b) in out.records.iter().zip(&m.records) {
            prop_assert_eq!(&a.path, &b.path);
            prop_assert!(a.split.is_some());
        }
        let mut seen: Vec<usize> = Split::ALL.iter().flat_map(|&s| out.indices_in(s)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..m.records.len()).collect::<Vec<_>>());

        let mut per: BTreeMap<Option<u32>, [usize; 3]> = BTreeMap::new();
        for rec in &out.records {
            let slot = Split::ALL.iter().position(|&s| Some(s) == rec.split).unwrap();
            per.entry(rec.class_id).or_default()[slot] += 1;
        }
        for counts in per.values() {
            let n: usize = counts.iter().sum();
            if n < 7 {
                continue;
            }
            for (got, share) in counts.iter().zip([r.train, r.val, r.test]) {
                prop_assert!((*got as f64 - n as f64 * share).abs() <= 1.0 + 1e-9, "{:?} of {} at {:?}", counts, n, r);
            }
        }
        prop_assert_eq!(split_dataset(&m, r, seed).unwrap(), out);
    }

    #[test]
    fn multicrop_views_come_globals_first(k in 0i64..8, seed: u64, class in 0usize..10) {
        let spec = SyntheticCorpusSpec::uniform(10, 1, 24, 3);
        let img = render_sample(&spec, class, 0);
        let policy = AugmentationPolicy { global_size: 16, local_size: 8, ..AugmentationPolicy::default() };
        let set = make_multicrop(&img, k, &policy, seed).unwrap();
        let sizes: Vec<usize> = set.views().map(|v| v.size).collect();
        prop_assert_eq!(sizes.len(), k as usize + 2);
        prop_assert!(sizes[..2].iter().all(|&s| s == 16));
        prop_assert!(sizes[2..].iter().all(|&s| s == 8));
        prop_assert_eq!(make_multicrop(&img, k, &policy, seed).unwrap(), set);
    }

    #[test]
    fn ema_composes_to_the_squared_momentum(pairs in vec((-10.0f64..10.0, -10.0f64..10.0), 1..32), m in 0.0f64..=1.0) {
        let (t0, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut t = t0.clone();
        ema_step(&mut t, &s, m);
        ema_step(&mut t, &s, m);
        for ((got, a), b) in t.iter().zip(&t0).zip(&s) {
            prop_assert!((got - (m * m * a + (1.0 - m * m) * b)).abs() <= 1e-12);
        }
        let mut keep = t0.clone();
        ema_step(&mut keep, &s, 1.0);
        prop_assert_eq!(&keep, &t0);
        let mut copy = t0.clone();
        ema_step(&mut copy, &s, 0.0);
        prop_assert_eq!(&copy, &s);
    }

    #[test]
    fn contrastive_loss_ignores_scale_and_image_order(
        rows in vec(vec(-1.0f64..1.0, 3), 4..=8).prop_filter("even", |r| r.len() % 2 == 0),
        scale in 0.01f64..100.0,
        tau in 0.1f64..2.0,
        rot in 0usize..4,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let t = Temperature::new(tau).unwrap();
        let base = nt_xent(&SimClrBatchRepr::new(Mat::from_vec(n, 3, flat.clone())).unwrap(), t).unwrap().loss;
        prop_assert!((base - nt_xent_ref(&Mat::from_vec(n, 3, flat.clone()), tau)).abs() < 1e-10);
        let scaled = nt_xent(&SimClrBatchRepr::new(Mat::from_vec(n, 3, flat.iter().map(|v| v * scale).collect())).unwrap(), t).unwrap().loss;
        prop_assert!((scaled - base).abs() < 1e-10);
        let images = n / 2;
        let order: Vec<usize> = (0..images).map(|i| (i + rot) % images).rev().collect();
        let permuted: Vec<f64> = order.iter().flat_map(|&i| rows[2 * i].iter().chain(&rows[2 * i + 1]).copied()).collect();
        let p = nt_xent(&SimClrBatchRepr::new(Mat::from_vec(n, 3, permuted)).unwrap(), t).unwrap().loss;
        prop_assert!((p - base).abs() < 1e-10);
    }

    #[test]
    fn reconstruction_loss_ignores_visible_pixels(
        side in 1usize..5,
        mask_bits in vec(any::<bool>(), 16),
        p in vec(-2.0f64..2.0, 48),
        y in vec(-2.0f64..2.0, 48),
        fuzz in vec(-1e6f64..1e6, 48),
    ) {
        let px = side * side;
        let mut mask = mask_bits[..px].to_vec();
        mask[0] = true;
        let base = MaeTarget::new(side, side, p[..px * 3].to_vec(), y[..px * 3].to_vec(), mask.clone()).unwrap();
        let l = mae_loss(&base).unwrap().loss;
        let mut q = p[..px * 3].to_vec();
        for i in 0..px * 3 {
            if !mask[i / 3] {
                q[i] = fuzz[i];
            }
        }
        let fuzzed = MaeTarget::new(side, side, q, y[..px * 3].to_vec(), mask).unwrap();
        prop_assert_eq!(mae_loss(&fuzzed).unwrap().loss, l);
    }

    #[test]
    fn mixed_loss_is_exact(a in 0.0f64..1e3, b in 0.0f64..1e3, w1 in 0.0f64..1.0, w2 in 0.001f64..1.0) {
        let w = MixedWeights::new(w1, w2).unwrap();
        prop_assert_eq!(mixed_loss(a, b, w).unwrap(), w1 * a + w2 * b);
    }

    #[test]
    fn kmeans_is_a_local_optimum(pts in vec(-5.0f64..5.0, 6..=20), dims in 1usize..=2, k in 1usize..=3, seed: u64) {
        let n = pts.len() / dims;
        prop_assume!(n >= k);
        let m = Mat::from_vec(n, dims, pts[..n * dims].to_vec());
        let km = kmeans(&m, k, 100, seed).unwrap();
        let a = &km.labels.assignments;
        prop_assert!((0..k).all(|j| a.contains(&j)));
        prop_assert!((km.wcss() - wcss(&m, a, k)).abs() < 1e-9);
        prop_assert!(!improving_move_exists(&m, a, k, 1e-9));
        prop_assert!(km.wcss_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn confusion_counts_are_conserved(truth_pred in vec((0usize..6, 0usize..6), 1..300)) {
        let names: Vec<String> = (0..6).map(|c| format!("c{c}")).collect();
        let (truth, pred): (Vec<usize>, Vec<usize>) = truth_pred.iter().copied().unzip();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, names).unwrap();
        prop_assert_eq!(cm.total(), truth.len() as u64);
        let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
        prop_assert_eq!(accuracy_from_confusion(&cm).unwrap(), correct as f64 / truth.len() as f64);
        let report = EvalReport::from_confusion(&cm).unwrap();
        for c in 0..6 {
            let in_class = truth.iter().filter(|&&t| t == c).count();
            let predicted = pred.iter().filter(|&&p| p == c).count();
            let hits = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p == c).count();
            prop_assert_eq!(cm.row_sum(c), in_class as u64);
            let recall = if in_class == 0 { 0.0 } else { hits as f64 / in_class as f64 };
            let precision = if predicted == 0 { 0.0 } else { hits as f64 / predicted as f64 };
            prop_assert_eq!(report.recall[c], recall);
            prop_assert_eq!(report.precision[c], precision);
        }
    }

    #[test]
    fn results_tables_differ_when_any_cell_differs(
        a in vec(("[a-z |*_\\\\]{0,6}", "[a-z |_]{0,4}", 0u32..10000), 0..5),
        b in vec(("[a-z |*_\\\\]{0,6}", "[a-z |_]{0,4}", 0u32..10000), 0..5),
        transfer: bool,
    ) {
        let rows = |v: &[(String, String, u32)]| -> Vec<ResultRow> {
            v.iter()
                .map(|(e, d, acc)| ResultRow { experiment: e.clone(), pretrain_dataset: d.clone(), accuracy_pct: *acc as f64 / 100.0 })
                .collect()
        };
        let setup = if transfer { Setup::Transfer } else { Setup::SingleDataset };
        let key = |v: &[(String, String, u32)]| -> Vec<(String, Option<String>, u32)> {
            v.iter().map(|(e, d, acc)| (e.clone(), transfer.then(|| d.clone()), *acc)).collect()
        };
        let (ta, tb) = (render_results_table(&rows(&a), setup, "vit"), render_results_table(&rows(&b), setup, "vit"));
        prop_assert_eq!(ta == tb, key(&a) == key(&b), "{}\n{}", ta, tb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mask_cardinality_is_the_floor(h in 1usize..12, w in 1usize..12, ratio in 0.0f64..=1.0, seed: u64) {
        let m = make_mask(h, w, ratio, seed).unwrap();
        let n = h * w;
        prop_assert_eq!(m.masked.len(), (ratio * n as f64).floor() as usize);
        prop_assert!(m.masked.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(m.masked.iter().all(|&i| i < n));
        prop_assert_eq!(make_mask(h, w, ratio, seed).unwrap(), m);
    }
}

#[test]
fn fitted_normalization_standardizes_identity_views() {
    let spec = SyntheticCorpusSpec::uniform(10, 20, 32, 8);
    let images: Vec<_> = (0..10).flat_map(|c| (0..20).map(move |i| (c, i))).map(|(c, i)| render_sample(&spec, c, i)).collect();
    let mut policy = AugmentationPolicy::identity(32);
    policy.fit_normalization(&images);
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0.0;
    for img in &images {
        let v = make_eval_view(img, &policy).unwrap();
        for px in v.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
            n += 1.0;
        }
    }
    for c in 0..3 {
        let mean = sum[c] / n;
        let std = (sq[c] / n - mean * mean).sqrt();
        assert!(mean.abs() < 0.05 && (std - 1.0).abs() < 0.05, "channel {c}: mean {mean} std {std}");
    }
}
