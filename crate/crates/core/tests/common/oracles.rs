//! Reference evaluations written directly from the loss definitions, kept
//! separate from the library so the two can be compared.

use rand::Rng;
use sslwb::tensor::Mat;

pub fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<f64> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Random probability rows, bounded away from zero.
pub fn random_dists(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<f64> {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (o, v) in m.row_mut(r).iter_mut().zip(raw) {
            *o = v / s;
        }
    }
    m
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Contrastive loss evaluated term by term; rows `2i`, `2i+1` are positives.
pub fn nt_xent_ref(z: &Mat<f64>, tau: f64) -> f64 {
    let n = z.rows;
    let mut total = 0.0;
    for a in 0..n {
        let pos = if a % 2 == 0 { a + 1 } else { a - 1 };
        let num = (cosine(z.row(a), z.row(pos)) / tau).exp();
        let den: f64 = (0..n).filter(|&k| k != a).map(|k| (cosine(z.row(a), z.row(k)) / tau).exp()).sum();
        total += -(num / den).ln();
    }
    total / n as f64
}

/// Sum of cross entropies of every teacher global against every other student view.
pub fn dino_ref(teacher: &Mat<f64>, student: &Mat<f64>) -> f64 {
    let mut total = 0.0;
    for t in 0..2 {
        for s in (0..student.rows).filter(|&s| s != t) {
            total -= teacher.row(t).iter().zip(student.row(s)).map(|(p, q)| p * q.ln()).sum::<f64>();
        }
    }
    total
}

/// Mean cross entropy of `softmax(logits)` at the target class, via log-sum-exp.
pub fn ce_ref(logits: &Mat<f64>, classes: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &c) in classes.iter().enumerate() {
        let row = logits.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[c];
    }
    total / classes.len() as f64
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let keep = x[i];
            x[i] = keep + h;
            let up = f(&x);
            x[i] = keep - h;
            let down = f(&x);
            x[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Within-cluster sum of squares with centroids at cluster means.
pub fn wcss(points: &Mat<f64>, assign: &[usize], k: usize) -> f64 {
    let d = points.cols;
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (r, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(points.row(r)) {
            *s += v;
        }
    }
    assign
        .iter()
        .enumerate()
        .map(|(r, &a)| {
            points
                .row(r)
                .iter()
                .zip(&sums[a])
                .map(|(v, s)| (v - s / counts[a] as f64).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Lowest WCSS over every assignment of `n` points into `k` non-empty clusters.
pub fn brute_force_wcss(points: &Mat<f64>, k: usize) -> (f64, Vec<usize>) {
    let n = points.rows;
    let mut best = (f64::INFINITY, Vec::new());
    let mut assign = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for a in assign.iter_mut() {
            *a = c % k;
            c /= k;
        }
        if (0..k).all(|j| assign.contains(&j)) {
            let w = wcss(points, &assign, k);
            if w < best.0 {
                best = (w, assign.clone());
            }
        }
    }
    best
}

/// Whether moving any single point to another cluster, without emptying
/// its own, would lower the WCSS by more than `tol`.
pub fn improving_move_exists(points: &Mat<f64>, assign: &[usize], k: usize, tol: f64) -> bool {
    let base = wcss(points, assign, k);
    let mut trial = assign.to_vec();
    for r in 0..assign.len() {
        let a = assign[r];
        if assign.iter().filter(|&&x| x == a).count() == 1 {
            continue;
        }
        for b in (0..k).filter(|&b| b != a) {
            trial[r] = b;
            if wcss(points, &trial, k) < base - tol {
                return true;
            }
        }
        trial[r] = a;
    }
    false
}
