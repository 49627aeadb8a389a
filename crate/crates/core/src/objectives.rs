//! Pretext and downstream objectives with analytic gradients.
//!
//! Every loss here is a pure function over `f64` arrays returning the
//! scalar value together with its gradient, so each one can be checked
//! against finite differences independently of the training tape. The
//! engine feeds these gradients into [`crate::tensor::Graph::loss`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Mat;

/// Projections for one contrastive batch. Rows `2i` and `2i + 1` are the
/// two augmented views of image `i`.
#[derive(Clone, Debug)]
pub struct SimClrBatchRepr {
    pub projections: Mat<f64>,
}

impl SimClrBatchRepr {
    pub fn new(projections: Mat<f64>) -> Result<Self> {
        if projections.rows % 2 != 0 {
            return Err(Error::invalid("contrastive batch needs an even row count"));
        }
        if !projections.all_finite() {
            return Err(Error::NonFinite("contrastive projections".into()));
        }
        Ok(Self { projections })
    }

    pub fn batch_size(&self) -> usize {
        self.projections.rows / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::invalid(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// A scalar loss and its gradient with respect to the differentiable input.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Mat<f64>,
}

fn partner(row: usize) -> usize {
    row ^ 1
}

/// Normalized temperature-scaled cross entropy over all `2B` anchors.
///
/// For anchor `a` with positive `p` the term is
/// `-log(exp(s_ap/τ) / Σ_{k≠a} exp(s_ak/τ))` with cosine similarity `s`;
/// the batch loss is the mean over anchors.
pub fn nt_xent(repr: &SimClrBatchRepr, tau: Temperature) -> Result<LossGrad> {
    let x = &repr.projections;
    let n = x.rows;
    if repr.batch_size() < 2 {
        return Err(Error::invalid("contrastive loss needs at least two images"));
    }
    let d = x.cols;
    let norms: Vec<f64> = (0..n)
        .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(r) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::invalid(format!(
            "projection row {r} has zero norm; cosine similarity undefined"
        )));
    }
    let z: Vec<f64> = (0..n)
        .flat_map(|r| x.row(r).iter().map(move |&v| (r, v)))
        .map(|(r, v)| v / norms[r])
        .collect();
    let zrow = |r: usize| &z[r * d..(r + 1) * d];
    let t = tau.get();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = zrow(i).iter().zip(zrow(j)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    // dL/dsim, accumulated over anchors.
    let mut dsim = vec![0.0; n * n];
    let mut loss = 0.0;
    for a in 0..n {
        let logits: Vec<f64> = (0..n).map(|k| sim[a * n + k] / t).collect();
        let mx = (0..n)
            .filter(|&k| k != a)
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let z_sum: f64 = (0..n).filter(|&k| k != a).map(|k| (logits[k] - mx).exp()).sum();
        let lse = mx + z_sum.ln();
        let p = partner(a);
        loss += lse - logits[p];
        for k in (0..n).filter(|&k| k != a) {
            let w = (logits[k] - lse).exp();
            dsim[a * n + k] += w / t;
        }
        dsim[a * n + p] -= 1.0 / t;
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    // sim_ij = z_i·z_j  ⇒  dz_i = Σ_j (dsim_ij + dsim_ji) z_j
    let mut dz = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let w = (dsim[i * n + j] + dsim[j * n + i]) * inv;
            if w == 0.0 {
                continue;
            }
            for c in 0..d {
                dz[i * d + c] += w * z[j * d + c];
            }
        }
    }
    let mut grad = Mat::zeros(n, d);
    for r in 0..n {
        let zr = zrow(r);
        let g = &dz[r * d..(r + 1) * d];
        let proj: f64 = zr.iter().zip(g).map(|(a, b)| a * b).sum();
        for c in 0..d {
            grad.data[r * d + c] = (g[c] - zr[c] * proj) / norms[r];
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Teacher and student distributions for one image's view set. Student
/// rows 0 and 1 are the global views; rows `2..` are local crops.
#[derive(Clone, Debug)]
pub struct DinoOutputs {
    pub teacher: Mat<f64>,
    pub student: Mat<f64>,
}

impl DinoOutputs {
    pub fn new(teacher: Mat<f64>, student: Mat<f64>) -> Result<Self> {
        if teacher.rows != 2 {
            return Err(Error::invalid("teacher must provide exactly two global views"));
        }
        if student.rows < 2 || student.cols != teacher.cols {
            return Err(Error::invalid("student must cover both globals at the teacher's width"));
        }
        for (who, m) in [("teacher", &teacher), ("student", &student)] {
            for r in 0..m.rows {
                let row = m.row(r);
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (s - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("{who} row {r} is not a distribution")));
                }
            }
        }
        Ok(Self { teacher, student })
    }

    /// Number of local crops `k`.
    pub fn locals(&self) -> usize {
        self.student.rows - 2
    }
}

/// Cross-entropy pairs `(teacher view, student view)` summed by the
/// self-distillation loss: each global teacher view against every student
/// view except itself, `2(k + 1)` pairs in total.
pub fn dino_pairs(views: usize) -> Vec<(usize, usize)> {
    (0..2)
        .flat_map(|t| (0..views).filter(move |&s| s != t).map(move |s| (t, s)))
        .collect()
}

/// Self-distillation loss over distributions. The gradient is taken with
/// respect to the student entries only; teacher rows are constants.
pub fn dino_loss(out: &DinoOutputs) -> Result<LossGrad> {
    let (t, s) = (&out.teacher, &out.student);
    let mut loss = 0.0;
    let mut grad = Mat::zeros(s.rows, s.cols);
    for (ti, sj) in dino_pairs(s.rows) {
        for c in 0..s.cols {
            let p = t.data[ti * t.cols + c];
            if p == 0.0 {
                continue;
            }
            let q = s.data[sj * s.cols + c];
            loss -= p * q.ln();
            grad.data[sj * s.cols + c] -= p / q;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("student assigns zero mass where teacher does not".into()));
    }
    Ok(LossGrad { loss, grad })
}

fn log_softmax_row(row: &[f64], temp: f64) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temp;
    let lse = mx + row.iter().map(|&v| (v / temp - mx).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v / temp - lse).collect()
}

/// Self-distillation loss taking student logits, with the student
/// distributions formed as `softmax(logits / student_temp)`. Same value as
/// [`dino_loss`], gradient with respect to the logits.
pub fn dino_loss_from_logits(
    teacher: &Mat<f64>,
    student_logits: &Mat<f64>,
    student_temp: f64,
) -> Result<LossGrad> {
    if teacher.rows != 2 || student_logits.rows < 2 || teacher.cols != student_logits.cols {
        return Err(Error::invalid("teacher/student view layout"));
    }
    if student_temp <= 0.0 {
        return Err(Error::invalid("student temperature must be positive"));
    }
    if !student_logits.all_finite() {
        return Err(Error::NonFinite("student logits".into()));
    }
    let c = teacher.cols;
    let v = student_logits.rows;
    let logp: Vec<Vec<f64>> = (0..v)
        .map(|r| log_softmax_row(student_logits.row(r), student_temp))
        .collect();
    let mut loss = 0.0;
    let mut grad = Mat::zeros(v, c);
    for (ti, sj) in dino_pairs(v) {
        let tp = teacher.row(ti);
        let mass: f64 = tp.iter().sum();
        let g = &mut grad.data[sj * c..(sj + 1) * c];
        for k in 0..c {
            loss -= tp[k] * logp[sj][k];
            g[k] += (logp[sj][k].exp() * mass - tp[k]) / student_temp;
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Teacher post-processing: `softmax((logits - center) / temp)` per row.
pub fn sharpen_and_center(logits: &Mat<f64>, center: &[f64], temp: f64) -> Result<Mat<f64>> {
    if temp <= 0.0 {
        return Err(Error::invalid("teacher temperature must be positive"));
    }
    if center.len() != logits.cols {
        return Err(Error::shape("center length differs from logit width"));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    let mut out = Mat::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let shifted: Vec<f64> = logits.row(r).iter().zip(center).map(|(l, c)| l - c).collect();
        let lp = log_softmax_row(&shifted, temp);
        for (o, v) in out.row_mut(r).iter_mut().zip(lp) {
            *o = v.exp();
        }
    }
    Ok(out)
}

/// `c' = m·c + (1 - m)·mean(batch rows)`.
pub fn update_center(center: &[f64], batch_logits: &Mat<f64>, momentum: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid("center momentum outside [0, 1]"));
    }
    if center.len() != batch_logits.cols || batch_logits.rows == 0 {
        return Err(Error::shape("center update batch"));
    }
    if !batch_logits.all_finite() {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    let n = batch_logits.rows as f64;
    Ok(center
        .iter()
        .enumerate()
        .map(|(c, &old)| {
            let mean = (0..batch_logits.rows)
                .map(|r| batch_logits.data[r * batch_logits.cols + c])
                .sum::<f64>()
                / n;
            momentum * old + (1.0 - momentum) * mean
        })
        .collect())
}

/// Reconstruction `P`, original `Y` (both `H×W×3`, row-major pixels) and
/// the set of masked pixels.
#[derive(Clone, Debug)]
pub struct MaeTarget {
    pub width: usize,
    pub height: usize,
    pub reconstruction: Vec<f64>,
    pub original: Vec<f64>,
    pub masked_pixels: Vec<bool>,
}

impl MaeTarget {
    pub fn new(
        width: usize,
        height: usize,
        reconstruction: Vec<f64>,
        original: Vec<f64>,
        masked_pixels: Vec<bool>,
    ) -> Result<Self> {
        let px = width * height;
        if reconstruction.len() != px * 3 || original.len() != px * 3 || masked_pixels.len() != px {
            return Err(Error::shape(format!(
                "reconstruction/original/mask sizes {}/{}/{} for {width}x{height}",
                reconstruction.len(),
                original.len(),
                masked_pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            reconstruction,
            original,
            masked_pixels,
        })
    }
}

/// Mean squared error over masked pixel-channel entries only. The gradient
/// is with respect to the reconstruction and is zero on visible pixels.
pub fn mae_loss(target: &MaeTarget) -> Result<LossGrad> {
    let masked = target.masked_pixels.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::invalid("reconstruction loss needs at least one masked pixel"));
    }
    let l = (3 * masked) as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(target.width * target.height, 3);
    for (p, _) in target.masked_pixels.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            let i = p * 3 + c;
            let diff = target.reconstruction[i] - target.original[i];
            loss += diff * diff;
            grad.data[i] = 2.0 * diff / l;
        }
    }
    Ok(LossGrad {
        loss: loss / l,
        grad,
    })
}

/// Cluster assignment per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub assignments: Vec<usize>,
    pub k: usize,
    pub epoch_id: u64,
}

impl PseudoLabels {
    pub fn one_hot(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.assignments.len(), self.k);
        for (r, &a) in self.assignments.iter().enumerate() {
            m.data[r * self.k + a] = 1.0;
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub labels: PseudoLabels,
    pub centroids: Mat<f64>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
}

impl KMeansResult {
    pub fn wcss(&self) -> f64 {
        self.wcss_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids_of(features: &Mat<f64>, assign: &[usize], k: usize) -> (Mat<f64>, Vec<usize>) {
    let d = features.cols;
    let mut c = Mat::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (r, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (o, &v) in c.row_mut(a).iter_mut().zip(features.row(r)) {
            *o += v;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            for o in c.row_mut(j) {
                *o /= n as f64;
            }
        }
    }
    (c, counts)
}

/// Within-cluster sum of squares of an assignment, centroids being the
/// cluster means.
pub fn wcss_of(features: &Mat<f64>, assign: &[usize], k: usize) -> f64 {
    let (c, _) = centroids_of(features, assign, k);
    assign
        .iter()
        .enumerate()
        .map(|(r, &a)| sq_dist(features.row(r), c.row(a)))
        .sum()
}

/// Lloyd's K-Means with k-means++ seeding.
///
/// Empty clusters are re-seeded from the point farthest from its current
/// centroid. Once assignments stop changing, a single-point refinement pass
/// moves any point whose transfer to another cluster lowers the objective,
/// so the result is also a local optimum under one-point moves.
pub fn kmeans(features: &Mat<f64>, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    let n = features.rows;
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} samples cannot form {k} clusters")));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite("clustering features".into()));
    }
    let d = features.cols;
    let mut rng = rng::stream(seed, &[rng::tag::KMEANS]);

    // k-means++ seeding
    let mut centroids = Mat::zeros(k, d);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut best: Vec<f64> = (0..n).map(|r| sq_dist(features.row(r), centroids.row(0))).collect();
    for j in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (r, &w) in best.iter().enumerate() {
                if u < w {
                    idx = r;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(j).copy_from_slice(features.row(pick));
        for r in 0..n {
            best[r] = best[r].min(sq_dist(features.row(r), centroids.row(j)));
        }
    }

    // Ties keep a point in its current cluster so re-seeded duplicates stay put.
    let assign_step = |centroids: &Mat<f64>, prev: Option<&[usize]>| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let assign = (0..n)
            .map(|r| {
                let (mut arg, mut bd) = match prev {
                    Some(p) => (p[r], sq_dist(features.row(r), centroids.row(p[r]))),
                    None => (0, f64::INFINITY),
                };
                for j in 0..k {
                    let dist = sq_dist(features.row(r), centroids.row(j));
                    if dist < bd {
                        bd = dist;
                        arg = j;
                    }
                }
                total += bd;
                arg
            })
            .collect();
        (assign, total)
    };

    let mut history = Vec::new();
    let (mut assign, w) = assign_step(&centroids, None);
    history.push(w);
    for _ in 0..max_iters.max(1) {
        fill_empty(features, &mut assign, k);
        let (c, _) = centroids_of(features, &assign, k);
        let (next, w) = assign_step(&c, Some(&assign));
        history.push(w);
        if next == assign {
            break;
        }
        assign = next;
    }

    fill_empty(features, &mut assign, k);
    if hartigan_refine(features, &mut assign, k) {
        history.push(wcss_of(features, &assign, k));
    }
    let (centroids, _) = centroids_of(features, &assign, k);
    Ok(KMeansResult {
        labels: PseudoLabels {
            assignments: assign,
            k,
            epoch_id: 0,
        },
        centroids,
        wcss_history: history,
    })
}

/// Re-seeds every empty cluster with the point farthest from its centroid
/// among clusters that have at least two members.
fn fill_empty(features: &Mat<f64>, assign: &mut [usize], k: usize) {
    let (mut c, mut counts) = centroids_of(features, assign, k);
    while let Some(empty) = counts.iter().position(|&m| m == 0) {
        let far = (0..features.rows)
            .filter(|&r| counts[assign[r]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(features.row(a), c.row(assign[a]));
                let db = sq_dist(features.row(b), c.row(assign[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("n >= k guarantees a shared cluster");
        assign[far] = empty;
        (c, counts) = centroids_of(features, assign, k);
    }
}

/// Moves single points between clusters while any move strictly lowers the
/// within-cluster sum of squares. Returns whether anything moved.
fn hartigan_refine(features: &Mat<f64>, assign: &mut [usize], k: usize) -> bool {
    let n = features.rows;
    let (mut c, mut counts) = centroids_of(features, assign, k);
    let mut moved = true;
    let mut any = false;
    let mut passes = 0;
    while moved && passes < 100 {
        moved = false;
        passes += 1;
        for r in 0..n {
            let a = assign[r];
            if counts[a] <= 1 {
                continue;
            }
            let x = features.row(r);
            let na = counts[a] as f64;
            let remove_gain = na / (na - 1.0) * sq_dist(x, c.row(a));
            let mut best = None;
            let mut best_cost = remove_gain;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let cost = nb / (nb + 1.0) * sq_dist(x, c.row(b));
                if cost < best_cost - 1e-12 * (1.0 + best_cost.abs()) {
                    best_cost = cost;
                    best = Some(b);
                }
            }
            if let Some(b) = best {
                assign[r] = b;
                counts[a] -= 1;
                counts[b] += 1;
                let (c2, _) = centroids_of(features, assign, k);
                c = c2;
                moved = true;
                any = true;
            }
        }
    }
    any
}

/// Cross-entropy of `softmax(logits)` against one-hot targets, averaged
/// over rows.
pub fn deepcluster_loss(targets: &Mat<f64>, logits: &Mat<f64>) -> Result<LossGrad> {
    if targets.rows != logits.rows || targets.cols != logits.cols {
        return Err(Error::shape("targets and logits differ in shape"));
    }
    let classes = (0..targets.rows)
        .map(|r| {
            let row = targets.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones == 1 && ones + zeros == row.len() {
                Ok(row.iter().position(|&v| v == 1.0).unwrap())
            } else {
                Err(Error::invalid(format!("target row {r} is not one-hot")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    cross_entropy(logits, &classes)
}

/// Mean softmax cross-entropy for integer class targets.
pub fn cross_entropy(logits: &Mat<f64>, classes: &[usize]) -> Result<LossGrad> {
    if classes.len() != logits.rows || logits.rows == 0 {
        return Err(Error::shape("one target per logit row required"));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    for (r, &c) in classes.iter().enumerate() {
        if c >= logits.cols {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        let lp = log_softmax_row(logits.row(r), 1.0);
        loss -= lp[c];
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (lp[j].exp() - if j == c { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(LossGrad {
        loss: loss / n,
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedWeights {
    pub supervised: f64,
    pub ssl: f64,
}

impl MixedWeights {
    pub fn new(supervised: f64, ssl: f64) -> Result<Self> {
        if !(supervised >= 0.0 && ssl >= 0.0 && supervised + ssl > 0.0) {
            return Err(Error::invalid(format!(
                "mixed weights must be non-negative and not both zero, got {supervised}/{ssl}"
            )));
        }
        Ok(Self { supervised, ssl })
    }
}

impl Default for MixedWeights {
    fn default() -> Self {
        Self {
            supervised: 0.45,
            ssl: 0.55,
        }
    }
}

/// `ω1·L_sup + ω2·L_ssl`. The partial derivatives are `(ω1, ω2)`.
pub fn mixed_loss(l_sup: f64, l_ssl: f64, w: MixedWeights) -> Result<f64> {
    if !l_sup.is_finite() || !l_ssl.is_finite() {
        return Err(Error::NonFinite("mixed loss component".into()));
    }
    Ok(w.supervised * l_sup + w.ssl * l_ssl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn nt_xent_rejects_single_image_and_zero_rows() {
        let r = SimClrBatchRepr::new(m(2, 2, &[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!(nt_xent(&r, Temperature::new(1.0).unwrap()).is_err());
        let r = SimClrBatchRepr::new(m(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0])).unwrap();
        assert!(nt_xent(&r, Temperature::new(1.0).unwrap()).is_err());
        assert!(SimClrBatchRepr::new(m(3, 1, &[1.0, 1.0, 1.0])).is_err());
        assert!(Temperature::new(0.0).is_err());
    }

    #[test]
    fn dino_pair_count() {
        assert_eq!(dino_pairs(2).len(), 2);
        assert_eq!(dino_pairs(6).len(), 10);
        assert!(dino_pairs(8).iter().all(|(t, s)| t != s && *t < 2));
    }

    #[test]
    fn dino_logit_form_matches_distribution_form() {
        let logits = m(4, 3, &[0.1, 0.5, -0.3, 1.0, 0.0, 0.2, -0.4, 0.3, 0.9, 0.0, 0.0, 0.0]);
        let teacher = m(2, 3, &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]);
        let temp = 0.5;
        let probs = {
            let mut p = Mat::zeros(4, 3);
            for r in 0..4 {
                for (o, v) in p.row_mut(r).iter_mut().zip(log_softmax_row(logits.row(r), temp)) {
                    *o = v.exp();
                }
            }
            p
        };
        let a = dino_loss(&DinoOutputs::new(teacher.clone(), probs).unwrap()).unwrap();
        let b = dino_loss_from_logits(&teacher, &logits, temp).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn malformed_distributions_are_rejected() {
        let t = m(2, 2, &[0.5, 0.5, 0.5, 0.6]);
        let s = m(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        assert!(DinoOutputs::new(t, s.clone()).is_err());
        assert!(DinoOutputs::new(m(1, 2, &[0.5, 0.5]), s).is_err());
    }

    #[test]
    fn sharpen_and_center_cases() {
        let logits = m(2, 3, &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]);
        let center = update_center(&[0.0; 3], &logits, 0.0).unwrap();
        assert_eq!(center, vec![2.0, 2.0, 2.0]);
        let p = sharpen_and_center(&logits, &center, 1.0).unwrap();
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let sharp = sharpen_and_center(&logits, &center, 0.01).unwrap();
        assert!(sharp.data[2] > 0.999 && sharp.data[3] > 0.999);
        let unchanged = update_center(&[0.3, 0.2, 0.1], &logits, 1.0).unwrap();
        assert_eq!(unchanged, vec![0.3, 0.2, 0.1]);
        assert!(sharpen_and_center(&m(1, 1, &[f64::NAN]), &[0.0], 1.0).is_err());
        assert!(sharpen_and_center(&logits, &center, 0.0).is_err());
    }

    #[test]
    fn mae_loss_errors() {
        let t = MaeTarget::new(1, 1, vec![0.0; 3], vec![0.0; 3], vec![false]).unwrap();
        assert!(mae_loss(&t).is_err());
        assert!(MaeTarget::new(2, 1, vec![0.0; 3], vec![0.0; 6], vec![true; 2]).is_err());
    }

    #[test]
    fn kmeans_trivial_cases() {
        let x = m(3, 1, &[1.0, 5.0, 9.0]);
        let r = kmeans(&x, 3, 10, 1).unwrap();
        assert!(r.wcss().abs() < 1e-12);
        let mut ids = r.labels.assignments.clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);
        let r = kmeans(&x, 1, 10, 1).unwrap();
        assert!((r.centroids.data[0] - 5.0).abs() < 1e-12);
        assert!(kmeans(&x, 4, 10, 1).is_err());
        assert!(kmeans(&m(1, 1, &[f64::NAN]), 1, 10, 1).is_err());
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let x = m(4, 1, &[2.0, 2.0, 2.0, 2.0]);
        let r = kmeans(&x, 2, 10, 3).unwrap();
        let mut counts = [0; 2];
        for &a in &r.labels.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "no empty cluster: {counts:?}");
    }

    #[test]
    fn one_hot_validation() {
        let logits = m(1, 2, &[0.0, 0.0]);
        assert!(deepcluster_loss(&m(1, 2, &[0.5, 0.5]), &logits).is_err());
        assert!(deepcluster_loss(&m(1, 2, &[1.0, 1.0]), &logits).is_err());
        assert!(MixedWeights::new(0.0, 0.0).is_err());
        assert!(MixedWeights::new(-0.1, 1.0).is_err());
        assert!(mixed_loss(f64::NAN, 1.0, MixedWeights::default()).is_err());
    }
}
