//! Test-set evaluation, confusion matrices, results records, tables and
//! confusion heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{make_eval_view, AugmentationPolicy};
use crate::engine::Corpus;
use crate::error::{Error, Result};
use crate::models::{encode, Batch, HeadKind, Model};
use crate::tensor::Graph;

/// Counts with rows indexed by true class and columns by predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self {
            class_names,
            counts: vec![0; c * c],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_names: Vec<String>) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut m = Self::new(class_names);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn from_counts(class_names: Vec<String>, rows: &[Vec<u64>]) -> Result<Self> {
        let c = class_names.len();
        if rows.len() != c || rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape(format!("confusion counts must be {c}x{c}")));
        }
        Ok(Self {
            class_names,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || predicted >= c {
            return Err(Error::invalid(format!("class pair ({truth}, {predicted}) outside {c} classes")));
        }
        self.counts[truth * c + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes() + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        let c = self.classes();
        &self.counts[truth * c..(truth + 1) * c]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes()).map(|t| self.get(t, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.get(i, i)).sum()
    }

    /// Adds the counts of `other`; the class tables must agree.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::invalid("merging confusion matrices over different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Header row of class names, then one row of counts per true class.
    pub fn to_csv(&self) -> String {
        let quote = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        let mut out = self.class_names.iter().map(|n| quote(n)).collect::<Vec<_>>().join(",");
        out.push('\n');
        for t in 0..self.classes() {
            let row: Vec<String> = self.row(t).iter().map(u64::to_string).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// trace / total.
pub fn accuracy_from_confusion(m: &ConfusionMatrix) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    Ok(m.trace() as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Per class; 0 when the class was never predicted.
    pub precision: Vec<f64>,
    /// Per class; 0 when the class has no test samples.
    pub recall: Vec<f64>,
    pub samples: u64,
}

impl EvalReport {
    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Ok(Self {
            accuracy: accuracy_from_confusion(m)?,
            precision: (0..m.classes()).map(|i| ratio(m.get(i, i), m.col_sum(i))).collect(),
            recall: (0..m.classes()).map(|i| ratio(m.get(i, i), m.row_sum(i))).collect(),
            samples: m.total(),
        })
    }
}

/// Deterministic inference views in chunks of at most 256 images.
pub fn eval_batches(corpus: &Corpus, policy: &AugmentationPolicy) -> Result<Vec<Batch>> {
    let views = corpus
        .images
        .iter()
        .map(|im| make_eval_view(im, policy))
        .collect::<Result<Vec<_>>>()?;
    views.chunks(256).map(Batch::from_views).collect()
}

/// Name of the model's classification head (the last one attached).
fn classifier(model: &Model) -> Result<&crate::models::HeadConfig> {
    model
        .heads
        .iter()
        .rev()
        .find(|h| h.kind == HeadKind::Classification)
        .ok_or_else(|| Error::invalid("model has no classification head"))
}

/// Arg-max class per image; ties go to the lower class index.
pub fn predict_batches(model: &Model, batches: &[Batch]) -> Result<Vec<usize>> {
    let head = classifier(model)?.name.clone();
    let mut out = Vec::new();
    for b in batches {
        let mut g = Graph::<f32>::new();
        let e = encode(&mut g, &model.params, &model.encoder, b)?;
        let logits = model.apply_head(&mut g, &model.params, &head, e)?;
        let v = g.value(logits);
        for r in 0..v.rows {
            let row = v.row(r);
            let best = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            out.push(best);
        }
    }
    Ok(out)
}

/// Backbone embeddings, row-major with one row per image.
pub fn embed_batches(model: &Model, batches: &[Batch]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for b in batches {
        let mut g = Graph::<f32>::new();
        let e = encode(&mut g, &model.params, &model.encoder, b)?;
        out.extend_from_slice(&g.value(e).data);
    }
    Ok(out)
}

pub fn predict(model: &Model, corpus: &Corpus, policy: &AugmentationPolicy) -> Result<Vec<usize>> {
    predict_batches(model, &eval_batches(corpus, policy)?)
}

/// Classifies every image of `test` once and tallies the results.
pub fn evaluate(model: &Model, test: &Corpus, policy: &AugmentationPolicy) -> Result<(ConfusionMatrix, EvalReport)> {
    let head = classifier(model)?;
    if head.output_dim != test.num_classes() {
        return Err(Error::invalid(format!(
            "classifier has {} outputs, test set has {} classes",
            head.output_dim,
            test.num_classes()
        )));
    }
    let truth = test.dense_labels()?;
    let pred = predict(model, test, policy)?;
    let m = ConfusionMatrix::from_predictions(&truth, &pred, test.class_names.clone())?;
    let report = EvalReport::from_confusion(&m)?;
    Ok((m, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    /// Pretraining and finetuning on different datasets.
    Transfer,
    /// Pretraining and finetuning on the same dataset.
    SingleDataset,
}

impl Setup {
    pub fn label(self) -> &'static str {
        match self {
            Setup::Transfer => "transfer",
            Setup::SingleDataset => "single_dataset",
        }
    }
}

impl std::str::FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transfer" => Ok(Setup::Transfer),
            "single_dataset" | "single" => Ok(Setup::SingleDataset),
            _ => Err(Error::invalid(format!("unknown setup {s:?}"))),
        }
    }
}

/// One finished experiment, stored as a TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    /// Row label, e.g. "DINO" or "No pretraining (random initialization)".
    pub experiment: String,
    pub method: String,
    pub setup: Setup,
    pub arch: String,
    pub pretrain_dataset: String,
    pub finetune_dataset: String,
    pub seed: u64,
    /// Test accuracy (fraction) of the epoch with the best validation score.
    pub test_accuracy: f64,
    /// Test accuracy (fraction) after the last epoch.
    pub test_accuracy_last: f64,
    pub best_epoch: usize,
    pub matrix_csv: Option<PathBuf>,
    pub plot: Option<PathBuf>,
}

impl ResultsRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::invalid(format!("results record: {e}")))?;
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })
    }

    pub fn row(&self) -> ResultRow {
        ResultRow {
            experiment: self.experiment.clone(),
            pretrain_dataset: self.pretrain_dataset.clone(),
            accuracy_pct: 100.0 * self.test_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub pretrain_dataset: String,
    /// In [0, 100].
    pub accuracy_pct: f64,
}

/// Backslash-escapes characters that would change the table structure or
/// emphasis, so distinct cells always render distinctly.
fn escape_cell(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' | '|' | '*' | '_' => {
                out.push('\\');
                out.push(ch);
            }
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(ch),
        }
    }
    out
}

/// Markdown results table. Rows keep their input order; every row with the
/// highest accuracy (at two decimals) is bold.
pub fn render_results_table(rows: &[ResultRow], setup: Setup, arch: &str) -> String {
    let mut out = String::new();
    let setup_name = match setup {
        Setup::Transfer => "transfer learning setup",
        Setup::SingleDataset => "single-dataset setup",
    };
    let _ = writeln!(out, "Results for the {arch} architecture in the {setup_name}.\n");
    let transfer = setup == Setup::Transfer;
    if transfer {
        out.push_str("| Experiment | Pretraining Dataset | Classification Accuracy (%) |\n|---|---|---:|\n");
    } else {
        out.push_str("| Experiment | Classification Accuracy (%) |\n|---|---:|\n");
    }
    let fmt = |v: f64| format!("{v:.2}");
    let best = rows
        .iter()
        .map(|r| fmt(r.accuracy_pct).parse::<f64>().unwrap_or(f64::NEG_INFINITY))
        .fold(f64::NEG_INFINITY, f64::max);
    for r in rows {
        let acc = fmt(r.accuracy_pct);
        let bold = acc.parse::<f64>().is_ok_and(|v| v == best);
        let cell = |s: &str| {
            let s = escape_cell(s);
            if bold {
                format!("**{s}**")
            } else {
                s
            }
        };
        if transfer {
            let _ = writeln!(out, "| {} | {} | {} |", cell(&r.experiment), cell(&r.pretrain_dataset), cell(&acc));
        } else {
            let _ = writeln!(out, "| {} | {} |", cell(&r.experiment), cell(&acc));
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Sidecar paths written next to a confusion plot.
pub fn plot_sidecars(path: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = path.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".csv"), with(".labels.txt"))
}

const CELL: usize = 16;
const SCALE: usize = 2;
const ADVANCE: usize = 4 * SCALE;

/// Writes a PNG heatmap of row-normalized counts with numbered columns and
/// `index name` row labels, plus `<path>.csv` (the counts) and
/// `<path>.labels.txt` (one class name per line).
pub fn emit_confusion_plot(m: &ConfusionMatrix, path: &Path) -> Result<()> {
    let c = m.classes();
    if c == 0 {
        return Err(Error::invalid("confusion matrix has no classes"));
    }
    let labels: Vec<String> = m
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i:>2} {n}"))
        .collect();
    let left = labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) * ADVANCE + 8;
    let top = 6 * SCALE + 8;
    let (w, h) = (left + c * CELL + 4, top + c * CELL + 4);
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));

    for t in 0..c {
        let sum = m.row_sum(t).max(1) as f64;
        for p in 0..c {
            let f = m.get(t, p) as f64 / sum;
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * f).round() as u8;
            let color = image::Rgb([shade(247.0, 8.0), shade(251.0, 48.0), shade(255.0, 107.0)]);
            for y in 0..CELL - 1 {
                for x in 0..CELL - 1 {
                    img.put_pixel((left + p * CELL + x) as u32, (top + t * CELL + y) as u32, color);
                }
            }
        }
        draw_text(&mut img, &labels[t], 4, top + t * CELL + 2);
        let idx = t.to_string();
        let x = left + t * CELL + (CELL.saturating_sub(idx.len() * ADVANCE)) / 2;
        draw_text(&mut img, &idx, x, 4);
    }

    let mut png = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    write_file(path, &png)?;
    let (csv, names) = plot_sidecars(path);
    write_file(&csv, m.to_csv().as_bytes())?;
    write_file(&names, (m.class_names.join("\n") + "\n").as_bytes())
}

/// 3×5 bitmap glyphs, one row per byte (bit 2 = left column).
fn glyph(ch: char) -> [u8; 5] {
    match ch.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '.' => [0, 0, 0, 0, 2],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        '/' => [1, 1, 2, 4, 4],
        '+' => [0, 2, 7, 2, 0],
        ' ' => [0; 5],
        _ => [7, 1, 2, 0, 2],
    }
}

fn draw_text(img: &mut image::RgbImage, text: &str, x0: usize, y0: usize) {
    for (i, ch) in text.chars().enumerate() {
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let (x, y) = (x0 + i * ADVANCE + col * SCALE + dx, y0 + row * SCALE + dy);
                        if x < img.width() as usize && y < img.height() as usize {
                            img.put_pixel(x as u32, y as u32, image::Rgb([20, 20, 20]));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("class {i}")).collect()
    }

    #[test]
    fn accuracy_examples() {
        let m = ConfusionMatrix::from_counts(names(2), &[vec![5, 0], vec![0, 5]]).unwrap();
        assert_eq!(accuracy_from_confusion(&m).unwrap(), 1.0);
        let m = ConfusionMatrix::from_counts(names(2), &[vec![3, 1], vec![2, 4]]).unwrap();
        assert!((accuracy_from_confusion(&m).unwrap() - 0.7).abs() < 1e-15);
        let m = ConfusionMatrix::from_counts(names(2), &[vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!(accuracy_from_confusion(&m).unwrap(), 1.0);
        assert!(accuracy_from_confusion(&ConfusionMatrix::new(names(3))).is_err());
    }

    #[test]
    fn constant_classifier_fills_one_column() {
        let truth = [0, 0, 1, 2, 2, 2];
        let m = ConfusionMatrix::from_predictions(&truth, &[2; 6], names(3)).unwrap();
        for t in 0..3 {
            for p in 0..2 {
                assert_eq!(m.get(t, p), 0);
            }
        }
        assert_eq!(m.col_sum(2), 6);
        assert_eq!(accuracy_from_confusion(&m).unwrap(), 0.5);
        let r = EvalReport::from_confusion(&m).unwrap();
        assert_eq!(r.recall, vec![0.0, 0.0, 1.0]);
        assert_eq!(r.precision, vec![0.0, 0.0, 0.5]);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let m = ConfusionMatrix::from_counts(vec!["a".into(), "b, c".into()], &[vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(m.to_csv(), "a,\"b, c\"\n1,2\n3,4\n");
    }

    #[test]
    fn table_marks_best_and_drops_dataset_column_for_single_setup() {
        let rows = vec![
            ResultRow {
                experiment: "No pretraining (random initialization)".into(),
                pretrain_dataset: "-".into(),
                accuracy_pct: 50.0,
            },
            ResultRow {
                experiment: "DINO".into(),
                pretrain_dataset: "corpus".into(),
                accuracy_pct: 61.234,
            },
        ];
        let t = render_results_table(&rows, Setup::SingleDataset, "patch_transformer");
        assert!(t.contains("| **DINO** | **61.23** |"));
        assert!(t.contains("| No pretraining (random initialization) | 50.00 |"));
        assert!(!t.contains("Pretraining Dataset"));
        let t = render_results_table(&rows[..1], Setup::Transfer, "patch_transformer");
        assert!(t.contains("| **No pretraining (random initialization)** | **-** | **50.00** |"));
    }

    #[test]
    fn empty_table_has_header_only() {
        let t = render_results_table(&[], Setup::Transfer, "x");
        assert_eq!(t.lines().filter(|l| l.starts_with("| ")).count(), 1);
    }
}
