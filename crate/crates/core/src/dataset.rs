//! Dataset manifests, stratified splitting and the procedural corpus.
//!
//! A manifest is a list of image records with an optional class label and
//! an optional split. On disk it is a tab-separated text file:
//!
//! ```text
//! #sslwb-manifest	v1	seed=7
//! images/c01/00000.png	1	train	32	32
//! ```
//!
//! with a sibling `classes.tsv` holding `class_id<TAB>name<TAB>description`.
//! Unlabeled records carry `-` as class id; unassigned records carry `-` as
//! split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "#sslwb-manifest";
pub const CLASS_TABLE_FILE: &str = "classes.tsv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: u32,
    pub name: String,
    pub expected_count: usize,
    pub description: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    /// Locator relative to the manifest's directory (or absolute).
    pub path: String,
    pub class_id: Option<u32>,
    pub split: Option<Split>,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<ClassSpec>,
    pub records: Vec<ImageRecord>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Checks class references, minimum image size and path uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if !ids.insert(c.class_id) {
                return Err(Error::invalid(format!("duplicate class id {}", c.class_id)));
            }
        }
        let mut paths = BTreeSet::new();
        for r in &self.records {
            if let Some(c) = r.class_id {
                if !ids.contains(&c) {
                    return Err(Error::invalid(format!("{}: unknown class id {c}", r.path)));
                }
            }
            if r.width < 8 || r.height < 8 {
                return Err(Error::invalid(format!(
                    "{}: {}x{} is below the 8x8 minimum",
                    r.path, r.width, r.height
                )));
            }
            if !paths.insert(r.path.as_str()) {
                return Err(Error::invalid(format!("duplicate path {}", r.path)));
            }
        }
        Ok(())
    }

    /// True when every record has a ground-truth label.
    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.class_id.is_some())
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == Some(split))
            .collect()
    }

    /// Dense class index (0-based, ordered by class id) for a record.
    pub fn class_index(&self) -> BTreeMap<u32, usize> {
        let mut ids: Vec<u32> = self.classes.iter().map(|c| c.class_id).collect();
        ids.sort_unstable();
        ids.into_iter().enumerate().map(|(i, c)| (c, i)).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut classes = self.classes.clone();
        classes.sort_by_key(|c| c.class_id);
        classes.into_iter().map(|c| c.name).collect()
    }

    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let mut out = format!("{MANIFEST_MAGIC}\tv{MANIFEST_VERSION}\tseed={}\n", self.seed);
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.path,
                r.class_id.map_or("-".to_string(), |c| c.to_string()),
                r.split.map_or("-".to_string(), |s| s.to_string()),
                r.width,
                r.height
            ));
        }
        write_file(manifest_path, out.as_bytes())?;
        let mut table = String::new();
        let mut classes = self.classes.clone();
        classes.sort_by_key(|c| c.class_id);
        for c in &classes {
            table.push_str(&format!("{}\t{}\t{}\n", c.class_id, c.name, c.description));
        }
        write_file(&class_table_path(manifest_path), table.as_bytes())
    }

    /// Reads a manifest and, when present, its sibling class table. Classes
    /// referenced by records but missing from the table are synthesized.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let mut manifest = parse_manifest(&text, &manifest_path.display().to_string())?;
        let table_path = class_table_path(manifest_path);
        let mut classes = if table_path.exists() {
            let t = fs::read_to_string(&table_path).map_err(|e| Error::io(&table_path, e))?;
            parse_class_table(&t, &table_path.display().to_string())?
        } else {
            Vec::new()
        };
        let known: BTreeSet<u32> = classes.iter().map(|c| c.class_id).collect();
        let used: BTreeSet<u32> = manifest.records.iter().filter_map(|r| r.class_id).collect();
        for id in used.difference(&known) {
            classes.push(ClassSpec {
                class_id: *id,
                name: format!("class {id}"),
                expected_count: 0,
                description: String::new(),
            });
        }
        for c in &mut classes {
            c.expected_count = manifest
                .records
                .iter()
                .filter(|r| r.class_id == Some(c.class_id))
                .count();
        }
        classes.sort_by_key(|c| c.class_id);
        manifest.classes = classes;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Resolves a record locator against the manifest directory.
    pub fn resolve(manifest_path: &Path, record: &ImageRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

fn class_table_path(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(CLASS_TABLE_FILE)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_manifest(text: &str, origin: &str) -> Result<DatasetManifest> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty manifest".into()))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.first() != Some(&MANIFEST_MAGIC) {
        return Err(perr(1, format!("missing {MANIFEST_MAGIC} header")));
    }
    let version = fields
        .get(1)
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| perr(1, "missing format version".into()))?;
    if version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let seed = fields
        .iter()
        .find_map(|f| f.strip_prefix("seed="))
        .map(|s| s.parse::<u64>().map_err(|_| perr(1, format!("bad seed {s:?}"))))
        .transpose()?
        .unwrap_or(0);
    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(perr(lineno, format!("expected 5 tab-separated fields, found {}", f.len())));
        }
        let class_id = match f[1] {
            "-" => None,
            s => Some(s.parse::<u32>().map_err(|_| perr(lineno, format!("bad class id {s:?}")))?),
        };
        let split = match f[2] {
            "-" => None,
            s => Some(s.parse::<Split>().map_err(|e| perr(lineno, e))?),
        };
        let dim = |s: &str| s.parse::<u32>().map_err(|_| perr(lineno, format!("bad dimension {s:?}")));
        records.push(ImageRecord {
            path: f[0].to_string(),
            class_id,
            split,
            width: dim(f[3])?,
            height: dim(f[4])?,
        });
    }
    Ok(DatasetManifest {
        classes: Vec::new(),
        records,
        seed,
    })
}

fn parse_class_table(text: &str, origin: &str) -> Result<Vec<ClassSpec>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.splitn(3, '\t').collect();
            let perr = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            if f.len() < 2 {
                return Err(perr("expected class_id, name, description".into()));
            }
            Ok(ClassSpec {
                class_id: f[0].parse().map_err(|_| perr(format!("bad class id {:?}", f[0])))?,
                name: f[1].to_string(),
                expected_count: 0,
                description: f.get(2).unwrap_or(&"").to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("split ratios must lie in [0, 1]"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios sum to {}, not 1",
                parts.iter().sum::<f64>()
            )));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

const EPS: f64 = 1e-9;

/// Floors and fractional parts of `n · ratio` for each split.
fn shares(n: usize, ratios: [f64; 3]) -> ([usize; 3], [f64; 3]) {
    let mut floors = [0; 3];
    let mut fracs = [0.0; 3];
    for j in 0..3 {
        let exact = n as f64 * ratios[j];
        let f = (exact + EPS).floor();
        floors[j] = f as usize;
        fracs[j] = if exact - f > EPS { exact - f } else { 0.0 };
    }
    (floors, fracs)
}

/// Largest-remainder rounding of `n · ratios` (ties to the earlier split).
fn round_total(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let (mut out, fracs) = shares(n, ratios);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]).then(a.cmp(&b)));
    let left = n.saturating_sub(out.iter().sum());
    for &j in order.iter().take(left) {
        out[j] += 1;
    }
    out
}

/// Per-stratum split counts whose column sums equal `totals` and where
/// every count is the floor or ceiling of the stratum's exact share.
///
/// Starting from the floors, each stratum still owes `n_s − Σ floors`
/// records, each placeable in a split where its share has a fractional
/// part. Placement is a bipartite b-matching solved with augmenting paths,
/// preferring splits with larger fractional parts.
fn controlled_rounding(sizes: &[usize], ratios: [f64; 3], totals: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let rounded: Vec<([usize; 3], [f64; 3])> = sizes.iter().map(|&n| shares(n, ratios)).collect();
    let mut counts: Vec<[usize; 3]> = rounded.iter().map(|r| r.0).collect();
    let mut room = [0usize; 3];
    for j in 0..3 {
        let used: usize = counts.iter().map(|c| c[j]).sum();
        room[j] = totals[j]
            .checked_sub(used)
            .ok_or_else(|| Error::invalid("split totals fall below the per-class floors"))?;
    }
    // extra[s][j]: whether stratum s took its ceiling in split j
    let mut extra = vec![[false; 3]; sizes.len()];
    let prefs: Vec<Vec<usize>> = rounded
        .iter()
        .map(|(_, f)| {
            let mut js: Vec<usize> = (0..3).filter(|&j| f[j] > 0.0).collect();
            js.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
            js
        })
        .collect();
    for s in 0..sizes.len() {
        let owed = sizes[s].saturating_sub(counts[s].iter().sum::<usize>());
        for _ in 0..owed {
            if !augment(s, &prefs, &mut extra, &mut room) {
                return Err(Error::invalid("no stratified rounding matches the split totals"));
            }
        }
    }
    for (c, e) in counts.iter_mut().zip(&extra) {
        for j in 0..3 {
            c[j] += e[j] as usize;
        }
    }
    Ok(counts)
}

/// Places one more unit for stratum `start`, moving earlier placements
/// along an alternating path when every preferred split is full.
fn augment(start: usize, prefs: &[Vec<usize>], extra: &mut [[bool; 3]], room: &mut [usize; 3]) -> bool {
    // breadth-first over splits; parent[j] = (stratum entering j, split it left or None)
    let mut parent: [Option<(usize, Option<usize>)>; 3] = [None; 3];
    let mut visited_strata = vec![false; prefs.len()];
    let mut queue = std::collections::VecDeque::new();
    visited_strata[start] = true;
    for &j in &prefs[start] {
        if !extra[start][j] && parent[j].is_none() {
            parent[j] = Some((start, None));
            queue.push_back(j);
        }
    }
    while let Some(j) = queue.pop_front() {
        if room[j] > 0 {
            room[j] -= 1;
            let mut cur = j;
            while let Some((s, from)) = parent[cur] {
                extra[s][cur] = true;
                match from {
                    Some(prev) => {
                        extra[s][prev] = false;
                        cur = prev;
                    }
                    None => break,
                }
            }
            return true;
        }
        // a stratum holding an extra unit in j may move it elsewhere
        for t in 0..prefs.len() {
            if extra[t][j] && !visited_strata[t] {
                visited_strata[t] = true;
                for &k in &prefs[t] {
                    if !extra[t][k] && parent[k].is_none() {
                        parent[k] = Some((t, Some(j)));
                        queue.push_back(k);
                    }
                }
            }
        }
    }
    false
}

/// Stratified random split.
///
/// Global split sizes are the largest-remainder rounding of the ratios
/// times the record count. Within each class (unlabeled records form one
/// extra stratum) every split receives the floor or the ceiling of its
/// exact share, so no class deviates from the ratios by a whole record,
/// while the class counts still add up to the global sizes. Assignment
/// within a class is a seeded shuffle.
pub fn split_dataset(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }
    let mut strata: BTreeMap<Option<u32>, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        strata.entry(r.class_id).or_default().push(i);
    }
    let keys: Vec<Option<u32>> = strata.keys().copied().collect();
    let sizes: Vec<usize> = keys.iter().map(|k| strata[k].len()).collect();
    let r = [ratios.train, ratios.val, ratios.test];
    let counts = controlled_rounding(&sizes, r, round_total(manifest.records.len(), r))?;

    let mut out = manifest.clone();
    out.seed = seed;
    for (s, key) in keys.iter().enumerate() {
        let mut idx = strata[key].clone();
        let stratum = key.map_or(u64::MAX, u64::from);
        idx.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT, stratum]));
        let [_, val, test] = counts[s];
        for (j, &i) in idx.iter().enumerate() {
            out.records[i].split = Some(if j < val {
                Split::Val
            } else if j < val + test {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unassigned: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.unassigned
    }

    fn bump(&mut self, split: Option<Split>) {
        match split {
            Some(Split::Train) => self.train += 1,
            Some(Split::Val) => self.val += 1,
            Some(Split::Test) => self.test += 1,
            None => self.unassigned += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStatistics {
    /// Keyed by class id; `None` collects unlabeled records.
    pub per_class: BTreeMap<Option<u32>, SplitCounts>,
    pub totals: SplitCounts,
    /// Largest over smallest labeled class count.
    pub imbalance_ratio: f64,
}

pub fn class_statistics(manifest: &DatasetManifest) -> Result<ClassStatistics> {
    if manifest.records.is_empty() {
        return Err(Error::invalid("statistics of an empty manifest"));
    }
    let mut per_class: BTreeMap<Option<u32>, SplitCounts> = BTreeMap::new();
    let mut totals = SplitCounts::default();
    for r in &manifest.records {
        per_class.entry(r.class_id).or_default().bump(r.split);
        totals.bump(r.split);
    }
    let labeled: Vec<usize> = per_class
        .iter()
        .filter(|(k, _)| k.is_some())
        .map(|(_, c)| c.total())
        .collect();
    let imbalance_ratio = match (labeled.iter().max(), labeled.iter().min()) {
        (Some(&mx), Some(&mn)) if mn > 0 => mx as f64 / mn as f64,
        _ => 1.0,
    };
    Ok(ClassStatistics {
        per_class,
        totals,
        imbalance_ratio,
    })
}

impl ClassStatistics {
    /// Fixed-width text table, one row per class plus a total row.
    pub fn render(&self, manifest: &DatasetManifest) -> String {
        let names: BTreeMap<u32, &str> = manifest
            .classes
            .iter()
            .map(|c| (c.class_id, c.name.as_str()))
            .collect();
        let mut s = format!(
            "{:>5}  {:<24} {:>7} {:>7} {:>7} {:>7}\n",
            "id", "name", "train", "val", "test", "total"
        );
        for (id, c) in &self.per_class {
            let (ids, name) = match id {
                Some(i) => (i.to_string(), names.get(i).copied().unwrap_or("")),
                None => ("-".to_string(), "(unlabeled)"),
            };
            s.push_str(&format!(
                "{:>5}  {:<24} {:>7} {:>7} {:>7} {:>7}\n",
                ids,
                name,
                c.train,
                c.val,
                c.test,
                c.total()
            ));
        }
        s.push_str(&format!(
            "{:>5}  {:<24} {:>7} {:>7} {:>7} {:>7}\n",
            "", "total", self.totals.train, self.totals.val, self.totals.test, self.totals.total()
        ));
        s.push_str(&format!("imbalance ratio: {:.2}\n", self.imbalance_ratio));
        s
    }
}

/// Reference per-class image counts for the 23-class firearms corpus, in
/// class-id order, with class names.
pub const FIREARMS_CLASSES: [(&str, usize); 23] = [
    ("Bomb", 1245),
    ("Rifle", 2005),
    ("Revolver", 1005),
    ("Rocket", 1073),
    ("Shotgun", 4381),
    ("Knives", 1842),
    ("PCP airguns", 1067),
    ("Pills (drugs)", 1061),
    ("Pistols", 3349),
    ("Weeds", 683),
    ("Seeds (drugs)", 837),
    ("Bullet box", 2081),
    ("Bullets", 1017),
    ("Bow and arrow", 69),
    ("Injectable drugs", 155),
    ("Powder (drugs)", 525),
    ("Military clothing", 237),
    ("Full-face hoods", 761),
    ("Accessories", 207),
    ("Blades", 115),
    ("Gun cases", 470),
    ("Gun storage", 460),
    ("Weapon magazines", 355),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    Noise,
    Checker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceKnobs {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Object scale range as a fraction of the image side.
    pub scale: (f64, f64),
    /// Maximum centre offset as a fraction of the image side.
    pub translate: f64,
    /// Brightness/saturation jitter amplitude.
    pub color_jitter: f64,
    /// Hue jitter around the class hue band, in turns.
    pub hue_jitter: f64,
    /// Number of distinct hue bands; classes share bands when fewer than
    /// the class count.
    pub hue_bands: usize,
    pub backgrounds: Vec<Background>,
}

impl Default for VarianceKnobs {
    fn default() -> Self {
        Self {
            rotation_deg: 180.0,
            scale: (0.45, 0.85),
            translate: 0.15,
            color_jitter: 0.25,
            hue_jitter: 0.05,
            hue_bands: 0,
            backgrounds: vec![
                Background::Flat,
                Background::Gradient,
                Background::Noise,
                Background::Checker,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_classes: usize,
    pub per_class_counts: Vec<usize>,
    pub image_size: u32,
    pub seed: u64,
    #[serde(default)]
    pub variance: VarianceKnobs,
}

impl SyntheticCorpusSpec {
    pub fn uniform(num_classes: usize, per_class: usize, image_size: u32, seed: u64) -> Self {
        Self {
            num_classes,
            per_class_counts: vec![per_class; num_classes],
            image_size,
            seed,
            variance: VarianceKnobs::default(),
        }
    }

    /// 23 classes with counts proportional to the firearms corpus,
    /// each count divided by `divisor` and rounded.
    pub fn firearms_scaled(divisor: f64, image_size: u32, seed: u64) -> Self {
        Self {
            num_classes: FIREARMS_CLASSES.len(),
            per_class_counts: FIREARMS_CLASSES
                .iter()
                .map(|(_, n)| (*n as f64 / divisor).round() as usize)
                .collect(),
            image_size,
            seed,
            variance: VarianceKnobs::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic corpus needs at least 2 classes"));
        }
        if self.image_size < 16 {
            return Err(Error::invalid("synthetic image size must be at least 16"));
        }
        if self.per_class_counts.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} per-class counts for {} classes",
                self.per_class_counts.len(),
                self.num_classes
            )));
        }
        let (lo, hi) = self.variance.scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("object scale range must satisfy 0 < lo <= hi <= 1"));
        }
        if self.variance.backgrounds.is_empty() {
            return Err(Error::invalid("at least one background kind is required"));
        }
        Ok(())
    }

    fn class_spec(&self, c: usize) -> ClassSpec {
        let family = ShapeFamily::of(c, self);
        let name = if self.num_classes == FIREARMS_CLASSES.len() {
            FIREARMS_CLASSES[c].0.to_string()
        } else {
            format!("shape-{:02}", c + 1)
        };
        ClassSpec {
            class_id: c as u32 + 1,
            name,
            expected_count: self.per_class_counts[c],
            description: family.describe(),
        }
    }
}

/// An RGB image with values in `[0, 1]`, stored row-major as `H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(w as usize, h as usize, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Stroke {
    Filled,
    Outline,
    Striped,
    Ring,
}

/// The class-defining procedural family.
#[derive(Clone, Copy, Debug)]
struct ShapeFamily {
    sides: usize,
    stroke: Stroke,
    hue: f64,
}

impl ShapeFamily {
    fn of(class: usize, spec: &SyntheticCorpusSpec) -> Self {
        let sides = 3 + class / 4;
        let stroke = match class % 4 {
            0 => Stroke::Filled,
            1 => Stroke::Outline,
            2 => Stroke::Striped,
            _ => Stroke::Ring,
        };
        let bands = match spec.variance.hue_bands {
            0 => spec.num_classes,
            b => b,
        };
        let band = class % bands;
        // golden-ratio spacing keeps neighbouring bands apart
        let hue = (band as f64 * 0.618_033_988_75).fract();
        Self { sides, stroke, hue }
    }

    fn describe(&self) -> String {
        format!(
            "synthetic {}-gon, {:?} stroke, hue {:.3}",
            self.sides, self.stroke, self.hue
        )
        .to_lowercase()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders sample `index` of class `class` (0-based). Pure function of
/// `(spec, class, index)`.
pub fn render_sample(spec: &SyntheticCorpusSpec, class: usize, index: usize) -> Image {
    let size = spec.image_size as usize;
    let k = &spec.variance;
    let fam = ShapeFamily::of(class, spec);
    let mut r = rng::stream(spec.seed, &[rng::tag::CORPUS, class as u64, index as u64]);

    let rot = (r.gen::<f64>() * 2.0 - 1.0) * k.rotation_deg.to_radians();
    let scale = k.scale.0 + r.gen::<f64>() * (k.scale.1 - k.scale.0);
    let cx = 0.5 + (r.gen::<f64>() * 2.0 - 1.0) * k.translate;
    let cy = 0.5 + (r.gen::<f64>() * 2.0 - 1.0) * k.translate;
    let hue = fam.hue + (r.gen::<f64>() * 2.0 - 1.0) * k.hue_jitter;
    let sat = (0.75 + (r.gen::<f64>() * 2.0 - 1.0) * k.color_jitter).clamp(0.2, 1.0);
    let val = (0.8 + (r.gen::<f64>() * 2.0 - 1.0) * k.color_jitter).clamp(0.3, 1.0);
    let fg = hsv_to_rgb(hue, sat, val);
    let bg_kind = k.backgrounds[r.gen_range(0..k.backgrounds.len())];
    let bg_hue = r.gen::<f64>();
    let bg_a = hsv_to_rgb(bg_hue, 0.15 + 0.2 * r.gen::<f64>(), 0.25 + 0.5 * r.gen::<f64>());
    let bg_b = hsv_to_rgb(bg_hue + 0.5, 0.15 + 0.2 * r.gen::<f64>(), 0.25 + 0.5 * r.gen::<f64>());
    let checker = 2 + r.gen_range(0..4);
    let noise: Vec<f64> = (0..size * size).map(|_| r.gen::<f64>()).collect();
    let stripe_phase = r.gen::<f64>();

    let radius = 0.5 * scale;
    let sides = fam.sides as f64;
    // Signed distance-like polygon test in the shape's rotated frame.
    let polygon_r = |px: f64, py: f64| -> (f64, f64) {
        let (dx, dy) = (px - cx, py - cy);
        let (c, s) = (rot.cos(), rot.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let ang = v.atan2(u);
        let sector = std::f64::consts::TAU / sides;
        let a = (ang.rem_euclid(sector)) - sector / 2.0;
        let edge = radius * (sector / 2.0).cos() / a.cos();
        ((u * u + v * v).sqrt() / edge, u)
    };

    let mut data = Vec::with_capacity(size * size * 3);
    let ss = 3;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / size as f64, y as f64 / size as f64);
            let bg = match bg_kind {
                Background::Flat => bg_a,
                Background::Gradient => {
                    let t = fx * 0.6 + fy * 0.4;
                    [0, 1, 2].map(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t)
                }
                Background::Noise => {
                    let t = noise[y * size + x];
                    [0, 1, 2].map(|c| bg_a[c] * (1.0 - 0.5 * t) + bg_b[c] * 0.5 * t)
                }
                Background::Checker => {
                    let cell = (x * checker / size + y * checker / size) % 2;
                    if cell == 0 {
                        bg_a
                    } else {
                        bg_b
                    }
                }
            };
            let mut cover = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = (x as f64 + (sx as f64 + 0.5) / ss as f64) / size as f64;
                    let py = (y as f64 + (sy as f64 + 0.5) / ss as f64) / size as f64;
                    let (rr, u) = polygon_r(px, py);
                    let inside = match fam.stroke {
                        Stroke::Filled => rr <= 1.0,
                        Stroke::Outline => (0.7..=1.0).contains(&rr),
                        Stroke::Striped => {
                            rr <= 1.0 && ((u / radius * 2.5 + stripe_phase).rem_euclid(1.0) < 0.5)
                        }
                        Stroke::Ring => rr <= 0.45 || (0.8..=1.0).contains(&rr),
                    };
                    if inside {
                        cover += 1.0;
                    }
                }
            }
            let a = cover / (ss * ss) as f64;
            for c in 0..3 {
                data.push((bg[c] * (1.0 - a) + fg[c] * a) as f32);
            }
        }
    }
    Image {
        width: size,
        height: size,
        data,
    }
}

/// Manifest of a synthetic corpus without touching the filesystem.
pub fn synthetic_manifest(spec: &SyntheticCorpusSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let classes = (0..spec.num_classes).map(|c| spec.class_spec(c)).collect();
    let mut records = Vec::new();
    for (c, &n) in spec.per_class_counts.iter().enumerate() {
        for i in 0..n {
            records.push(ImageRecord {
                path: format!("images/c{:02}/{:05}.png", c + 1, i),
                class_id: Some(c as u32 + 1),
                split: None,
                width: spec.image_size,
                height: spec.image_size,
            });
        }
    }
    Ok(DatasetManifest {
        classes,
        records,
        seed: spec.seed,
    })
}

/// Renders every image of the corpus under `out_dir` and writes
/// `manifest.tsv` plus `classes.tsv` there. Returns the manifest path.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let manifest = synthetic_manifest(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut per_class = vec![0usize; spec.num_classes];
    for rec in &manifest.records {
        let c = rec.class_id.expect("synthetic records are labeled") as usize - 1;
        let img = render_sample(spec, c, per_class[c]);
        per_class[c] += 1;
        img.save_png(&out_dir.join(&rec.path))?;
    }
    let path = out_dir.join("manifest.tsv");
    manifest.write(&path)?;
    Ok((manifest, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_manifest(n: usize, classes: u32) -> DatasetManifest {
        DatasetManifest {
            classes: (1..=classes)
                .map(|c| ClassSpec {
                    class_id: c,
                    name: format!("c{c}"),
                    expected_count: 0,
                    description: String::new(),
                })
                .collect(),
            records: (0..n)
                .map(|i| ImageRecord {
                    path: format!("{i}.png"),
                    class_id: Some(i as u32 % classes + 1),
                    split: None,
                    width: 32,
                    height: 32,
                })
                .collect(),
            seed: 0,
        }
    }

    #[test]
    fn degenerate_ratio_puts_everything_in_train() {
        let m = split_dataset(&flat_manifest(10, 2), SplitRatios::new(1.0, 0.0, 0.0).unwrap(), 1).unwrap();
        assert!(m.records.iter().all(|r| r.split == Some(Split::Train)));
    }

    #[test]
    fn seven_single_class_records() {
        let m = split_dataset(&flat_manifest(7, 1), SplitRatios::default(), 1).unwrap();
        let s = class_statistics(&m).unwrap();
        assert_eq!((s.totals.train, s.totals.val, s.totals.test), (5, 1, 1));
    }

    #[test]
    fn split_errors() {
        assert!(SplitRatios::new(0.5, 0.5, 0.5).is_err());
        let empty = flat_manifest(0, 1);
        assert!(split_dataset(&empty, SplitRatios::default(), 0).is_err());
        assert!(class_statistics(&empty).is_err());
    }

    #[test]
    fn uniform_imbalance_is_one() {
        let s = class_statistics(&flat_manifest(10, 2)).unwrap();
        assert_eq!(s.imbalance_ratio, 1.0);
        assert_eq!(s.totals.total(), 10);
    }

    #[test]
    fn firearms_scaled_counts() {
        let spec = SyntheticCorpusSpec::firearms_scaled(50.0, 16, 0);
        assert_eq!(spec.per_class_counts[4], 88);
        assert_eq!(spec.per_class_counts.len(), 23);
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let mut m = split_dataset(&flat_manifest(12, 3), SplitRatios::default(), 4).unwrap();
        m.records[0].class_id = None;
        for c in &mut m.classes {
            c.expected_count = m.records.iter().filter(|r| r.class_id == Some(c.class_id)).count();
        }
        m.write(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(!back.is_labeled());

        fs::write(&path, "#sslwb-manifest\tv1\na.png\t1\ttrain\t32\n").unwrap();
        match DatasetManifest::load(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "#sslwb-manifest\tv9\n").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::VersionMismatch { .. })));
        fs::write(&path, "#sslwb-manifest\tv1\na.png\t1\ttrain\t4\t4\n").unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let spec = SyntheticCorpusSpec::uniform(6, 2, 24, 9);
        let a = render_sample(&spec, 3, 1);
        let b = render_sample(&spec, 3, 1);
        assert_eq!(a, b);
        assert_ne!(a, render_sample(&spec, 3, 0));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(SyntheticCorpusSpec::uniform(1, 2, 24, 0).validate().is_err());
        assert!(SyntheticCorpusSpec::uniform(2, 2, 8, 0).validate().is_err());
    }
}
