//! Labelled feature sets, the synthetic benchmark, file formats and the
//! limited-data subsampling protocol.
//!
//! # Feature file format
//!
//! A UTF-8 JSON header on the first line:
//!
//! ```text
//! {"version":1,"n":N,"d_v":D,"d_a":A,
//!  "classes":[{"id":0,"seen":true},...],
//!  "semantics":[{"id":0,"values":[...A floats...]},...]}
//! ```
//!
//! followed by `\n` and a little-endian payload: `N·D` f32 features
//! (row-major), `N` u32 class ids, then `N` u8 split flags (0 = train,
//! 1 = test).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Features with labels, per-class semantics and the seen/unseen split.
///
/// Class ids are contiguous indices into `semantics` and `seen`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// One row per class.
    pub semantics: Matrix,
    /// Seen flag per class.
    pub seen: Vec<bool>,
}

impl FeatureSet {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        splits: Vec<Split>,
        semantics: Matrix,
        seen: Vec<bool>,
    ) -> Result<Self> {
        let fs = Self {
            features,
            labels,
            splits,
            semantics,
            seen,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.labels.len() != n || self.splits.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} feature rows, {} labels, {} split flags",
                self.labels.len(),
                self.splits.len()
            )));
        }
        if self.semantics.rows() != self.seen.len() {
            return Err(Error::MissingSemantics(
                self.semantics.rows().min(self.seen.len()),
            ));
        }
        for (row, (&y, &s)) in self.labels.iter().zip(&self.splits).enumerate() {
            if y >= self.seen.len() {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: self.seen.len(),
                });
            }
            if !self.seen[y] && s == Split::Train {
                return Err(Error::UnseenInTrain { class: y, row });
            }
        }
        if !self.features.is_finite() || !self.semantics.is_finite() {
            return Err(Error::InvalidArgument(
                "non-finite feature or semantics value".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.seen.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantics.cols()
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.n_classes()).filter(|&c| self.seen[c]).collect()
    }

    pub fn unseen_classes(&self) -> Vec<usize> {
        (0..self.n_classes()).filter(|&c| !self.seen[c]).collect()
    }

    /// Seen-class training rows.
    pub fn train_rows(&self) -> Vec<usize> {
        self.rows_where(|seen, split| seen && split == Split::Train)
    }

    /// Seen-class held-out rows.
    pub fn seen_test_rows(&self) -> Vec<usize> {
        self.rows_where(|seen, split| seen && split == Split::Test)
    }

    pub fn unseen_rows(&self) -> Vec<usize> {
        self.rows_where(|seen, _| !seen)
    }

    fn rows_where(&self, keep: impl Fn(bool, Split) -> bool) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| keep(self.seen[self.labels[i]], self.splits[i]))
            .collect()
    }

    /// Semantics looked up per label.
    pub fn semantics_for(&self, labels: &[usize]) -> Matrix {
        self.semantics.select_rows(labels)
    }

    /// Rows `idx`, keeping the class table.
    pub fn subset(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            semantics: self.semantics.clone(),
            seen: self.seen.clone(),
        }
    }

    /// Same rows and class table with replaced features.
    pub fn with_features(&self, features: Matrix) -> Result<FeatureSet> {
        if features.rows() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows for a set of {}",
                features.rows(),
                self.len()
            )));
        }
        Ok(FeatureSet {
            features,
            ..self.clone()
        })
    }

    /// Count of rows per (class, split).
    pub fn counts(&self) -> BTreeMap<(usize, Split), usize> {
        let mut m = BTreeMap::new();
        for (&y, &s) in self.labels.iter().zip(&self.splits) {
            *m.entry((y, s)).or_insert(0) += 1;
        }
        m
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = FileHeader {
            version: FORMAT_VERSION,
            n: self.len(),
            d_v: self.feature_dim(),
            d_a: self.semantic_dim(),
            classes: self
                .seen
                .iter()
                .enumerate()
                .map(|(i, &seen)| ClassEntry { id: i as u32, seen })
                .collect(),
            semantics: self
                .semantics
                .iter_rows()
                .enumerate()
                .map(|(i, r)| SemanticsRow {
                    id: i as u32,
                    values: r.to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for &x in self.features.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out.extend(self.splits.iter().map(|s| match s {
            Split::Train => 0u8,
            Split::Test => 1u8,
        }));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("no header line".into()))?;
        let header: FileHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut class_index = BTreeMap::new();
        for (i, c) in header.classes.iter().enumerate() {
            if class_index.insert(c.id, i).is_some() {
                return Err(Error::MalformedHeader(format!(
                    "duplicate class id {}",
                    c.id
                )));
            }
        }
        let n_classes = header.classes.len();
        let mut semantics = Matrix::zeros(n_classes, header.d_a);
        let mut have = vec![false; n_classes];
        for row in &header.semantics {
            let &ci = class_index
                .get(&row.id)
                .ok_or(Error::UnknownClass(row.id))?;
            if row.values.len() != header.d_a {
                return Err(Error::DimensionMismatch(format!(
                    "semantics row for class {} has {} values, d_a = {}",
                    row.id,
                    row.values.len(),
                    header.d_a
                )));
            }
            semantics.row_mut(ci).copy_from_slice(&row.values);
            have[ci] = true;
        }
        if let Some(ci) = have.iter().position(|h| !h) {
            return Err(Error::MissingSemantics(header.classes[ci].id as usize));
        }

        let mut cur = Cursor { bytes, pos: nl + 1 };
        let n = header.n;
        let mut feats = Vec::with_capacity(n * header.d_v);
        for _ in 0..n * header.d_v {
            feats.push(f64::from(f32::from_le_bytes(cur.take::<4>("feature")?)));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let id = u32::from_le_bytes(cur.take::<4>("class id")?);
            labels.push(*class_index.get(&id).ok_or(Error::UnknownClass(id))?);
        }
        let mut splits = Vec::with_capacity(n);
        for _ in 0..n {
            let at = cur.pos;
            splits.push(match cur.take::<1>("split flag")?[0] {
                0 => Split::Train,
                1 => Split::Test,
                b => {
                    return Err(Error::Parse {
                        offset: at,
                        msg: format!("invalid split flag {b}"),
                    })
                }
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse {
                offset: cur.pos,
                msg: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        let fs = FeatureSet {
            features: Matrix::from_vec(n, header.d_v, feats)?,
            labels,
            splits,
            semantics,
            seen: header.classes.iter().map(|c| c.seen).collect(),
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Imports a pair of CSV files.
    ///
    /// `features`: header `y,split,v_0,...,v_{d-1}`, split is `train`/`test`.
    /// `semantics`: header `class,seen,a_0,...,a_{k-1}`, seen is `true`/`false`.
    /// Class ids in both files refer to the `class` column.
    pub fn load_csv(features: impl AsRef<Path>, semantics: impl AsRef<Path>) -> Result<Self> {
        let mut sem_reader = csv::Reader::from_path(semantics.as_ref())?;
        let mut class_index = BTreeMap::new();
        let mut seen = Vec::new();
        let mut sem_rows = Vec::new();
        for rec in sem_reader.records() {
            let rec = rec?;
            let id = parse_field::<u32>(&rec, 0, "class")?;
            let is_seen = parse_field::<bool>(&rec, 1, "seen")?;
            let values = (2..rec.len())
                .map(|j| parse_field::<f64>(&rec, j, "semantics value"))
                .collect::<Result<Vec<_>>>()?;
            class_index.insert(id, seen.len());
            seen.push(is_seen);
            sem_rows.push(values);
        }
        let semantics =
            Matrix::from_rows(&sem_rows).map_err(|e| Error::DimensionMismatch(e.to_string()))?;

        let mut feat_reader = csv::Reader::from_path(features.as_ref())?;
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        let mut rows = Vec::new();
        for rec in feat_reader.records() {
            let rec = rec?;
            let id = parse_field::<u32>(&rec, 0, "y")?;
            labels.push(*class_index.get(&id).ok_or(Error::UnknownClass(id))?);
            splits.push(match rec.get(1).map(str::trim) {
                Some("train") => Split::Train,
                Some("test") => Split::Test,
                other => {
                    return Err(Error::Parse {
                        offset: rec.position().map_or(0, |p| p.byte() as usize),
                        msg: format!("bad split {other:?}"),
                    })
                }
            });
            rows.push(
                (2..rec.len())
                    .map(|j| parse_field::<f64>(&rec, j, "feature value"))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let features =
            Matrix::from_rows(&rows).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        FeatureSet::new(features, labels, splits, semantics, seen)
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, j: usize, what: &str) -> Result<T> {
    let offset = rec.position().map_or(0, |p| p.byte() as usize);
    rec.get(j)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            offset,
            msg: format!("cannot parse {what} in column {j}"),
        })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated payload reading {what}"),
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    n: usize,
    d_v: usize,
    d_a: usize,
    classes: Vec<ClassEntry>,
    semantics: Vec<SemanticsRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassEntry {
    id: u32,
    seen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct SemanticsRow {
    id: u32,
    values: Vec<f64>,
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_seen_classes: usize,
    pub n_unseen_classes: usize,
    /// Feature width.
    pub d_v: usize,
    pub d_a: usize,
    pub samples_per_class: usize,
    /// Isotropic standard deviation around each (sub-)cluster mean.
    pub cluster_spread: f64,
    /// Standard deviation of noise added to the published semantics.
    pub semantic_noise: f64,
    /// Number of sub-means per class.
    pub subclusters: usize,
    /// Distance of each sub-mean from the class mean.
    pub subcluster_offset: f64,
    /// Fraction of each seen class held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_seen_classes: 10,
            n_unseen_classes: 5,
            d_v: 32,
            d_a: 8,
            samples_per_class: 200,
            cluster_spread: 1.0,
            semantic_noise: 0.05,
            subclusters: 1,
            subcluster_offset: 0.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.n_seen_classes == 0 || self.n_unseen_classes == 0 {
            return bad("class counts must be >= 1");
        }
        if self.d_v == 0 || self.d_a == 0 || self.samples_per_class == 0 || self.subclusters == 0 {
            return bad("dimensions and counts must be >= 1");
        }
        if !(self.cluster_spread >= 0.0)
            || !(self.semantic_noise >= 0.0)
            || !(self.subcluster_offset >= 0.0)
        {
            return bad("spreads must be non-negative");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Generates the synthetic benchmark.
///
/// Class semantics are uniform on the unit sphere; class means are a fixed
/// random linear image of the semantics, so semantics determine features.
/// Seen classes come first (ids `0..n_seen`).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<FeatureSet> {
    spec.validate()?;
    let rng = Rng::new(spec.seed);
    let n_classes = spec.n_seen_classes + spec.n_unseen_classes;

    let mut sem_rng = rng.substream("semantics");
    let clean = Matrix::from_rows(
        &(0..n_classes)
            .map(|_| unit_vector(spec.d_a, &mut sem_rng))
            .collect::<Vec<_>>(),
    )?;
    let map = rng.substream("map").normal_matrix(spec.d_a, spec.d_v);
    let means = clean.matmul(&map)?;

    let mut pub_rng = rng.substream("published");
    let published = if spec.semantic_noise > 0.0 {
        let rows: Vec<Vec<f64>> = clean
            .iter_rows()
            .map(|r| {
                let noisy: Vec<f64> = r
                    .iter()
                    .map(|x| x + spec.semantic_noise * pub_rng.normal())
                    .collect();
                let n = crate::matrix::norm(&noisy).max(1e-12);
                noisy.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Matrix::from_rows(&rows)?
    } else {
        clean.clone()
    };

    let mut sub_rng = rng.substream("subclusters");
    let mut noise_rng = rng.substream("samples");
    let mut split_rng = rng.substream("split");
    let n_test = (spec.test_fraction * spec.samples_per_class as f64).round() as usize;
    let mut data = Vec::with_capacity(n_classes * spec.samples_per_class * spec.d_v);
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for c in 0..n_classes {
        let sub_means: Vec<Vec<f64>> = (0..spec.subclusters)
            .map(|_| {
                let dir = unit_vector(spec.d_v, &mut sub_rng);
                means
                    .row(c)
                    .iter()
                    .zip(dir)
                    .map(|(m, d)| {
                        if spec.subclusters > 1 {
                            m + spec.subcluster_offset * d
                        } else {
                            *m
                        }
                    })
                    .collect()
            })
            .collect();
        for i in 0..spec.samples_per_class {
            let mu = &sub_means[i % spec.subclusters];
            data.extend(
                mu.iter()
                    .map(|m| m + spec.cluster_spread * noise_rng.normal()),
            );
            labels.push(c);
        }
        if c < spec.n_seen_classes {
            let test = split_rng.sample_indices(spec.samples_per_class, n_test);
            let mut s = vec![Split::Train; spec.samples_per_class];
            for i in test {
                s[i] = Split::Test;
            }
            splits.extend(s);
        } else {
            splits.extend(std::iter::repeat_n(Split::Test, spec.samples_per_class));
        }
    }
    let seen = (0..n_classes).map(|c| c < spec.n_seen_classes).collect();
    FeatureSet::new(
        Matrix::from_vec(labels.len(), spec.d_v, data)?,
        labels,
        splits,
        published,
        seen,
    )
}

fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = crate::matrix::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `⌈ratio · n⌉`, robust to the representation error of decimal ratios.
pub fn kept_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n.max(1)).min(n)
}

/// Keeps `⌈ratio · n_c⌉` training rows of every seen class, sampled
/// uniformly without replacement. Test and unseen rows are untouched.
pub fn subsample_train(fs: &FeatureSet, ratio: f64, rng: &mut Rng) -> Result<FeatureSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} outside (0, 1]"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in fs.train_rows() {
        by_class.entry(fs.labels[i]).or_default().push(i);
    }
    let mut drop = vec![false; fs.len()];
    for rows in by_class.values() {
        let keep = kept_count(ratio, rows.len());
        let kept = rng.sample_indices(rows.len(), keep);
        let mut flags = vec![true; rows.len()];
        for k in kept {
            flags[k] = false;
        }
        for (&r, d) in rows.iter().zip(flags) {
            drop[r] = d;
        }
    }
    let idx: Vec<usize> = (0..fs.len()).filter(|&i| !drop[i]).collect();
    Ok(fs.subset(&idx))
}
