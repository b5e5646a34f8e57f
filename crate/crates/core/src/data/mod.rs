//! Dataset ingestion, entropy-based discretization, encodings, and splits.
//!
//! Raw datasets hold real-valued features in a flat row-major buffer; the
//! discretizer turns them into bin indices that the classifiers consume
//! directly and the network models consume after standardization.

mod mdlp;

pub use mdlp::mdl_discretize;

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TanStructure;

/// Real-valued dataset: `samples` is row-major `N x D`, labels are class
/// indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub samples: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_features: usize,
    pub num_classes: usize,
    pub names: Option<Vec<String>>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.samples[n * self.num_features..(n + 1) * self.num_features]
    }

    /// New dataset containing the given rows (in the given order).
    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        let mut samples = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &n in indices {
            samples.extend_from_slice(self.row(n));
            labels.push(self.labels[n]);
        }
        RawDataset {
            samples,
            labels,
            num_features: self.num_features,
            num_classes: self.num_classes,
            names: self.names.clone(),
        }
    }
}

/// Which CSV column carries the class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// CSV parsing options. `delimiter` covers space- and tab-separated variants
/// of the classic benchmark files.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label: LabelColumn,
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            has_header: false,
            label: LabelColumn::Index(0),
            delimiter: b',',
        }
    }
}

/// Loads a delimited text file. Labels may be arbitrary strings or numbers;
/// distinct values are mapped to class indices in sorted order (numeric when
/// every label parses as a number, lexicographic otherwise), so absent
/// intermediate codes do not produce empty classes.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .delimiter(opts.delimiter)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let label_idx = match &opts.label {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !opts.has_header {
                return Err(Error::config("label column by name requires a header row"));
            }
            reader
                .headers()?
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::config(format!("label column {name:?} not found")))?
        }
    };

    let names = if opts.has_header {
        Some(
            reader
                .headers()?
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != label_idx)
                .map(|(_, h)| h.to_string())
                .collect(),
        )
    } else {
        None
    };

    let mut width = None;
    let mut values = Vec::new();
    let mut label_strings = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        match width {
            None => {
                if record.len() <= label_idx {
                    return Err(Error::data(format!(
                        "row {line} has {} fields, label column is {label_idx}",
                        record.len()
                    )));
                }
                width = Some(record.len());
            }
            Some(w) if record.len() != w => {
                return Err(Error::data(format!(
                    "row {line} has {} fields, expected {w}",
                    record.len()
                )));
            }
            _ => {}
        }
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                label_strings.push(field.to_string());
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::data(format!("row {line}, column {i}: {field:?} is not numeric"))
                })?;
                values.push(v);
            }
        }
    }
    let width = width.ok_or_else(|| Error::data("empty dataset file"))?;

    let mut distinct: Vec<String> = label_strings.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.iter().all(|s| s.parse::<f64>().is_ok()) {
        distinct.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .partial_cmp(&b.parse::<f64>().unwrap())
                .unwrap()
        });
    }
    let labels = label_strings
        .iter()
        .map(|s| distinct.iter().position(|d| d == s).unwrap())
        .collect();

    Ok(RawDataset {
        samples: values,
        labels,
        num_features: width - 1,
        num_classes: distinct.len(),
        names,
    })
}

/// Loads the big-endian magic-number image/label pair format. Pixels become
/// features row-major; `downscale > 1` averages non-overlapping
/// `downscale x downscale` blocks (image dimensions must divide evenly).
pub fn load_idx_images(images: &Path, labels: &Path, downscale: usize) -> Result<RawDataset> {
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;

    let magic_img = be_u32(&img, 0)?;
    if magic_img != 0x0000_0803 {
        return Err(Error::data(format!("bad image file magic {magic_img:#x}")));
    }
    let n = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    if img.len() != 16 + n * rows * cols {
        return Err(Error::data("image file length does not match header"));
    }

    let magic_lab = be_u32(&lab, 0)?;
    if magic_lab != 0x0000_0801 {
        return Err(Error::data(format!("bad label file magic {magic_lab:#x}")));
    }
    if be_u32(&lab, 4)? as usize != n || lab.len() != 8 + n {
        return Err(Error::data("label file length does not match image count"));
    }

    let ds = downscale.max(1);
    if rows % ds != 0 || cols % ds != 0 {
        return Err(Error::config(format!(
            "downscale factor {ds} does not divide {rows}x{cols}"
        )));
    }
    let (out_r, out_c) = (rows / ds, cols / ds);
    let mut samples = Vec::with_capacity(n * out_r * out_c);
    for i in 0..n {
        let base = 16 + i * rows * cols;
        for r in 0..out_r {
            for c in 0..out_c {
                let mut acc = 0.0;
                for dr in 0..ds {
                    for dc in 0..ds {
                        acc += img[base + (r * ds + dr) * cols + (c * ds + dc)] as f64;
                    }
                }
                samples.push(acc / (ds * ds) as f64);
            }
        }
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(RawDataset {
        samples,
        labels,
        num_features: out_r * out_c,
        num_classes,
        names: None,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data("file truncated"))
}

/// Per-feature cut points learned by `mdl_discretize`. Feature `i` gets
/// `cut_points[i].len() + 1` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub cut_points: Vec<Vec<f64>>,
}

impl Discretizer {
    pub fn num_features(&self) -> usize {
        self.cut_points.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.cut_points.iter().map(|c| c.len() + 1).collect()
    }

    pub fn mean_cardinality(&self) -> f64 {
        let cards = self.cardinalities();
        cards.iter().sum::<usize>() as f64 / cards.len().max(1) as f64
    }

    /// Bin index for one value: the number of cut points at or below it, so a
    /// value equal to a cut lands in the upper bin and out-of-range values
    /// clamp to the outermost bins.
    pub fn bin(&self, feature: usize, value: f64) -> usize {
        self.cut_points[feature].partition_point(|&c| c <= value)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        let d: Discretizer = serde_json::from_str(&text)?;
        for cuts in &d.cut_points {
            if cuts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::data("cut points must strictly increase"));
            }
        }
        Ok(d)
    }
}

/// Discrete dataset: bin indices row-major `N x D` plus per-feature
/// cardinalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDataset {
    pub samples: Vec<usize>,
    pub labels: Vec<usize>,
    pub cardinalities: Vec<usize>,
    pub num_classes: usize,
}

impl DiscreteDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn row(&self, n: usize) -> &[usize] {
        let d = self.num_features();
        &self.samples[n * d..(n + 1) * d]
    }

    /// New dataset containing the given rows (in the given order).
    pub fn subset(&self, indices: &[usize]) -> DiscreteDataset {
        let d = self.num_features();
        let mut samples = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &n in indices {
            samples.extend_from_slice(self.row(n));
            labels.push(self.labels[n]);
        }
        DiscreteDataset {
            samples,
            labels,
            cardinalities: self.cardinalities.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Applies learned cut points to a real-valued dataset.
pub fn apply_discretizer(d: &Discretizer, data: &RawDataset) -> Result<DiscreteDataset> {
    if d.num_features() != data.num_features {
        return Err(Error::data(format!(
            "discretizer covers {} features, data has {}",
            d.num_features(),
            data.num_features
        )));
    }
    let mut samples = Vec::with_capacity(data.samples.len());
    for n in 0..data.len() {
        for (f, &v) in data.row(n).iter().enumerate() {
            samples.push(d.bin(f, v));
        }
    }
    Ok(DiscreteDataset {
        samples,
        labels: data.labels.clone(),
        cardinalities: d.cardinalities(),
        num_classes: data.num_classes,
    })
}

/// One-hot layout selector: independent per-feature blocks, or joint blocks
/// over (feature, augmenting parent) pairs for a given structure.
pub enum EncodeMode<'a> {
    PerFeature,
    ParentPair(&'a TanStructure),
}

/// Encodes every row as a stacked one-hot vector; returns the row-major
/// matrix and its width. In parent-pair mode a feature with parent `j` gets a
/// block of width `K_i * K_j` with the one at `x_i * K_j + x_j`; parentless
/// features keep their plain `K_i` block.
pub fn one_hot_encode(data: &DiscreteDataset, mode: EncodeMode) -> (Vec<f64>, usize) {
    let widths: Vec<usize> = match &mode {
        EncodeMode::PerFeature => data.cardinalities.clone(),
        EncodeMode::ParentPair(st) => data
            .cardinalities
            .iter()
            .enumerate()
            .map(|(i, &k)| match st.parents[i] {
                None => k,
                Some(j) => k * data.cardinalities[j],
            })
            .collect(),
    };
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; data.len() * total];
    for n in 0..data.len() {
        let row = data.row(n);
        let base = n * total;
        let mut offset = 0;
        for (i, &w) in widths.iter().enumerate() {
            let hot = match &mode {
                EncodeMode::PerFeature => row[i],
                EncodeMode::ParentPair(st) => match st.parents[i] {
                    None => row[i],
                    Some(j) => row[i] * data.cardinalities[j] + row[j],
                },
            };
            out[base + offset + hot] = 1.0;
            offset += w;
        }
    }
    (out, total)
}

/// Deterministic split schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    /// Two thirds train, one third test.
    Holdout,
    /// K disjoint, exhaustive folds.
    Kfold(usize),
}

/// Shuffled two-thirds/one-third index split, reproducible from the seed.
pub fn holdout_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off((2 * n + 1) / 3);
    (idx, test)
}

/// K-fold index partition: test folds are disjoint and cover `0..n` exactly
/// once.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || n < k {
        return Err(Error::config(format!("cannot make {k} folds from {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + (f < extra) as usize;
        let test: Vec<usize> = idx[start..start + size].to_vec();
        let train: Vec<usize> = idx[..start]
            .iter()
            .chain(&idx[start + size..])
            .copied()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// Shuffled two-thirds/one-third split, reproducible from the seed.
pub fn holdout_split(data: &DiscreteDataset, seed: u64) -> (DiscreteDataset, DiscreteDataset) {
    let (train, test) = holdout_indices(data.len(), seed);
    (data.subset(&train), data.subset(&test))
}

/// K-fold partition: returns (train, test) per fold; test folds are disjoint
/// and cover every row exactly once.
pub fn kfold_split(
    data: &DiscreteDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(DiscreteDataset, DiscreteDataset)>> {
    Ok(kfold_indices(data.len(), k, seed)?
        .into_iter()
        .map(|(train, test)| (data.subset(&train), data.subset(&test)))
        .collect())
}

/// Per-feature affine normalization fitted on training data: subtract the
/// mean, divide by the population standard deviation (unit divisor for
/// constant features). Network models consume the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &DiscreteDataset) -> Standardizer {
        let d = data.num_features();
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in 0..data.len() {
            for (f, &v) in data.row(r).iter().enumerate() {
                mean[f] += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for r in 0..data.len() {
            for (f, &v) in data.row(r).iter().enumerate() {
                let dlt = v as f64 - mean[f];
                var[f] += dlt * dlt;
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    /// Row-major `N x D` matrix of standardized bin values.
    pub fn transform(&self, data: &DiscreteDataset) -> Vec<f64> {
        let d = data.num_features();
        let mut out = Vec::with_capacity(data.len() * d);
        for r in 0..data.len() {
            for (f, &v) in data.row(r).iter().enumerate() {
                out.push((v as f64 - self.mean[f]) / self.std[f]);
            }
        }
        out
    }
}
