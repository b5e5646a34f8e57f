//! Loading raw datasets and producing leakage-safe train/test folds.
//!
//! Discretizer cut points are always fit on the training portion of a fold
//! only, then applied to both sides. Network models consume the same binned
//! features, standardized with statistics that are likewise fit on the
//! training portion only.

use anyhow::{bail, Context, Result};

use bnc_core::data::{
    apply_discretizer, holdout_indices, kfold_indices, load_csv, load_idx_images, mdl_discretize,
    CsvOptions, Discretizer, SplitScheme, Standardizer,
};
use bnc_core::{DiscreteDataset, RawDataset};

use crate::config::{DataFormat, DatasetConfig};

/// One train/test split with shared cut points.
pub struct Fold {
    pub train: DiscreteDataset,
    pub test: DiscreteDataset,
    pub discretizer: Discretizer,
}

impl Fold {
    /// Standardized real-valued views of the binned features, for network
    /// training. Statistics come from the training side.
    pub fn dnn_pair(&self) -> (RawDataset, RawDataset) {
        let std = Standardizer::fit(&self.train);
        let to_raw = |d: &DiscreteDataset| RawDataset {
            samples: std.transform(d),
            labels: d.labels.clone(),
            num_features: d.num_features(),
            num_classes: d.num_classes,
            names: None,
        };
        (to_raw(&self.train), to_raw(&self.test))
    }
}

fn csv_options(cfg: &DatasetConfig) -> Result<CsvOptions> {
    Ok(CsvOptions {
        has_header: cfg.has_header,
        label: cfg.label.clone(),
        delimiter: cfg.delimiter_byte()?,
    })
}

/// Loads the training file (or the whole dataset when no test file is
/// configured).
pub fn load_raw(cfg: &DatasetConfig) -> Result<RawDataset> {
    let data = match cfg.format {
        DataFormat::Csv => load_csv(&cfg.path, &csv_options(cfg)?)?,
        DataFormat::Idx => {
            let labels = cfg
                .labels_path
                .as_ref()
                .context("idx format needs labels_path")?;
            load_idx_images(&cfg.path, labels, cfg.downscale)?
        }
    };
    if data.is_empty() {
        bail!("dataset {} is empty", cfg.path.display());
    }
    Ok(data)
}

/// Loads the held-out test file when one is configured.
pub fn load_raw_test(cfg: &DatasetConfig) -> Result<Option<RawDataset>> {
    let Some(path) = &cfg.test_path else {
        return Ok(None);
    };
    let data = match cfg.format {
        DataFormat::Csv => load_csv(path, &csv_options(cfg)?)?,
        DataFormat::Idx => {
            let labels = cfg
                .test_labels_path
                .as_ref()
                .context("idx format needs test_labels_path alongside test_path")?;
            load_idx_images(path, labels, cfg.downscale)?
        }
    };
    Ok(Some(data))
}

fn make_fold(train_raw: &RawDataset, test_raw: &RawDataset) -> Result<Fold> {
    let discretizer = mdl_discretize(train_raw);
    let train = apply_discretizer(&discretizer, train_raw)?;
    let test = apply_discretizer(&discretizer, test_raw)?;
    Ok(Fold { train, test, discretizer })
}

/// Builds all folds for this dataset. A configured test file yields exactly
/// one fold; otherwise the split scheme decides (holdout = one fold, k-fold
/// = k folds, in fold order).
pub fn prepare_folds(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Fold>> {
    let raw = load_raw(cfg)?;
    if let Some(test) = load_raw_test(cfg)? {
        if test.num_features != raw.num_features {
            bail!(
                "train has {} features but test has {}",
                raw.num_features,
                test.num_features
            );
        }
        return Ok(vec![make_fold(&raw, &test)?]);
    }
    match cfg.split {
        SplitScheme::Holdout => {
            let (train_idx, test_idx) = holdout_indices(raw.len(), seed);
            Ok(vec![make_fold(&raw.subset(&train_idx), &raw.subset(&test_idx))?])
        }
        SplitScheme::Kfold(k) => kfold_indices(raw.len(), k, seed)?
            .into_iter()
            .map(|(train_idx, test_idx)| {
                make_fold(&raw.subset(&train_idx), &raw.subset(&test_idx))
            })
            .collect(),
    }
}
