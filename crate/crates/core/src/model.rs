//! Bayesian-network classifier models: conditional probability tables in log
//! space, naïve Bayes / TAN structures, class log-joints, prediction, and the
//! affine-map view used for budget-matched comparisons.
//!
//! Conventions fixed here so serialized models are portable:
//! - CPT storage is flat with the child value index varying fastest, then the
//!   class, then the feature-parent value.
//! - Prediction ties break toward the smallest class index.
//! - Quantized tables are used as-is; they are never renormalized.

use serde::{Deserialize, Serialize};

use crate::data::DiscreteDataset;
use crate::error::{Error, Result};
use crate::math::{argmax, logsumexp};
use crate::quant::{quantize_bn, BnQuantConfig};

/// Augmenting-parent assignment for a TAN-family classifier. `parents[i]`
/// names the extra feature parent of feature `i` (the class is always an
/// implicit parent); `None` means class-only, so all-`None` is naïve Bayes.
/// `ordering` is the permutation in which features may depend on one another:
/// a parent must appear strictly before its child.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TanStructure {
    pub ordering: Vec<usize>,
    pub parents: Vec<Option<usize>>,
}

impl TanStructure {
    /// Naïve Bayes over `d` features: identity ordering, no feature parents.
    pub fn naive_bayes(d: usize) -> Self {
        TanStructure {
            ordering: (0..d).collect(),
            parents: vec![None; d],
        }
    }

    pub fn num_features(&self) -> usize {
        self.parents.len()
    }

    pub fn is_naive_bayes(&self) -> bool {
        self.parents.iter().all(|p| p.is_none())
    }

    /// Checks that `ordering` is a permutation of `0..d` and every parent
    /// precedes its child in it (acyclicity by construction).
    pub fn validate(&self) -> Result<()> {
        let d = self.parents.len();
        if self.ordering.len() != d {
            return Err(Error::data("ordering and parent list lengths differ"));
        }
        let mut pos = vec![usize::MAX; d];
        for (rank, &f) in self.ordering.iter().enumerate() {
            if f >= d || pos[f] != usize::MAX {
                return Err(Error::data("ordering is not a permutation of the features"));
            }
            pos[f] = rank;
        }
        for (i, parent) in self.parents.iter().enumerate() {
            if let Some(j) = *parent {
                if j >= d {
                    return Err(Error::data(format!("feature {i} has out-of-range parent {j}")));
                }
                if pos[j] >= pos[i] {
                    return Err(Error::data(format!(
                        "feature {i} depends on {j}, which does not precede it"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One conditional probability table in log space.
///
/// `rho` holds unnormalized log-probabilities (the trained parameters),
/// `theta` the normalized version (log-softmax over the child per parent
/// configuration), and `theta_q` an optional quantized copy. The class prior
/// is a `Cpt` with no parents whose child is the class variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpt {
    pub child_card: usize,
    /// Parent cardinalities: empty for the prior, `[C]` for a class-only
    /// feature, `[C, K_j]` with an augmenting parent.
    pub parent_cards: Vec<usize>,
    pub rho: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_q: Option<Vec<f64>>,
}

impl Cpt {
    fn with_cards(child_card: usize, parent_cards: Vec<usize>) -> Self {
        let n = child_card * parent_cards.iter().product::<usize>().max(1);
        let mut cpt = Cpt {
            child_card,
            parent_cards,
            rho: vec![0.0; n],
            theta: vec![0.0; n],
            theta_q: None,
        };
        cpt.normalize();
        cpt
    }

    /// Class prior: a parentless table over `num_classes` values.
    pub fn prior(num_classes: usize) -> Self {
        Cpt::with_cards(num_classes, vec![])
    }

    /// Feature table conditioned on the class only.
    pub fn feature(child_card: usize, num_classes: usize) -> Self {
        Cpt::with_cards(child_card, vec![num_classes])
    }

    /// Feature table conditioned on the class and one feature parent.
    pub fn feature_with_parent(child_card: usize, num_classes: usize, parent_card: usize) -> Self {
        Cpt::with_cards(child_card, vec![num_classes, parent_card])
    }

    /// Class dimension size (1 for the prior).
    pub fn class_card(&self) -> usize {
        self.parent_cards.first().copied().unwrap_or(1)
    }

    /// Feature-parent dimension size (1 when there is none).
    pub fn parent_card(&self) -> usize {
        self.parent_cards.get(1).copied().unwrap_or(1)
    }

    /// Total number of stored log-probabilities.
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Flat index of (child value, class, parent value): child varies fastest,
    /// then class, then parent value.
    #[inline]
    pub fn idx(&self, child: usize, class: usize, parent: usize) -> usize {
        (parent * self.class_card() + class) * self.child_card + child
    }

    /// Recomputes `theta` as the per-configuration log-softmax over `rho`.
    /// The maximum entry of each configuration maps to `-ln(sum) <= 0`, so the
    /// nonpositivity invariant holds exactly.
    pub fn normalize(&mut self) {
        let k = self.child_card;
        for cfg in 0..self.len() / k {
            let slice = &self.rho[cfg * k..(cfg + 1) * k];
            let lse = logsumexp(slice);
            for v in 0..k {
                self.theta[cfg * k + v] = slice[v] - lse;
            }
        }
    }

    /// Fills `theta_q` by quantizing `theta` onto the fixed-point grid.
    pub fn quantize(&mut self, cfg: BnQuantConfig) {
        self.theta_q = Some(self.theta.iter().map(|&t| quantize_bn(t, cfg)).collect());
    }

    /// Table used for inference: the quantized copy when present, else the
    /// normalized one.
    pub fn values(&self) -> &[f64] {
        self.theta_q.as_deref().unwrap_or(&self.theta)
    }
}

/// Dense affine view of a classifier: `scores = W x + b` over a one-hot
/// encoding, with one row per class. `width` is the encoded input length.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub width: usize,
}

impl AffineMap {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Applies the map to an encoded row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.width, "encoded width mismatch");
        self.bias
            .iter()
            .enumerate()
            .map(|(c, &b)| {
                let row = &self.weights[c * self.width..(c + 1) * self.width];
                b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }
}

/// A trained classifier: class prior, one CPT per feature, the structure tying
/// them together, and the quantization grid if the tables are quantized.
/// Immutable after training; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BncModel {
    pub class_prior: Cpt,
    pub cpts: Vec<Cpt>,
    pub structure: TanStructure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<BnQuantConfig>,
}

impl BncModel {
    /// Uniform model (all tables flat) for the given cardinalities and
    /// structure. Starting point for trainers and the lr=0 degenerate case.
    pub fn uniform(cardinalities: &[usize], num_classes: usize, structure: TanStructure) -> Result<Self> {
        structure.validate()?;
        if structure.num_features() != cardinalities.len() {
            return Err(Error::data("structure does not match feature count"));
        }
        let cpts = cardinalities
            .iter()
            .enumerate()
            .map(|(i, &k)| match structure.parents[i] {
                None => Cpt::feature(k, num_classes),
                Some(j) => Cpt::feature_with_parent(k, num_classes, cardinalities[j]),
            })
            .collect();
        Ok(BncModel {
            class_prior: Cpt::prior(num_classes),
            cpts,
            structure,
            quant: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_prior.child_card
    }

    pub fn num_features(&self) -> usize {
        self.cpts.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.cpts.iter().map(|c| c.child_card).collect()
    }

    /// Quantizes every table onto the grid and records the configuration.
    pub fn quantize(&mut self, cfg: BnQuantConfig) {
        self.class_prior.quantize(cfg);
        for cpt in &mut self.cpts {
            cpt.quantize(cfg);
        }
        self.quant = Some(cfg);
    }

    /// Drops quantized tables, reverting to normalized inference.
    pub fn dequantize(&mut self) {
        self.class_prior.theta_q = None;
        for cpt in &mut self.cpts {
            cpt.theta_q = None;
        }
        self.quant = None;
    }

    /// Per-class log-joints for one discrete sample: prior plus one table
    /// lookup per feature. Uses quantized tables when present.
    pub fn log_joint(&self, sample: &[usize]) -> Result<Vec<f64>> {
        let c_n = self.num_classes();
        if sample.len() != self.cpts.len() {
            return Err(Error::data(format!(
                "sample has {} features, model expects {}",
                sample.len(),
                self.cpts.len()
            )));
        }
        let prior = self.class_prior.values();
        let mut scores: Vec<f64> = (0..c_n).map(|c| prior[c]).collect();
        for (i, cpt) in self.cpts.iter().enumerate() {
            let x = sample[i];
            if x >= cpt.child_card {
                return Err(Error::data(format!(
                    "feature {i} value {x} out of range (cardinality {})",
                    cpt.child_card
                )));
            }
            let pv = match self.structure.parents[i] {
                None => 0,
                Some(j) => {
                    let v = sample[j];
                    if v >= cpt.parent_card() {
                        return Err(Error::data(format!(
                            "parent feature {j} value {v} out of range (cardinality {})",
                            cpt.parent_card()
                        )));
                    }
                    v
                }
            };
            let table = cpt.values();
            for (c, s) in scores.iter_mut().enumerate() {
                *s += table[cpt.idx(x, c, pv)];
            }
        }
        Ok(scores)
    }

    /// Most probable class; ties go to the smallest index.
    pub fn predict(&self, sample: &[usize]) -> Result<usize> {
        Ok(argmax(&self.log_joint(sample)?))
    }

    /// Fraction of misclassified samples.
    pub fn error_rate(&self, data: &DiscreteDataset) -> Result<f64> {
        let mut wrong = 0usize;
        for n in 0..data.len() {
            if self.predict(data.row(n))? != data.labels[n] {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / data.len() as f64)
    }

    /// Total parameter count: `C` for the prior plus each table's size.
    pub fn param_count(&self) -> usize {
        self.num_classes() + self.cpts.iter().map(Cpt::len).sum::<usize>()
    }

    /// Casts prediction as `W x + b` over the one-hot encoding where each
    /// feature contributes a block of width `K_i` (class-only) or `K_i * K_j`
    /// (with parent; index `x_i * K_j + x_j`). `b` is the log prior. Built
    /// from the same tables `log_joint` reads, so quantized models yield the
    /// quantized map.
    pub fn to_affine(&self) -> AffineMap {
        let c_n = self.num_classes();
        let width: usize = self
            .cpts
            .iter()
            .map(|cpt| cpt.child_card * cpt.parent_card())
            .sum();
        let mut weights = vec![0.0; c_n * width];
        let mut offset = 0;
        for cpt in &self.cpts {
            let (k, kj) = (cpt.child_card, cpt.parent_card());
            let table = cpt.values();
            for c in 0..c_n {
                let row = &mut weights[c * width..(c + 1) * width];
                for x in 0..k {
                    for pv in 0..kj {
                        row[offset + x * kj + pv] = table[cpt.idx(x, c, pv)];
                    }
                }
            }
            offset += k * kj;
        }
        AffineMap {
            weights,
            bias: self.class_prior.values().to_vec(),
            width,
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let model: BncModel = serde_json::from_reader(std::io::BufReader::new(file))?;
        model.structure.validate()?;
        Ok(model)
    }
}
