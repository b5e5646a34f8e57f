//! Differentiable, size-aware structure learning for tree-augmented
//! classifiers.
//!
//! Each feature carries a categorical distribution over its candidate parents
//! ({no parent} plus a bounded set of earlier features). Training draws hard
//! structures with straight-through Gumbel-softmax samples, evaluates the
//! hybrid loss under the sampled structure, and adds a closed-form expected
//! model-size penalty; the parent logits and a bank of per-candidate CPTs are
//! updated jointly. The most probable structure is then extracted and its
//! CPTs fine-tuned.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::DiscreteDataset;
use crate::error::{Error, Result};
use crate::math::softmax_in_place;
use crate::model::{BncModel, Cpt, TanStructure};
use crate::train::{
    adam_step, hybrid_sample_grad, lr_schedule, through_normalization, train_bnc_warm, AdamState,
    HybridConfig, OptimizerConfig, TrainHistory, WarmStart,
};

/// Largest candidate-parent set per feature.
pub const MAX_CANDIDATES: usize = 8;

/// A categorical distribution over parent assignments: for each feature, a
/// logit vector over {no parent} ∪ its candidate set. Candidates always
/// precede the feature in the ordering, so every selection is acyclic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureDistribution {
    /// Permutation of feature ids; parents must come earlier than children.
    pub ordering: Vec<usize>,
    /// Per feature id: candidate parent feature ids (each earlier in the
    /// ordering), at most [`MAX_CANDIDATES`].
    pub candidates: Vec<Vec<usize>>,
    /// Per feature id: `candidates[i].len() + 1` logits; slot 0 is
    /// "no parent", slot k ≥ 1 is `candidates[i][k - 1]`.
    pub logits: Vec<Vec<f64>>,
}

impl StructureDistribution {
    /// Uniform distribution (zero logits) over the given candidate sets.
    pub fn new(ordering: Vec<usize>, candidates: Vec<Vec<usize>>) -> Result<Self> {
        let logits = candidates.iter().map(|c| vec![0.0; c.len() + 1]).collect();
        let dist = StructureDistribution { ordering, candidates, logits };
        dist.validate()?;
        Ok(dist)
    }

    /// Seeded random ordering with, per feature, a random subset of its
    /// predecessors capped at `max_candidates`.
    pub fn random(num_features: usize, max_candidates: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ordering: Vec<usize> = (0..num_features).collect();
        ordering.shuffle(&mut rng);
        let mut candidates = vec![Vec::new(); num_features];
        for pos in 1..num_features {
            let feature = ordering[pos];
            let mut pool: Vec<usize> = ordering[..pos].to_vec();
            if pool.len() > max_candidates {
                pool.shuffle(&mut rng);
                pool.truncate(max_candidates);
            }
            // Stable presentation order regardless of how the subset fell out.
            pool.sort_unstable();
            candidates[feature] = pool;
        }
        StructureDistribution::new(ordering, candidates)
    }

    pub fn num_features(&self) -> usize {
        self.ordering.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.ordering.len();
        if self.candidates.len() != d || self.logits.len() != d {
            return Err(Error::config("candidate and logit arity must match the ordering"));
        }
        let mut pos = vec![usize::MAX; d];
        for (p, &f) in self.ordering.iter().enumerate() {
            if f >= d || pos[f] != usize::MAX {
                return Err(Error::config("ordering is not a permutation of the features"));
            }
            pos[f] = p;
        }
        for i in 0..d {
            if self.candidates[i].len() > MAX_CANDIDATES {
                return Err(Error::config(format!(
                    "feature {i} has {} candidates; at most {MAX_CANDIDATES} allowed",
                    self.candidates[i].len()
                )));
            }
            if self.logits[i].len() != self.candidates[i].len() + 1 {
                return Err(Error::config(format!("feature {i} logit arity mismatch")));
            }
            let mut seen = vec![false; d];
            for &j in &self.candidates[i] {
                if j >= d || pos[j] >= pos[i] {
                    return Err(Error::config(format!(
                        "candidate parent {j} of feature {i} does not precede it"
                    )));
                }
                if seen[j] {
                    return Err(Error::config(format!("duplicate candidate {j} for feature {i}")));
                }
                seen[j] = true;
            }
        }
        Ok(())
    }

    /// Selection probabilities for one feature: softmax of its logits.
    pub fn probabilities(&self, feature: usize) -> Vec<f64> {
        let mut p = self.logits[feature].clone();
        softmax_in_place(&mut p);
        p
    }
}

/// All CPTs structure learning can choose from: per feature, slot 0 holds the
/// parentless table and slot k ≥ 1 the table conditioned on candidate k−1.
#[derive(Debug, Clone, PartialEq)]
pub struct CptBank {
    pub class_prior: Cpt,
    pub slots: Vec<Vec<Cpt>>,
}

impl CptBank {
    pub fn new(
        cardinalities: &[usize],
        num_classes: usize,
        dist: &StructureDistribution,
    ) -> Result<Self> {
        dist.validate()?;
        if dist.num_features() != cardinalities.len() {
            return Err(Error::data("candidate sets do not match the feature count"));
        }
        let slots = cardinalities
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut row = vec![Cpt::feature(k, num_classes)];
                for &j in &dist.candidates[i] {
                    row.push(Cpt::feature_with_parent(k, num_classes, cardinalities[j]));
                }
                row
            })
            .collect();
        Ok(CptBank { class_prior: Cpt::prior(num_classes), slots })
    }

    fn normalize_all(&mut self) {
        self.class_prior.normalize();
        for row in &mut self.slots {
            for cpt in row {
                cpt.normalize();
            }
        }
    }
}

/// Size-penalty and sampling configuration for structure learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SizePenaltyConfig {
    pub lambda_ms: f64,
    pub tau: f64,
    pub samples_per_step: usize,
}

impl Default for SizePenaltyConfig {
    fn default() -> Self {
        SizePenaltyConfig { lambda_ms: 0.0, tau: 1.0, samples_per_step: 1 }
    }
}

impl SizePenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ms >= 0.0 && self.lambda_ms.is_finite()) {
            return Err(Error::config("lambda_ms must be finite and >= 0"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be finite and > 0"));
        }
        if self.samples_per_step == 0 {
            return Err(Error::config("samples_per_step must be >= 1"));
        }
        Ok(())
    }
}

/// One straight-through draw: the hard selection per feature plus the soft
/// relaxation the backward pass differentiates.
#[derive(Debug, Clone)]
pub struct StructureSample {
    /// Selected slot per feature (0 = no parent).
    pub hard: Vec<usize>,
    /// Tempered softmax over `logits + Gumbel noise`, per feature.
    pub soft: Vec<Vec<f64>>,
}

/// Draws one structure: per feature, perturb the logits with Gumbel(0,1)
/// noise, soften at temperature `tau`, and take the argmax as the hard
/// selection. The hard draw is an exact sample from softmax(logits).
pub fn sample_structure(
    dist: &StructureDistribution,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> StructureSample {
    let mut hard = Vec::with_capacity(dist.num_features());
    let mut soft = Vec::with_capacity(dist.num_features());
    for logits in &dist.logits {
        let mut z: Vec<f64> = logits
            .iter()
            .map(|&l| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                l - (-u.ln()).ln()
            })
            .collect();
        let mut best = 0;
        for (k, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = k;
            }
        }
        hard.push(best);
        z.iter_mut().for_each(|v| *v /= tau);
        softmax_in_place(&mut z);
        soft.push(z);
    }
    StructureSample { hard, soft }
}

/// Per-class log-joints under structure weights `s` (one weight vector per
/// feature over its slots): log prior + Σ_i Σ_k s_{i,k} · θ_{i|k} lookup.
/// With one-hot `s` this is exactly the selected structure's log-joint.
pub fn structure_log_joint(
    bank: &CptBank,
    dist: &StructureDistribution,
    s: &[Vec<f64>],
    sample: &[usize],
) -> Result<Vec<f64>> {
    let d = dist.num_features();
    if s.len() != d || sample.len() != d {
        return Err(Error::data("structure weights do not match the feature count"));
    }
    let c_n = bank.class_prior.child_card;
    let mut lj = bank.class_prior.values().to_vec();
    for i in 0..d {
        if s[i].len() != bank.slots[i].len() {
            return Err(Error::data(format!("feature {i} has mismatched slot weights")));
        }
        for (k, (&w, cpt)) in s[i].iter().zip(&bank.slots[i]).enumerate() {
            if w == 0.0 {
                continue;
            }
            let pv = if k == 0 { 0 } else { sample[dist.candidates[i][k - 1]] };
            let values = cpt.values();
            for (c, lj_c) in lj.iter_mut().enumerate().take(c_n) {
                *lj_c += w * values[cpt.idx(sample[i], c, pv)];
            }
        }
    }
    Ok(lj)
}

/// Parameter count of a candidate slot's table.
fn slot_size(dist: &StructureDistribution, cards: &[usize], c: usize, i: usize, k: usize) -> f64 {
    let own = cards[i] * c;
    if k == 0 {
        own as f64
    } else {
        (own * cards[dist.candidates[i][k - 1]]) as f64
    }
}

/// Closed-form expectation of the selected model's parameter count:
/// `C + Σ_i Σ_k φ_{i,k} · |θ_{i|k}|`.
pub fn expected_model_size(
    dist: &StructureDistribution,
    cardinalities: &[usize],
    num_classes: usize,
) -> f64 {
    let mut total = num_classes as f64;
    for i in 0..dist.num_features() {
        let phi = dist.probabilities(i);
        for (k, &p) in phi.iter().enumerate() {
            total += p * slot_size(dist, cardinalities, num_classes, i, k);
        }
    }
    total
}

/// Gradient buffers for one structure-learning step.
#[derive(Debug, Clone)]
pub(crate) struct StructureGrads {
    pub prior: Vec<f64>,
    pub slots: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
    /// Bank slots touched by the hard samples this step (that received
    /// table gradients).
    pub touched: Vec<(usize, usize)>,
}

impl StructureGrads {
    fn zeros_like(bank: &CptBank, dist: &StructureDistribution) -> Self {
        StructureGrads {
            prior: vec![0.0; bank.class_prior.len()],
            slots: bank
                .slots
                .iter()
                .map(|row| row.iter().map(|c| vec![0.0; c.len()]).collect())
                .collect(),
            logits: dist.logits.iter().map(|l| vec![0.0; l.len()]).collect(),
            touched: Vec::new(),
        }
    }

    fn zero(&mut self) {
        self.prior.iter_mut().for_each(|g| *g = 0.0);
        for row in &mut self.slots {
            for g in row {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        for g in &mut self.logits {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.touched.clear();
    }
}

/// Monte Carlo structure loss over the given rows plus gradients.
///
/// Per draw: hard-structure forward, hybrid loss, table gradients to the
/// selected slots only, and parent-logit gradients through the soft
/// relaxation (the loss is linear in the structure weights, so ∂loss/∂s is
/// available for every slot). The size penalty and its gradient are exact.
#[allow(clippy::too_many_arguments)]
pub(crate) fn structure_loss_and_grads(
    dist: &StructureDistribution,
    bank: &CptBank,
    data: &DiscreteDataset,
    rows: &[usize],
    hyb: &HybridConfig,
    penalty: &SizePenaltyConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut StructureGrads,
) -> Result<f64> {
    grads.zero();
    let d = dist.num_features();
    let c_n = bank.class_prior.child_card;
    let inv_b = 1.0 / rows.len() as f64;
    let inv_s = 1.0 / penalty.samples_per_step as f64;
    let mut loss = 0.0;
    let mut dlj = vec![0.0; c_n];
    let mut ds = vec![0.0; 0];

    for _ in 0..penalty.samples_per_step {
        let draw = sample_structure(dist, penalty.tau, rng);
        for (i, &k) in draw.hard.iter().enumerate() {
            if !grads.touched.contains(&(i, k)) {
                grads.touched.push((i, k));
            }
        }
        for &n in rows {
            let row = data.row(n);
            let y = data.labels[n];

            // Hard forward.
            let mut lj = bank.class_prior.values().to_vec();
            for (i, &k) in draw.hard.iter().enumerate() {
                let cpt = &bank.slots[i][k];
                let pv = if k == 0 { 0 } else { row[dist.candidates[i][k - 1]] };
                let values = cpt.values();
                for (c, lj_c) in lj.iter_mut().enumerate() {
                    *lj_c += values[cpt.idx(row[i], c, pv)];
                }
            }
            loss += hybrid_sample_grad(&lj, y, hyb, inv_b, &mut dlj) * inv_s;

            for (c, &g) in dlj.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let g = g * inv_s;
                grads.prior[c] += g;
                // Straight-through: table gradients follow the hard draw.
                for (i, &k) in draw.hard.iter().enumerate() {
                    let cpt = &bank.slots[i][k];
                    let pv = if k == 0 { 0 } else { row[dist.candidates[i][k - 1]] };
                    grads.slots[i][k][cpt.idx(row[i], c, pv)] += g;
                }
            }

            // Logit gradients: the log-joint is linear in the structure
            // weights, so ∂loss/∂s_{i,k} is a table lookup for every slot,
            // then the tempered-softmax Jacobian maps ds to dlogits.
            for i in 0..d {
                let slots = &bank.slots[i];
                ds.resize(slots.len(), 0.0);
                ds.iter_mut().for_each(|v| *v = 0.0);
                for (k, cpt) in slots.iter().enumerate() {
                    let pv = if k == 0 { 0 } else { row[dist.candidates[i][k - 1]] };
                    let values = cpt.values();
                    let mut acc = 0.0;
                    for (c, &g) in dlj.iter().enumerate() {
                        if g != 0.0 {
                            acc += g * values[cpt.idx(row[i], c, pv)];
                        }
                    }
                    ds[k] = acc * inv_s;
                }
                let soft = &draw.soft[i];
                let dot: f64 = ds.iter().zip(soft).map(|(a, b)| a * b).sum();
                for (k, dl) in grads.logits[i].iter_mut().enumerate() {
                    *dl += soft[k] * (ds[k] - dot) / penalty.tau;
                }
            }
        }
    }

    // Exact size penalty on the unperturbed selection probabilities.
    if penalty.lambda_ms > 0.0 {
        loss += penalty.lambda_ms * expected_model_size(dist, &data.cardinalities, c_n);
        for i in 0..d {
            let phi = dist.probabilities(i);
            let sizes: Vec<f64> = (0..phi.len())
                .map(|k| slot_size(dist, &data.cardinalities, c_n, i, k))
                .collect();
            let mean: f64 = phi.iter().zip(&sizes).map(|(p, s)| p * s).sum();
            for (k, dl) in grads.logits[i].iter_mut().enumerate() {
                *dl += penalty.lambda_ms * phi[k] * (sizes[k] - mean);
            }
        }
    }

    // Table gradients pass through the log-softmax normalization.
    through_normalization(&bank.class_prior, &mut grads.prior);
    for &(i, k) in &grads.touched {
        through_normalization(&bank.slots[i][k], &mut grads.slots[i][k]);
    }
    Ok(loss)
}

/// Most probable structure under the distribution: per-feature argmax of the
/// selection probabilities, ties resolved toward "no parent" and then the
/// earlier candidate (the smaller model).
pub fn select_map_structure(dist: &StructureDistribution) -> TanStructure {
    let d = dist.num_features();
    let mut parents = vec![None; d];
    for i in 0..d {
        let logits = &dist.logits[i];
        let mut best = 0usize;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        if best > 0 {
            parents[i] = Some(dist.candidates[i][best - 1]);
        }
    }
    TanStructure { ordering: dist.ordering.clone(), parents }
}

/// Assembles the model the distribution currently selects: MAP structure with
/// its CPTs copied out of the bank.
fn extract_map_model(
    bank: &CptBank,
    dist: &StructureDistribution,
    cards: &[usize],
    num_classes: usize,
) -> Result<(TanStructure, BncModel)> {
    let structure = select_map_structure(dist);
    let mut model = BncModel::uniform(cards, num_classes, structure.clone())?;
    model.class_prior.rho = bank.class_prior.rho.clone();
    model.class_prior.normalize();
    for i in 0..dist.num_features() {
        let slot = match structure.parents[i] {
            None => 0,
            Some(j) => {
                1 + dist.candidates[i].iter().position(|&c| c == j).expect("parent from candidates")
            }
        };
        model.cpts[i].rho = bank.slots[i][slot].rho.clone();
        model.cpts[i].normalize();
    }
    Ok((structure, model))
}

/// A finished structure-learning run.
#[derive(Debug, Clone)]
pub struct StructureOutcome {
    pub structure: TanStructure,
    pub model: BncModel,
    pub history: TrainHistory,
    /// The distribution at convergence (selection probabilities for reports).
    pub distribution: StructureDistribution,
}

/// Jointly trains parent logits and the CPT bank on the penalized objective,
/// then extracts the most probable structure and fine-tunes its CPTs for 10%
/// of the epoch budget with the structure frozen.
pub fn train_structure(
    train: &DiscreteDataset,
    test: Option<&DiscreteDataset>,
    mut dist: StructureDistribution,
    hyb: &HybridConfig,
    opt: &OptimizerConfig,
    penalty: &SizePenaltyConfig,
    seed: u64,
) -> Result<StructureOutcome> {
    hyb.validate()?;
    opt.validate()?;
    penalty.validate()?;
    dist.validate()?;
    if train.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    if dist.num_features() != train.cardinalities.len() {
        return Err(Error::data("candidate sets do not match the feature count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = CptBank::new(&train.cardinalities, train.num_classes, &dist)?;
    for r in &mut bank.class_prior.rho {
        *r = rng.random_range(-0.1..0.1);
    }
    for row in &mut bank.slots {
        for cpt in row {
            for r in &mut cpt.rho {
                *r = rng.random_range(-0.1..0.1);
            }
        }
    }
    bank.normalize_all();

    let mut prior_state = AdamState::new(bank.class_prior.len());
    let mut slot_states: Vec<Vec<AdamState>> = bank
        .slots
        .iter()
        .map(|row| row.iter().map(|c| AdamState::new(c.len())).collect())
        .collect();
    let mut logit_states: Vec<AdamState> =
        dist.logits.iter().map(|l| AdamState::new(l.len())).collect();
    let mut grads = StructureGrads::zeros_like(&bank, &dist);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..opt.epochs {
        let lr = lr_schedule(epoch, opt);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(opt.batch_size) {
            epoch_loss += structure_loss_and_grads(
                &dist, &bank, train, batch, hyb, penalty, &mut rng, &mut grads,
            )?;
            batches += 1;
            adam_step(&mut bank.class_prior.rho, &grads.prior, &mut prior_state, opt, lr);
            bank.class_prior.normalize();
            // Only slots selected by this step's draws received table
            // gradients; their optimizer state advances lazily.
            for &(i, k) in &grads.touched {
                adam_step(
                    &mut bank.slots[i][k].rho,
                    &grads.slots[i][k],
                    &mut slot_states[i][k],
                    opt,
                    lr,
                );
                bank.slots[i][k].normalize();
            }
            for ((logits, g), st) in
                dist.logits.iter_mut().zip(&grads.logits).zip(&mut logit_states)
            {
                adam_step(logits, g, st, opt, lr);
            }
        }
        let (_, snapshot) =
            extract_map_model(&bank, &dist, &train.cardinalities, train.num_classes)?;
        history.epochs.push(crate::train::EpochStats {
            epoch,
            lr,
            train_loss: epoch_loss / batches as f64,
            train_err: snapshot.error_rate(train)?,
            test_err: match test {
                Some(t) => snapshot.error_rate(t)?,
                None => f64::NAN,
            },
        });
    }

    let (structure, map_model) =
        extract_map_model(&bank, &dist, &train.cardinalities, train.num_classes)?;
    let fine_epochs = (opt.epochs / 10).max(1);
    let fine_opt = OptimizerConfig { epochs: fine_epochs, ..*opt };
    let warm = WarmStart {
        prior_rho: map_model.class_prior.rho.clone(),
        cpt_rhos: map_model.cpts.iter().map(|c| c.rho.clone()).collect(),
    };
    let (model, fine_history) = train_bnc_warm(
        train,
        test,
        structure.clone(),
        None,
        hyb,
        &fine_opt,
        rng.random::<u64>(),
        Some(warm),
    )?;
    for (offset, e) in fine_history.epochs.iter().enumerate() {
        history.epochs.push(crate::train::EpochStats { epoch: opt.epochs + offset, ..e.clone() });
    }
    Ok(StructureOutcome { structure, model, history, distribution: dist })
}

/// Serializable summary of a learned structure: the ordering, the parent
/// map, and the converged selection probabilities per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedStructure {
    pub ordering: Vec<usize>,
    pub parents: Vec<Option<usize>>,
    pub candidates: Vec<Vec<usize>>,
    pub probabilities: Vec<Vec<f64>>,
}

impl LearnedStructure {
    pub fn from_outcome(outcome: &StructureOutcome) -> Self {
        LearnedStructure {
            ordering: outcome.structure.ordering.clone(),
            parents: outcome.structure.parents.clone(),
            candidates: outcome.distribution.candidates.clone(),
            probabilities: (0..outcome.distribution.num_features())
                .map(|i| outcome.distribution.probabilities(i))
                .collect(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Chain ordering 0,1,2,... with all predecessors as candidates.
    fn chain_dist(d: usize) -> StructureDistribution {
        let candidates = (0..d).map(|i| (0..i).collect()).collect();
        StructureDistribution::new((0..d).collect(), candidates).unwrap()
    }

    fn seeded_bank(cards: &[usize], c: usize, dist: &StructureDistribution, seed: u64) -> CptBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = CptBank::new(cards, c, dist).unwrap();
        for r in &mut bank.class_prior.rho {
            *r = rng.random_range(-1.0..1.0);
        }
        for row in &mut bank.slots {
            for cpt in row {
                for r in &mut cpt.rho {
                    *r = rng.random_range(-1.0..1.0);
                }
            }
        }
        bank.normalize_all();
        bank
    }

    #[test]
    fn random_candidate_sets_respect_the_ordering_and_cap() {
        for seed in 0..5 {
            let dist = StructureDistribution::random(20, MAX_CANDIDATES, seed).unwrap();
            dist.validate().unwrap();
            let pos: Vec<usize> = {
                let mut p = vec![0; 20];
                for (i, &f) in dist.ordering.iter().enumerate() {
                    p[f] = i;
                }
                p
            };
            for i in 0..20 {
                assert!(dist.candidates[i].len() <= MAX_CANDIDATES);
                for &j in &dist.candidates[i] {
                    assert!(pos[j] < pos[i]);
                }
            }
            // The feature opening the ordering can have no parents.
            assert!(dist.candidates[dist.ordering[0]].is_empty());
        }
    }

    #[test]
    fn dominant_logit_always_wins_the_draw() {
        let mut dist = chain_dist(2);
        dist.logits[1] = vec![100.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = sample_structure(&dist, 1.0, &mut rng);
            assert_eq!(s.hard[1], 0);
            // Soft vectors are valid probabilities.
            for soft in &s.soft {
                assert_abs_diff_eq!(soft.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                assert!(soft.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn uniform_logits_split_draws_evenly() {
        let dist = chain_dist(2);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut none_count = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            if sample_structure(&dist, 1.0, &mut rng).hard[1] == 0 {
                none_count += 1;
            }
        }
        let freq = none_count as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn hard_draws_follow_the_softmax_marginals() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // Ten features with slot counts 1..=9: chi-square goodness-of-fit
        // per feature over 10^4 joint draws.
        let d = 10;
        let candidates: Vec<Vec<usize>> =
            (0..d).map(|i| (0..i.min(MAX_CANDIDATES)).collect()).collect();
        let mut dist = StructureDistribution::new((0..d).collect(), candidates).unwrap();
        let mut seed_rng = ChaCha8Rng::seed_from_u64(7);
        for l in &mut dist.logits {
            for v in l.iter_mut() {
                *v = seed_rng.random_range(-1.5..1.5);
            }
        }
        let draws = 10_000usize;
        let mut counts: Vec<Vec<f64>> =
            dist.logits.iter().map(|l| vec![0.0; l.len()]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..draws {
            let s = sample_structure(&dist, 0.37, &mut rng);
            for (i, &k) in s.hard.iter().enumerate() {
                counts[i][k] += 1.0;
            }
        }
        for i in 1..d {
            let expected: Vec<f64> =
                dist.probabilities(i).iter().map(|p| p * draws as f64).collect();
            let stat: f64 = counts[i]
                .iter()
                .zip(&expected)
                .map(|(o, e)| (o - e) * (o - e) / e)
                .sum();
            let dof = (counts[i].len() - 1) as f64;
            let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
            assert!(p > 0.01, "feature {i}: chi2 {stat}, p {p}");
        }
    }

    #[test]
    fn all_none_selection_matches_naive_bayes_log_joint() {
        let cards = [2usize, 3, 2];
        let dist = chain_dist(3);
        let bank = seeded_bank(&cards, 2, &dist, 3);
        let s: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let mut v = vec![0.0; bank.slots[i].len()];
                v[0] = 1.0;
                v
            })
            .collect();
        // Equivalent plain model.
        let mut nb = BncModel::uniform(&cards, 2, TanStructure::naive_bayes(3)).unwrap();
        nb.class_prior.rho = bank.class_prior.rho.clone();
        nb.class_prior.normalize();
        for i in 0..3 {
            nb.cpts[i].rho = bank.slots[i][0].rho.clone();
            nb.cpts[i].normalize();
        }
        for sample in [[0, 0, 0], [1, 2, 1], [0, 1, 1]] {
            let got = structure_log_joint(&bank, &dist, &s, &sample).unwrap();
            let expect = nb.log_joint(&sample).unwrap();
            for (a, b) in got.iter().zip(&expect) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn hard_selection_matches_tan_log_joint_exactly() {
        let cards = [2usize, 3, 2];
        let dist = chain_dist(3);
        let bank = seeded_bank(&cards, 3, &dist, 9);
        // Feature 1 <- 0 (slot 1), feature 2 <- 1 (slot 2).
        let s = vec![vec![1.0], vec![0.0, 1.0], vec![0.0, 0.0, 1.0]];
        let structure = TanStructure {
            ordering: vec![0, 1, 2],
            parents: vec![None, Some(0), Some(1)],
        };
        let mut tan = BncModel::uniform(&cards, 3, structure).unwrap();
        tan.class_prior.rho = bank.class_prior.rho.clone();
        tan.class_prior.normalize();
        tan.cpts[0].rho = bank.slots[0][0].rho.clone();
        tan.cpts[1].rho = bank.slots[1][1].rho.clone();
        tan.cpts[2].rho = bank.slots[2][2].rho.clone();
        for cpt in &mut tan.cpts {
            cpt.normalize();
        }
        for sample in [[0, 0, 0], [1, 2, 1], [0, 1, 0], [1, 0, 1]] {
            let got = structure_log_joint(&bank, &dist, &s, &sample).unwrap();
            let expect = tan.log_joint(&sample).unwrap();
            for (a, b) in got.iter().zip(&expect) {
                assert_eq!(a, b, "sample {sample:?}");
            }
        }
    }

    #[test]
    fn soft_half_half_weights_average_the_branches() {
        let cards = [2usize, 2];
        let dist = chain_dist(2);
        let bank = seeded_bank(&cards, 2, &dist, 17);
        let none = vec![vec![1.0], vec![1.0, 0.0]];
        let with_parent = vec![vec![1.0], vec![0.0, 1.0]];
        let mixed = vec![vec![1.0], vec![0.5, 0.5]];
        for sample in [[0, 0], [1, 1], [0, 1]] {
            let a = structure_log_joint(&bank, &dist, &none, &sample).unwrap();
            let b = structure_log_joint(&bank, &dist, &with_parent, &sample).unwrap();
            let m = structure_log_joint(&bank, &dist, &mixed, &sample).unwrap();
            for c in 0..2 {
                assert_abs_diff_eq!(m[c], (a[c] + b[c]) / 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn expected_size_hand_example() {
        // Two features, C=3, both binary; second feature splits mass evenly
        // between no-parent (6 entries) and parent 0 (12 entries).
        let dist = chain_dist(2);
        let got = expected_model_size(&dist, &[2, 2], 3);
        assert_abs_diff_eq!(got, 3.0 + 6.0 + 0.5 * 6.0 + 0.5 * 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 18.0, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_distribution_reproduces_param_count() {
        let cards = [3usize, 2, 4];
        let mut dist = chain_dist(3);
        dist.logits[1] = vec![-200.0, 0.0];
        dist.logits[2] = vec![-200.0, -200.0, 0.0];
        let structure = select_map_structure(&dist);
        assert_eq!(structure.parents, vec![None, Some(0), Some(1)]);
        let model = BncModel::uniform(&cards, 5, structure).unwrap();
        assert_abs_diff_eq!(
            expected_model_size(&dist, &cards, 5),
            model.param_count() as f64,
            epsilon = 1e-9
        );
    }

    #[test]
    fn expected_size_matches_structure_enumeration() {
        let cards = [2usize, 3, 2, 4];
        let c_n = 3;
        let mut dist = chain_dist(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in &mut dist.logits {
            for v in l.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        // Brute force: every slot combination, weighted by its probability.
        let arity: Vec<usize> = dist.logits.iter().map(|l| l.len()).collect();
        let mut total = 0.0;
        let combos: usize = arity.iter().product();
        for mut code in 0..combos {
            let mut slots = Vec::with_capacity(4);
            for a in &arity {
                slots.push(code % a);
                code /= a;
            }
            let p: f64 = slots
                .iter()
                .enumerate()
                .map(|(i, &k)| dist.probabilities(i)[k])
                .product();
            let parents: Vec<Option<usize>> = slots
                .iter()
                .enumerate()
                .map(|(i, &k)| (k > 0).then(|| dist.candidates[i][k - 1]))
                .collect();
            let structure = TanStructure { ordering: (0..4).collect(), parents };
            let model = BncModel::uniform(&cards, c_n, structure).unwrap();
            total += p * model.param_count() as f64;
        }
        assert_abs_diff_eq!(
            expected_model_size(&dist, &cards, c_n),
            total,
            epsilon = 1e-9
        );
    }

    #[test]
    fn size_grows_when_mass_moves_off_the_no_parent_slot() {
        let mut dist = chain_dist(3);
        let base = expected_model_size(&dist, &[2, 2, 2], 2);
        dist.logits[2][1] += 0.7;
        let shifted = expected_model_size(&dist, &[2, 2, 2], 2);
        assert!(shifted > base, "{shifted} vs {base}");
    }

    #[test]
    fn size_penalty_gradient_matches_finite_differences() {
        let cards = [2usize, 3, 2];
        let c_n = 4;
        let mut dist = chain_dist(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for l in &mut dist.logits {
            for v in l.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let h = 1e-5;
        for i in 0..3 {
            let phi = dist.probabilities(i);
            let sizes: Vec<f64> =
                (0..phi.len()).map(|k| slot_size(&dist, &cards, c_n, i, k)).collect();
            let mean: f64 = phi.iter().zip(&sizes).map(|(p, s)| p * s).sum();
            for k in 0..dist.logits[i].len() {
                let analytic = phi[k] * (sizes[k] - mean);
                let mut probe = dist.clone();
                probe.logits[i][k] += h;
                let up = expected_model_size(&probe, &cards, c_n);
                probe.logits[i][k] -= 2.0 * h;
                let down = expected_model_size(&probe, &cards, c_n);
                let fd = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-7);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "feature {i} slot {k}: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn deterministic_draw_matches_plain_trainer_gradients() {
        use crate::train::{bnc_loss_and_grads, BncGrads};
        // Logits so dominant every draw selects feature 1 <- 0, feature 2
        // parentless; the step must then equal a plain trainer step on the
        // equivalent fixed-structure model.
        let cards = [2usize, 3, 2];
        let mut dist = chain_dist(3);
        dist.logits[1] = vec![0.0, 500.0];
        dist.logits[2] = vec![500.0, 0.0, 0.0];
        let bank = seeded_bank(&cards, 2, &dist, 8);

        let structure = TanStructure {
            ordering: vec![0, 1, 2],
            parents: vec![None, Some(0), None],
        };
        let mut model = BncModel::uniform(&cards, 2, structure).unwrap();
        model.class_prior.rho = bank.class_prior.rho.clone();
        model.cpts[0].rho = bank.slots[0][0].rho.clone();
        model.cpts[1].rho = bank.slots[1][1].rho.clone();
        model.cpts[2].rho = bank.slots[2][0].rho.clone();
        model.class_prior.normalize();
        for cpt in &mut model.cpts {
            cpt.normalize();
        }

        let data = dependent_data(60, 6);
        let rows: Vec<usize> = (0..data.len()).collect();
        let hyb = HybridConfig { lambda_hyb: 0.3, ..HybridConfig::default() };

        let mut sg = StructureGrads::zeros_like(&bank, &dist);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let penalty = SizePenaltyConfig::default();
        let s_loss =
            structure_loss_and_grads(&dist, &bank, &data, &rows, &hyb, &penalty, &mut rng, &mut sg)
                .unwrap();

        let mut bg = BncGrads::zeros_like(&model);
        let b_loss = bnc_loss_and_grads(&model, &data, &rows, &hyb, &mut bg).unwrap();

        assert_abs_diff_eq!(s_loss, b_loss, epsilon = 1e-12);
        for (a, b) in sg.prior.iter().zip(&bg.prior) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (slot, i) in [(0usize, 0usize), (1, 1), (0, 2)] {
            for (a, b) in sg.slots[i][slot].iter().zip(&bg.cpts[i]) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        // Unselected slots receive no table gradient.
        assert!(sg.slots[1][0].iter().all(|&g| g == 0.0));
        assert!(sg.slots[2][1].iter().all(|&g| g == 0.0));
        assert!(sg.slots[2][2].iter().all(|&g| g == 0.0));
    }

    fn dependent_data(n: usize, seed: u64) -> DiscreteDataset {
        // Class drives feature 0; feature 1 mostly copies feature 0 given
        // either class; feature 2 is noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(3 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = usize::from(rng.random::<f64>() < 0.5);
            let x0 = if rng.random::<f64>() < 0.85 { y } else { 1 - y };
            let x1 = if rng.random::<f64>() < 0.9 { x0 } else { 1 - x0 };
            let x2 = usize::from(rng.random::<f64>() < 0.5);
            samples.extend_from_slice(&[x0, x1, x2]);
            labels.push(y);
        }
        DiscreteDataset { samples, labels, cardinalities: vec![2, 2, 2], num_classes: 2 }
    }

    fn quick_opt() -> OptimizerConfig {
        OptimizerConfig {
            lr0: 3e-2,
            epochs: 30,
            batch_size: 50,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn huge_size_penalty_recovers_the_parentless_structure() {
        let data = dependent_data(300, 1);
        let dist = chain_dist(3);
        let penalty = SizePenaltyConfig { lambda_ms: 1e6, ..SizePenaltyConfig::default() };
        let out = train_structure(
            &data,
            None,
            dist,
            &HybridConfig::default(),
            &quick_opt(),
            &penalty,
            11,
        )
        .unwrap();
        assert!(out.structure.is_naive_bayes());
        assert_eq!(out.model.param_count(), 2 + 3 * 4);
    }

    #[test]
    fn no_penalty_on_dependent_features_grows_past_naive_bayes() {
        let data = dependent_data(400, 2);
        let dist = chain_dist(3);
        let out = train_structure(
            &data,
            None,
            dist,
            &HybridConfig::default(),
            &quick_opt(),
            &SizePenaltyConfig::default(),
            5,
        )
        .unwrap();
        let nb_params = 2 + 3 * 4;
        assert!(
            out.model.param_count() > nb_params,
            "got {} params",
            out.model.param_count()
        );
    }

    #[test]
    fn structure_learning_reproduces_bitwise() {
        let data = dependent_data(200, 3);
        let run = || {
            train_structure(
                &data,
                Some(&data),
                chain_dist(3),
                &HybridConfig::default(),
                &quick_opt(),
                &SizePenaltyConfig { lambda_ms: 0.01, ..SizePenaltyConfig::default() },
                21,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.structure, b.structure);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.distribution, b.distribution);
    }

    #[test]
    fn map_selection_breaks_ties_toward_no_parent() {
        let dist = chain_dist(4);
        let s = select_map_structure(&dist);
        assert!(s.is_naive_bayes());
        let mut biased = chain_dist(4);
        biased.logits[3][2] = 1.0;
        let s = select_map_structure(&biased);
        assert_eq!(s.parents[3], Some(1));
        s.validate().unwrap();
    }

    #[test]
    fn learned_structure_round_trips_as_json() {
        let data = dependent_data(150, 4);
        let out = train_structure(
            &data,
            None,
            chain_dist(3),
            &HybridConfig::default(),
            &OptimizerConfig { epochs: 5, batch_size: 50, ..OptimizerConfig::default() },
            &SizePenaltyConfig::default(),
            2,
        )
        .unwrap();
        let learned = LearnedStructure::from_outcome(&out);
        let path = std::env::temp_dir().join(format!("structure-{}.json", std::process::id()));
        learned.save_json(&path).unwrap();
        let back = LearnedStructure::load_json(&path).unwrap();
        assert_eq!(learned, back);
        std::fs::remove_file(&path).ok();
    }
}
