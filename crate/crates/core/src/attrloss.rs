//! Cross-entropy plus the attribute term: each sample's feature is pulled
//! toward the center `r(a)` of its attribute group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datapipe::{ClassAttributeMap, SplitData};
use crate::diffcore::{Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterInit {
    #[default]
    Zeros,
    /// Centers stay inactive until the first exact recompute.
    FirstEpochMean,
}

/// Per-attribute feature centers. Centers are buffers: they change only
/// through [`update_ema`](Self::update_ema) and exact recomputes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeCenterBank {
    feature_dim: usize,
    alpha: f64,
    centers: BTreeMap<usize, Vec<f64>>,
    counts: BTreeMap<usize, u64>,
    awaiting_recompute: bool,
}

impl AttributeCenterBank {
    /// Zero-initialized centers for each attribute id.
    pub fn new(attribute_ids: impl IntoIterator<Item = usize>, feature_dim: usize, alpha: f64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".to_string()));
        }
        if !(alpha >= 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("center alpha {alpha} outside [0, 1]")));
        }
        let centers: BTreeMap<usize, Vec<f64>> =
            attribute_ids.into_iter().map(|a| (a, vec![0.0; feature_dim])).collect();
        if centers.is_empty() {
            return Err(Error::InvalidArgument("center bank needs at least one attribute".to_string()));
        }
        let counts = centers.keys().map(|&a| (a, 0)).collect();
        Ok(Self {
            feature_dim,
            alpha,
            centers,
            counts,
            awaiting_recompute: false,
        })
    }

    /// Rebuild a bank from stored parts (checkpoint restore).
    pub fn from_parts(
        feature_dim: usize,
        alpha: f64,
        centers: BTreeMap<usize, Vec<f64>>,
        counts: BTreeMap<usize, u64>,
        awaiting_recompute: bool,
    ) -> Result<Self> {
        if centers.values().any(|c| c.len() != feature_dim) {
            return Err(Error::InvalidArgument("center length differs from feature_dim".to_string()));
        }
        if centers.keys().ne(counts.keys()) {
            return Err(Error::InvalidArgument("center and count ids differ".to_string()));
        }
        let mut bank = Self::new(centers.keys().copied(), feature_dim, alpha)?;
        bank.centers = centers;
        bank.counts = counts;
        bank.awaiting_recompute = awaiting_recompute;
        Ok(bank)
    }

    pub fn init_centers(&mut self, strategy: CenterInit) {
        for c in self.centers.values_mut() {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        for n in self.counts.values_mut() {
            *n = 0;
        }
        self.awaiting_recompute = strategy == CenterInit::FirstEpochMean;
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn attribute_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.centers.keys().copied()
    }

    pub fn center(&self, attribute: usize) -> Option<&[f64]> {
        self.centers.get(&attribute).map(Vec::as_slice)
    }

    pub fn count(&self, attribute: usize) -> Option<u64> {
        self.counts.get(&attribute).copied()
    }

    pub fn centers(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.centers
    }

    pub fn counts(&self) -> &BTreeMap<usize, u64> {
        &self.counts
    }

    /// True while a first-epoch-mean bank has not seen its first recompute.
    pub fn awaiting_recompute(&self) -> bool {
        self.awaiting_recompute
    }

    fn check_batch(&self, features: &Tensor, labels: &[usize]) -> Result<usize> {
        let n = match *features.shape() {
            [n, d] if d == self.feature_dim => n,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "attribute centers",
                    left: vec![labels.len(), self.feature_dim],
                    right: features.shape().to_vec(),
                })
            }
        };
        if n != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "attribute labels",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|a| !self.centers.contains_key(a)) {
            return Err(Error::UnknownAttribute(bad));
        }
        Ok(n)
    }

    /// Center-loss style step toward the batch:
    /// `r(a) ← r(a) − α·Σ_{i:aᵢ=a}(r(a) − fᵢ)/(1 + n_a)`.
    pub fn update_ema(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        self.check_batch(features, labels)?;
        let d = self.feature_dim;
        let mut residual: BTreeMap<usize, (Vec<f64>, u64)> = BTreeMap::new();
        for (row, &a) in features.data().chunks(d).zip(labels) {
            let center = &self.centers[&a];
            let entry = residual.entry(a).or_insert_with(|| (vec![0.0; d], 0));
            for ((acc, r), f) in entry.0.iter_mut().zip(center).zip(row) {
                *acc += r - f;
            }
            entry.1 += 1;
        }
        for (a, (sum, n)) in residual {
            let denom = 1.0 + n as f64;
            let center = self.centers.get_mut(&a).expect("checked");
            for (r, s) in center.iter_mut().zip(&sum) {
                *r -= self.alpha * (s / denom);
            }
            *self.counts.get_mut(&a).expect("checked") += n;
        }
        Ok(())
    }

    /// Replace every center by the mean of the given features of its group.
    pub fn assign_means(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        self.check_batch(features, labels)?;
        let d = self.feature_dim;
        let mut sums: BTreeMap<usize, (Vec<f64>, u64)> =
            self.centers.keys().map(|&a| (a, (vec![0.0; d], 0))).collect();
        for (row, a) in features.data().chunks(d).zip(labels) {
            let entry = sums.get_mut(a).expect("checked");
            for (s, f) in entry.0.iter_mut().zip(row) {
                *s += f;
            }
            entry.1 += 1;
        }
        if let Some((&a, _)) = sums.iter().find(|(_, (_, n))| *n == 0) {
            return Err(Error::Dataset(format!("attribute {a} has no training samples")));
        }
        for (a, (sum, n)) in sums {
            self.centers.insert(a, sum.iter().map(|s| s / n as f64).collect());
            self.counts.insert(a, n);
        }
        self.awaiting_recompute = false;
        Ok(())
    }

    /// Center of each row's attribute, stacked as `N×D`.
    pub fn gather(&self, labels: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(labels.len() * self.feature_dim);
        for a in labels {
            data.extend_from_slice(self.centers.get(a).ok_or(Error::UnknownAttribute(*a))?);
        }
        Tensor::new(vec![labels.len(), self.feature_dim], data)
    }
}

/// `½·Σᵢ‖f(xᵢ) − r(aᵢ)‖²` (divided by N for `Mean`), recorded on `tape`.
/// The centers enter as constants.
pub fn attribute_term(
    tape: &mut Tape,
    features: Var,
    attr_labels: &[usize],
    bank: &AttributeCenterBank,
    reduction: Reduction,
) -> Result<Var> {
    bank.check_batch(tape.value(features), attr_labels)?;
    let targets = bank.gather(attr_labels)?;
    tape.half_squared_distance(features, &targets, reduction)
}

/// Set every center to the mean eval-mode feature of its training samples.
pub fn recompute_centers(
    model: &Model,
    params: &ParameterSet,
    data: &SplitData,
    attributes: &ClassAttributeMap,
    bank: &mut AttributeCenterBank,
    chunk: usize,
) -> Result<()> {
    let labels: Vec<usize> = data
        .classes()
        .iter()
        .map(|&c| attributes.attribute_of(c))
        .collect::<Result<_>>()?;
    let mut feats = Vec::new();
    for batch in data.chunks(chunk) {
        feats.push(model.infer(params, &batch)?.0);
    }
    if feats.is_empty() {
        return Err(Error::Dataset("cannot recompute centers from an empty split".to_string()));
    }
    bank.assign_means(&Tensor::concat_rows(&feats)?, &labels)
}

/// Summands of the combined objective, kept for logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_term: f64,
    pub attr_term: f64,
    pub lambda: f64,
}

/// `total = ce + λ·attr`.
pub fn combined_loss(ce_term: f64, attr_term: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(LossBreakdown {
        total: ce_term + lambda * attr_term,
        ce_term,
        attr_term,
        lambda,
    })
}

/// The same combination recorded on the tape so gradients flow to both terms.
pub fn combined_loss_var(tape: &mut Tape, ce: Var, attr: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = tape.scale(attr, lambda);
    tape.add(ce, weighted)
}
