use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LossError, LossValue, Result};

/// Identifier of one addend in a composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermId {
    /// NT-Xent over two augmented S1 views.
    IntraS1,
    /// NT-Xent over two augmented S2 views.
    IntraS2,
    /// Cross-modal InfoNCE over co-registered S1/S2 projections.
    Inter,
    /// MulSupCon on concatenated `[z_s1, z_s2]`.
    MscFused,
    /// MulSupCon on stacked augmented S1 views.
    MscS1Views,
    /// MulSupCon on stacked augmented S2 views.
    MscS2Views,
    /// BCE of the fused linear classifier.
    Bce,
}

impl TermId {
    pub const ALL: [TermId; 7] = [
        TermId::IntraS1,
        TermId::IntraS2,
        TermId::Inter,
        TermId::MscFused,
        TermId::MscS1Views,
        TermId::MscS2Views,
        TermId::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TermId::IntraS1 => "intra_s1",
            TermId::IntraS2 => "intra_s2",
            TermId::Inter => "inter",
            TermId::MscFused => "msc_fused",
            TermId::MscS1Views => "msc_s1_views",
            TermId::MscS2Views => "msc_s2_views",
            TermId::Bce => "bce",
        }
    }

    /// Whether computing this term reads ground-truth labels.
    pub fn needs_labels(self) -> bool {
        matches!(
            self,
            TermId::MscFused | TermId::MscS1Views | TermId::MscS2Views | TermId::Bce
        )
    }

    /// Whether this term consumes two augmented views of a modality.
    pub fn needs_views(self) -> bool {
        matches!(
            self,
            TermId::IntraS1 | TermId::IntraS2 | TermId::MscS1Views | TermId::MscS2Views
        )
    }
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub term: TermId,
    pub weight: f64,
}

impl WeightedTerm {
    pub fn unit(term: TermId) -> Self {
        Self { term, weight: 1.0 }
    }
}

/// Weighted sum of already-computed terms. The breakdown keeps each
/// weighted addend under its term name.
pub fn compose_loss(terms: &[WeightedTerm], computed: &BTreeMap<TermId, LossValue>) -> Result<LossValue> {
    let mut out = LossValue::default();
    for wt in terms {
        let value = computed
            .get(&wt.term)
            .ok_or_else(|| LossError::MissingTerm(wt.term.name().to_string()))?;
        let addend = wt.weight * value.total;
        *out.terms.entry(wt.term.name().to_string()).or_insert(0.0) += addend;
        out.total += addend;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn computed(pairs: &[(TermId, f64)]) -> BTreeMap<TermId, LossValue> {
        pairs
            .iter()
            .map(|(t, v)| (*t, LossValue::single(t.name(), *v)))
            .collect()
    }

    #[test]
    fn ssl_objective_sums_three_terms() {
        let recipe = [
            WeightedTerm::unit(TermId::IntraS1),
            WeightedTerm::unit(TermId::IntraS2),
            WeightedTerm::unit(TermId::Inter),
        ];
        let c = computed(&[(TermId::IntraS1, 0.5), (TermId::IntraS2, 0.7), (TermId::Inter, 0.3)]);
        let v = compose_loss(&recipe, &c).unwrap();
        assert!((v.total - 1.5).abs() < 1e-12);
        assert_eq!(v.terms.len(), 3);
        let sum: f64 = v.terms.values().sum();
        assert!((sum - v.total).abs() < 1e-9);
    }

    #[test]
    fn empty_recipe_is_zero() {
        let v = compose_loss(&[], &BTreeMap::new()).unwrap();
        assert_eq!(v.total, 0.0);
        assert!(v.terms.is_empty());
    }

    #[test]
    fn weights_scale_addends() {
        let recipe = [WeightedTerm { term: TermId::Bce, weight: 0.25 }];
        let v = compose_loss(&recipe, &computed(&[(TermId::Bce, 2.0)])).unwrap();
        assert_eq!(v.total, 0.5);
        assert_eq!(v.term("bce"), Some(0.5));
    }

    #[test]
    fn missing_term_is_named() {
        let recipe = [WeightedTerm::unit(TermId::IntraS1), WeightedTerm::unit(TermId::Inter)];
        let err = compose_loss(&recipe, &computed(&[(TermId::IntraS1, 1.0)])).unwrap_err();
        assert_eq!(err, LossError::MissingTerm("inter".into()));
    }
}
