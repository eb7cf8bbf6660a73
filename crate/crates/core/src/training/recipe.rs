use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::losses::{TermId, WeightedTerm};
use crate::model::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeName {
    IntraSimclr,
    IaiSimclr,
    Mosaic1,
    Mosaic2,
    Custom,
}

impl RecipeName {
    pub const PRESETS: [RecipeName; 4] = [
        RecipeName::IntraSimclr,
        RecipeName::IaiSimclr,
        RecipeName::Mosaic1,
        RecipeName::Mosaic2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecipeName::IntraSimclr => "intra_simclr",
            RecipeName::IaiSimclr => "iai_simclr",
            RecipeName::Mosaic1 => "mosaic1",
            RecipeName::Mosaic2 => "mosaic2",
            RecipeName::Custom => "custom",
        }
    }
}

impl fmt::Display for RecipeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `Sequential`: contrastive pretraining, then a linear probe on frozen
/// features. `Joint`: every term optimized together end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sequential,
    Joint,
}

/// Where the BCE head reads its fused features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BceSource {
    /// Un-augmented co-registered patches.
    Clean,
    /// Both augmented views of each modality, stacked, labels duplicated.
    Views,
}

/// A named set of weighted loss terms plus an optimization mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecipeSpec", into = "RecipeSpec")]
pub struct LossRecipe {
    name: RecipeName,
    terms: Vec<WeightedTerm>,
    mode: TrainMode,
}

/// Config-file form: a preset name (optionally re-weighting its terms) or
/// a custom term list with a mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    pub name: RecipeName,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<WeightedTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<TrainMode>,
}

impl TryFrom<RecipeSpec> for LossRecipe {
    type Error = TrainError;

    fn try_from(spec: RecipeSpec) -> Result<Self> {
        if spec.name == RecipeName::Custom {
            let mode = spec
                .mode
                .ok_or_else(|| TrainError::Config("custom recipe needs a mode".into()))?;
            return LossRecipe::custom(spec.terms, mode);
        }
        let preset = LossRecipe::preset(spec.name);
        if spec.mode.is_some_and(|m| m != preset.mode) {
            return Err(TrainError::Config(format!(
                "{} is fixed to {:?} mode",
                spec.name, preset.mode
            )));
        }
        if spec.terms.is_empty() {
            return Ok(preset);
        }
        let given: BTreeSet<TermId> = spec.terms.iter().map(|t| t.term).collect();
        if given != preset.term_set() || given.len() != spec.terms.len() {
            return Err(TrainError::Config(format!(
                "{} terms are fixed; only their weights may be overridden",
                spec.name
            )));
        }
        let recipe = LossRecipe {
            terms: spec.terms,
            ..preset
        };
        recipe.validate()?;
        Ok(recipe)
    }
}

impl From<LossRecipe> for RecipeSpec {
    fn from(r: LossRecipe) -> Self {
        Self {
            name: r.name,
            terms: r.terms,
            mode: Some(r.mode),
        }
    }
}

impl LossRecipe {
    pub fn preset(name: RecipeName) -> Self {
        use TermId::*;
        let (terms, mode): (&[TermId], TrainMode) = match name {
            RecipeName::IntraSimclr => (&[IntraS1, IntraS2], TrainMode::Sequential),
            RecipeName::IaiSimclr => (&[IntraS1, IntraS2, Inter], TrainMode::Sequential),
            RecipeName::Mosaic1 => (&[IntraS1, IntraS2, MscFused, Bce], TrainMode::Joint),
            RecipeName::Mosaic2 => (&[Inter, MscS1Views, MscS2Views, Bce], TrainMode::Joint),
            RecipeName::Custom => (&[], TrainMode::Joint),
        };
        Self {
            name,
            terms: terms.iter().map(|t| WeightedTerm::unit(*t)).collect(),
            mode,
        }
    }

    pub fn intra_simclr() -> Self {
        Self::preset(RecipeName::IntraSimclr)
    }

    pub fn iai_simclr() -> Self {
        Self::preset(RecipeName::IaiSimclr)
    }

    pub fn mosaic1() -> Self {
        Self::preset(RecipeName::Mosaic1)
    }

    pub fn mosaic2() -> Self {
        Self::preset(RecipeName::Mosaic2)
    }

    pub fn custom(terms: Vec<WeightedTerm>, mode: TrainMode) -> Result<Self> {
        let r = Self {
            name: RecipeName::Custom,
            terms,
            mode,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(TrainError::Config("recipe has no terms".into()));
        }
        if self.term_set().len() != self.terms.len() {
            return Err(TrainError::Config("recipe lists a term twice".into()));
        }
        if let Some(t) = self.terms.iter().find(|t| !(t.weight.is_finite() && t.weight >= 0.0)) {
            return Err(TrainError::Config(format!(
                "weight of {} must be finite and non-negative",
                t.term
            )));
        }
        if self.mode == TrainMode::Sequential {
            if let Some(t) = self.terms.iter().find(|t| t.term.needs_labels()) {
                return Err(TrainError::Config(format!(
                    "sequential pretraining is self-supervised; {} reads labels",
                    t.term
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> RecipeName {
        self.name
    }

    pub fn terms(&self) -> &[WeightedTerm] {
        &self.terms
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn term_set(&self) -> BTreeSet<TermId> {
        self.terms.iter().map(|t| t.term).collect()
    }

    pub fn has(&self, term: TermId) -> bool {
        self.terms.iter().any(|t| t.term == term)
    }

    pub fn needs_labels(&self) -> bool {
        self.terms.iter().any(|t| t.term.needs_labels())
    }

    /// Whether a step needs two augmented views of `m`.
    pub fn needs_views(&self, m: Modality) -> bool {
        let (intra, msc) = match m {
            Modality::S1 => (TermId::IntraS1, TermId::MscS1Views),
            Modality::S2 => (TermId::IntraS2, TermId::MscS2Views),
        };
        self.has(intra) || self.has(msc) || (self.has(TermId::Bce) && self.bce_source() == BceSource::Views)
    }

    /// Whether a step needs the un-augmented patches.
    pub fn needs_clean(&self) -> bool {
        self.has(TermId::Inter)
            || self.has(TermId::MscFused)
            || (self.has(TermId::Bce) && self.bce_source() == BceSource::Clean)
    }

    /// BCE reads augmented views when both per-modality view terms are
    /// present, clean patches otherwise.
    pub fn bce_source(&self) -> BceSource {
        if self.has(TermId::MscS1Views) && self.has(TermId::MscS2Views) {
            BceSource::Views
        } else {
            BceSource::Clean
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_their_definitions() {
        use TermId::*;
        let set = |r: LossRecipe| r.term_set().into_iter().collect::<Vec<_>>();
        assert_eq!(set(LossRecipe::intra_simclr()), vec![IntraS1, IntraS2]);
        assert_eq!(set(LossRecipe::iai_simclr()), vec![IntraS1, IntraS2, Inter]);
        assert_eq!(set(LossRecipe::mosaic1()), vec![IntraS1, IntraS2, MscFused, Bce]);
        assert_eq!(set(LossRecipe::mosaic2()), vec![Inter, MscS1Views, MscS2Views, Bce]);
        assert!(!LossRecipe::intra_simclr().needs_labels());
        assert!(!LossRecipe::iai_simclr().needs_labels());
        assert!(LossRecipe::mosaic1().needs_labels());
        assert_eq!(LossRecipe::mosaic1().bce_source(), BceSource::Clean);
        assert_eq!(LossRecipe::mosaic2().bce_source(), BceSource::Views);
    }

    #[test]
    fn config_form_round_trips() {
        let r: LossRecipe = serde_json::from_str(r#"{"name":"mosaic2"}"#).unwrap();
        assert_eq!(r, LossRecipe::mosaic2());
        let back: LossRecipe = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn invalid_recipes_are_rejected() {
        assert!(serde_json::from_str::<LossRecipe>(r#"{"name":"custom"}"#).is_err());
        assert!(serde_json::from_str::<LossRecipe>(
            r#"{"name":"intra_simclr","terms":[{"term":"bce","weight":1.0}]}"#
        )
        .is_err());
        assert!(LossRecipe::custom(vec![WeightedTerm::unit(TermId::Bce)], TrainMode::Sequential).is_err());
        assert!(LossRecipe::custom(
            vec![WeightedTerm::unit(TermId::Inter), WeightedTerm::unit(TermId::Inter)],
            TrainMode::Joint
        )
        .is_err());
    }
}
