//! Model specification files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CostModel, GroupSizeModel, KernelSequence, ObservationModel, DEFAULT_ATOM_CAP, DEFAULT_MERGE_TOL,
};

/// Alphabet given either by its size or by symbol labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alphabet {
    Size(usize),
    Labels(Vec<String>),
}

impl Alphabet {
    pub fn len(&self) -> usize {
        match self {
            Alphabet::Size(n) => *n,
            Alphabet::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// JSON model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub alphabet: Alphabet,
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
    pub group_support: Vec<usize>,
    pub group_pmf: Vec<f64>,
    pub cost: CostModel,
    /// Per-stage group-size pmfs for the first groups, on `group_support`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_prefix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom_cap: Option<usize>,
}

/// A validated model with its stage kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedModel {
    pub model: ObservationModel,
    pub groups: GroupSizeModel,
    pub cost: CostModel,
    pub kernels: KernelSequence,
}

impl ModelFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn resolve(&self) -> Result<ResolvedModel> {
        if self.alphabet.len() != self.f0.len() {
            return Err(Error::Parse(format!(
                "alphabet has {} symbols but f0 has {} entries",
                self.alphabet.len(),
                self.f0.len()
            )));
        }
        let model = ObservationModel::new(self.f0.clone(), self.f1.clone())?;
        let groups = GroupSizeModel::new(self.group_support.clone(), self.group_pmf.clone(), self.stage_prefix.clone())?;
        let kernels = KernelSequence::build(
            &model,
            &groups,
            &self.cost,
            self.merge_tol.unwrap_or(DEFAULT_MERGE_TOL),
            self.atom_cap.unwrap_or(DEFAULT_ATOM_CAP),
        )?;
        Ok(ResolvedModel { model, groups, cost: self.cost.clone(), kernels })
    }
}

impl ResolvedModel {
    /// Scales every group cost so that the stationary mean cost is `c`.
    pub fn with_mean_cost(&self, c: f64) -> Result<Self> {
        let kernels = self.kernels.with_tail_mean_cost(c)?;
        let s = c / self.kernels.tail().mean_cost();
        let values = self.cost.costs(self.groups.support())?.into_iter().map(|v| v * s).collect();
        Ok(Self {
            model: self.model.clone(),
            groups: self.groups.clone(),
            cost: CostModel::Table { values },
            kernels,
        })
    }
}
