//! Reviewer feedback records, the qualitative label table and the reward model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Relevance,
    Accuracy,
    Compliance,
    Satisfaction,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Relevance,
        Component::Accuracy,
        Component::Compliance,
        Component::Satisfaction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Relevance => "relevance",
            Component::Accuracy => "accuracy",
            Component::Compliance => "compliance",
            Component::Satisfaction => "satisfaction",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Mapping(format!("unknown feedback component {s:?}")))
    }
}

/// The four per-response scores, in [`Component::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentScores {
    pub relevance: f64,
    pub accuracy: f64,
    pub compliance: f64,
    pub satisfaction: f64,
}

impl ComponentScores {
    pub fn new(relevance: f64, accuracy: f64, compliance: f64, satisfaction: f64) -> Self {
        Self {
            relevance,
            accuracy,
            compliance,
            satisfaction,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.relevance,
            self.accuracy,
            self.compliance,
            self.satisfaction,
        ]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn get(&self, c: Component) -> f64 {
        self.as_array()[c.index()]
    }
}

impl std::ops::Add for ComponentScores {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (a, b) = (self.as_array(), o.as_array());
        Self::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub response_id: String,
    pub case_id: String,
    pub role: Role,
    #[serde(default)]
    pub relevance: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub compliance: Option<f64>,
    #[serde(default)]
    pub satisfaction: Option<f64>,
    #[serde(default)]
    pub qualitative_label: Option<String>,
    #[serde(default)]
    pub comment: Option<String>,
    pub timestamp: DateTime<Utc>,
}

impl FeedbackRecord {
    pub fn numeric(response_id: &str, case_id: &str, role: Role, s: ComponentScores) -> Self {
        Self {
            response_id: response_id.into(),
            case_id: case_id.into(),
            role,
            relevance: Some(s.relevance),
            accuracy: Some(s.accuracy),
            compliance: Some(s.compliance),
            satisfaction: Some(s.satisfaction),
            qualitative_label: None,
            comment: None,
            timestamp: Utc::now(),
        }
    }

    fn explicit(&self) -> [Option<f64>; 4] {
        [
            self.relevance,
            self.accuracy,
            self.compliance,
            self.satisfaction,
        ]
    }

    /// Only advisor and paralegal feedback moves the routing policy.
    pub fn affects_policy(&self) -> bool {
        matches!(self.role, Role::Advisor | Role::Paralegal)
    }

    /// Fills missing components from the qualitative label, then requires all
    /// four to be present and in `[0, 1]`. Explicit numbers win over the label.
    pub fn resolve(&self, scale: &QualitativeScale) -> Result<ComponentScores> {
        let mut vals = self.explicit();
        if let Some(label) = &self.qualitative_label {
            for (c, v) in scale.map(label)? {
                vals[c.index()].get_or_insert(v);
            }
        }
        let mut out = [0.0; 4];
        for (i, c) in Component::ALL.into_iter().enumerate() {
            let v = vals[i].ok_or_else(|| Error::Validation(format!("feedback is missing {c}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{c} score {v} outside [0, 1]")));
            }
            out[i] = v;
        }
        Ok(ComponentScores::from_array(out))
    }

    /// Resolves the record in place so it carries all four numbers.
    pub fn complete(mut self, scale: &QualitativeScale) -> Result<Self> {
        let s = self.resolve(scale)?;
        self.relevance = Some(s.relevance);
        self.accuracy = Some(s.accuracy);
        self.compliance = Some(s.compliance);
        self.satisfaction = Some(s.satisfaction);
        Ok(self)
    }
}

/// Level words mapped to scores. Labels read `"<level> <component>"`, and
/// several may be joined with commas: `"high relevance, low accuracy"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QualitativeScale {
    pub levels: BTreeMap<String, f64>,
}

impl Default for QualitativeScale {
    fn default() -> Self {
        let levels = [
            ("unusable", 0.0),
            ("very low", 0.25),
            ("low", 0.5),
            ("medium", 0.75),
            ("high", 1.0),
        ];
        Self {
            levels: levels.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
        }
    }
}

impl QualitativeScale {
    pub fn map(&self, label: &str) -> Result<Vec<(Component, f64)>> {
        let mut out = Vec::new();
        for part in label.split(',') {
            let words: Vec<&str> = part.split_whitespace().collect();
            let Some((comp, level)) = words.split_last() else {
                continue;
            };
            let level = level.join(" ").to_lowercase();
            let value = self
                .levels
                .get(&level)
                .ok_or_else(|| Error::Mapping(format!("unmapped qualitative label {label:?}")))?;
            let comp: Component = comp
                .parse()
                .map_err(|_| Error::Mapping(format!("unmapped qualitative label {label:?}")))?;
            out.push((comp, *value));
        }
        if out.is_empty() {
            return Err(Error::Mapping(format!(
                "unmapped qualitative label {label:?}"
            )));
        }
        Ok(out)
    }
}

pub fn map_qualitative(label: &str, scale: &QualitativeScale) -> Result<Vec<(Component, f64)>> {
    scale.map(label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModel {
    pub weights: ComponentScores,
    /// Reliability multiplier per reviewer role; missing roles use 1.
    pub role_multipliers: BTreeMap<Role, f64>,
}

impl Default for RewardModel {
    fn default() -> Self {
        Self {
            weights: ComponentScores::new(0.25, 0.25, 0.25, 0.25),
            role_multipliers: BTreeMap::new(),
        }
    }
}

impl RewardModel {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Configuration(
                "reward weights must be finite and non-negative".into(),
            ));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Configuration(
                "at least one reward weight must be positive".into(),
            ));
        }
        if self
            .role_multipliers
            .values()
            .any(|m| !m.is_finite() || *m < 0.0)
        {
            return Err(Error::Configuration(
                "role multipliers must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn multiplier(&self, role: Role) -> f64 {
        self.role_multipliers.get(&role).copied().unwrap_or(1.0)
    }

    /// Weights after the role multiplier.
    pub fn effective_weights(&self, role: Role) -> [f64; 4] {
        let m = self.multiplier(role);
        self.weights.as_array().map(|w| w * m)
    }

    /// Weighted sum of the components. No range check on `scores`.
    pub fn score(&self, role: Role, scores: &ComponentScores) -> Result<f64> {
        self.validate()?;
        let w = self.effective_weights(role);
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Configuration(format!(
                "all reward weights are zero for {role}"
            )));
        }
        Ok(w.iter().zip(scores.as_array()).map(|(w, d)| w * d).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSignal {
    pub reward: f64,
    pub records: Vec<String>,
}

pub fn compute_reward(
    record: &FeedbackRecord,
    model: &RewardModel,
    scale: &QualitativeScale,
) -> Result<RewardSignal> {
    let scores = record.resolve(scale)?;
    Ok(RewardSignal {
        reward: model.score(record.role, &scores)?,
        records: vec![record.response_id.clone()],
    })
}
