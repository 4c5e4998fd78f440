//! Roles, legal tasks and the metric each task is scored with.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Consultant,
    Researcher,
    Paralegal,
    Advisor,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Consultant,
        Role::Researcher,
        Role::Paralegal,
        Role::Advisor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Consultant => "consultant",
            Role::Researcher => "researcher",
            Role::Paralegal => "paralegal",
            Role::Advisor => "advisor",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Validation(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    RougeL,
    F1,
    Bleu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    QuestionAnswering,
    CasesIdentification,
    ArticleRecitation,
    ElementExtraction,
    TextClassification,
    DocumentSummarization,
    ContractDrafting,
    CaseAnalysis,
    JudgmentPrediction,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::QuestionAnswering,
        Task::CasesIdentification,
        Task::ArticleRecitation,
        Task::ElementExtraction,
        Task::TextClassification,
        Task::DocumentSummarization,
        Task::ContractDrafting,
        Task::CaseAnalysis,
        Task::JudgmentPrediction,
    ];

    /// The role that owns this task.
    pub fn role(self) -> Role {
        match self {
            Task::QuestionAnswering => Role::Consultant,
            Task::CasesIdentification
            | Task::ArticleRecitation
            | Task::ElementExtraction
            | Task::TextClassification => Role::Researcher,
            Task::DocumentSummarization | Task::ContractDrafting => Role::Paralegal,
            Task::CaseAnalysis | Task::JudgmentPrediction => Role::Advisor,
        }
    }

    /// Metrics this task may be scored with; the first is the default.
    pub fn metrics(self) -> &'static [MetricKind] {
        use MetricKind::*;
        match self {
            Task::QuestionAnswering | Task::TextClassification => &[Accuracy],
            Task::CasesIdentification
            | Task::ArticleRecitation
            | Task::ContractDrafting
            | Task::JudgmentPrediction => &[RougeL],
            Task::ElementExtraction => &[F1],
            Task::DocumentSummarization => &[Bleu],
            Task::CaseAnalysis => &[RougeL, Accuracy],
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Task::QuestionAnswering => "question-answering",
            Task::CasesIdentification => "cases-identification",
            Task::ArticleRecitation => "article-recitation",
            Task::ElementExtraction => "element-extraction",
            Task::TextClassification => "text-classification",
            Task::DocumentSummarization => "document-summarization",
            Task::ContractDrafting => "contract-drafting",
            Task::CaseAnalysis => "case-analysis",
            Task::JudgmentPrediction => "judgment-prediction",
        }
    }

    pub fn tasks_for(role: Role) -> impl Iterator<Item = Task> {
        Task::ALL.into_iter().filter(move |t| t.role() == role)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.trim().to_lowercase().replace([' ', '_'], "-");
        Task::ALL
            .into_iter()
            .find(|t| t.slug() == norm)
            .ok_or_else(|| Error::Validation(format!("unknown task {s:?}")))
    }
}
