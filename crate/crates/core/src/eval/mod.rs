//! Task metrics and an evaluation runner over JSONL datasets.

mod metrics;

pub use metrics::{
    abstention_rate, accuracy, bleu, bleu_n, bleu_tokens, lcs_len, macro_f1, normalize_answer,
    rouge_l, rouge_l_tokens, set_f1, tokenize,
};

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{MetricKind, Task};

/// One line of an eval dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub id: String,
    pub input: String,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub label: Option<String>,
    /// Optional documents the pipeline should see for this record only.
    #[serde(default)]
    pub docs: Option<Vec<String>>,
}

pub fn parse_eval_jsonl<R: BufRead>(reader: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.references.is_empty() && rec.label.is_none() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("record {} has neither references nor a label", rec.id),
            });
        }
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate record id {}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task: Task,
    pub metric: MetricKind,
    pub dataset: PathBuf,
}

impl EvalTask {
    /// `metric` defaults to the task's primary metric and must be one the
    /// task allows.
    pub fn new(
        task: Task,
        metric: Option<MetricKind>,
        dataset: impl Into<PathBuf>,
    ) -> Result<Self> {
        let metric = metric.unwrap_or(task.metrics()[0]);
        if !task.metrics().contains(&metric) {
            return Err(Error::Validation(format!(
                "{task} is not scored with {metric:?}"
            )));
        }
        Ok(Self {
            task,
            metric,
            dataset: dataset.into(),
        })
    }

    pub fn load(&self) -> Result<Vec<EvalRecord>> {
        let f = std::fs::File::open(&self.dataset)?;
        parse_eval_jsonl(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub text: String,
    pub abstained: bool,
}

pub trait Pipeline: Sync {
    fn predict(&self, record: &EvalRecord) -> Result<Prediction>;
}

impl<F: Fn(&EvalRecord) -> Result<Prediction> + Sync> Pipeline for F {
    fn predict(&self, record: &EvalRecord) -> Result<Prediction> {
        self(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id: String,
    pub prediction: String,
    pub references: Vec<String>,
    pub abstained: bool,
    /// `None` for abstained pairs.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub metric: MetricKind,
    /// Mean over answered pairs; `None` when every pair abstained.
    pub score: Option<f64>,
    pub abstention_rate: f64,
    pub n: usize,
    pub scored: usize,
    pub pairs: Vec<PairResult>,
}

fn targets(r: &EvalRecord) -> Vec<String> {
    let mut t = r.references.clone();
    if let Some(l) = &r.label {
        if !t.contains(l) {
            t.push(l.clone());
        }
    }
    t
}

/// Splits an extraction answer into elements on `;` and newlines.
fn elements(s: &str) -> BTreeSet<String> {
    s.split([';', '\n'])
        .map(normalize_answer)
        .filter(|e| !e.is_empty())
        .collect()
}

/// Scores one prediction. Text metrics take the best reference; accuracy is
/// a normalized exact match against the label or any reference; F1 compares
/// the predicted element set with the reference set.
pub fn score_pair(metric: MetricKind, prediction: &str, record: &EvalRecord) -> f64 {
    let refs = targets(record);
    match metric {
        MetricKind::Accuracy => {
            let p = normalize_answer(prediction);
            f64::from(u8::from(refs.iter().any(|r| normalize_answer(r) == p)))
        }
        MetricKind::RougeL => refs
            .iter()
            .map(|r| rouge_l(prediction, r))
            .fold(0.0, f64::max),
        MetricKind::Bleu => refs.iter().map(|r| bleu(prediction, r)).fold(0.0, f64::max),
        MetricKind::F1 => {
            let reference: BTreeSet<String> = refs.iter().flat_map(|r| elements(r)).collect();
            set_f1(&elements(prediction), &reference)
        }
    }
}

/// Runs the pipeline over every record (concurrently) and reduces in
/// record-id order, so a deterministic pipeline gives identical reports.
pub fn run_eval<P: Pipeline + ?Sized>(
    task: &EvalTask,
    records: &[EvalRecord],
    pipeline: &P,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric(
            "evaluation over zero records".into(),
        ));
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(records.len());
    let chunk = records.len().div_ceil(workers);
    let predictions: Vec<Result<Prediction>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|r| pipeline.predict(r)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| {
                h.join()
                    .unwrap_or_else(|_| vec![Err(Error::Backend("pipeline panicked".into()))])
            })
            .collect()
    });
    let mut pairs = Vec::with_capacity(records.len());
    for (r, p) in records.iter().zip(predictions) {
        let p = p.map_err(|e| Error::Backend(format!("record {}: {e}", r.id)))?;
        let score = (!p.abstained).then(|| score_pair(task.metric, &p.text, r));
        pairs.push(PairResult {
            id: r.id.clone(),
            prediction: p.text,
            references: targets(r),
            abstained: p.abstained,
            score,
        });
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    let flags: Vec<bool> = pairs.iter().map(|p| p.abstained).collect();
    let scores: Vec<f64> = pairs.iter().filter_map(|p| p.score).collect();
    let score = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    Ok(MetricReport {
        task: task.task,
        metric: task.metric,
        score,
        abstention_rate: abstention_rate(&flags)?,
        n: pairs.len(),
        scored: scores.len(),
        pairs,
    })
}
