//! Exhaustive-scan document index with fused text/KG similarity and a hard
//! relevance threshold. When no document clears the threshold the result is
//! an abstention.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, cosine_slices, dot, Embedder, Vector};
use crate::error::{Error, Result};
use crate::kg::{
    kg_similarity, kg_similarity_exact, link_entities, EntityLinkSet, Gazetteer, KgEmbeddings,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `(v_x·v_d + α·kg) / (‖v_x‖‖v_d‖ + α)`
    Additive,
    /// `β·text + (1 - β)·kg`
    #[default]
    Convex,
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub fusion_mode: FusionMode,
    pub max_results: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            theta: 0.85,
            alpha: 0.5,
            beta: 0.5,
            fusion_mode: FusionMode::Convex,
            max_results: 10,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Configuration(format!(
                "theta {} outside (0, 1]",
                self.theta
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Configuration(format!(
                "alpha {} must be >= 0",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Configuration(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        if self.max_results == 0 {
            return Err(Error::Configuration("max_results must be positive".into()));
        }
        Ok(())
    }
}

/// Combines text and KG similarity. `norms` are `(‖v_x‖, ‖v_d‖)`; the dot
/// product needed by the additive form is recovered as `text·‖v_x‖·‖v_d‖`.
pub fn fuse_scores<T: Scalar>(
    text_sim: T,
    kg_sim: T,
    cfg: &RetrievalConfig,
    norms: (T, T),
) -> Result<T> {
    match cfg.fusion_mode {
        FusionMode::TextOnly => Ok(text_sim),
        FusionMode::Convex => {
            let beta = T::lit(cfg.beta);
            Ok(beta * text_sim + (T::one() - beta) * kg_sim)
        }
        FusionMode::Additive => {
            let (nx, nd) = norms;
            if nx.is_zero() || nd.is_zero() {
                return Err(Error::Degenerate(
                    "additive fusion with a zero-norm vector".into(),
                ));
            }
            let alpha = T::lit(cfg.alpha);
            let dot = text_sim * nx * nd;
            Ok((dot + alpha * kg_sim) / (nx * nd + alpha))
        }
    }
}

/// A `documents.jsonl` record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewDocument {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

pub fn parse_documents_jsonl<R: BufRead>(reader: R) -> Result<Vec<NewDocument>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: NewDocument = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(doc);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DocumentRecord<T> {
    pub id: String,
    pub title: String,
    pub text: String,
    pub tags: BTreeSet<String>,
    pub vector: Vector<T>,
    pub links: EntityLinkSet,
}

/// How the KG side of the fused score is computed.
#[derive(Debug, Clone, Copy)]
pub enum KgView<'a, T> {
    Embedded(&'a KgEmbeddings<T>),
    /// No trained embeddings yet: entities only match themselves.
    Exact,
}

impl<T: Scalar> KgView<'_, T> {
    pub fn similarity(&self, a: &EntityLinkSet, b: &EntityLinkSet) -> Result<T> {
        match self {
            KgView::Embedded(emb) => kg_similarity(a, b, emb),
            KgView::Exact => Ok(kg_similarity_exact(a, b)),
        }
    }
}

/// A query after embedding and entity linking.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery<T> {
    pub vector: Vector<T>,
    pub links: EntityLinkSet,
}

impl<T: Scalar> PreparedQuery<T> {
    pub fn new<E: Embedder<T> + ?Sized>(
        text: &str,
        embedder: &E,
        gazetteer: &Gazetteer,
    ) -> Result<Self> {
        let vector = crate::embedding::embed(text, embedder)?;
        Ok(Self {
            vector,
            links: link_entities("query", text, gazetteer),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RetrievedDocument<T> {
    pub id: String,
    pub title: String,
    pub text: String,
    pub tags: BTreeSet<String>,
    pub entities: BTreeSet<String>,
    pub score: T,
    pub text_score: T,
    pub kg_score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RetrievalResult<T> {
    pub documents: Vec<RetrievedDocument<T>>,
    pub abstained: bool,
    pub best_score: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DocScore<T> {
    pub index: usize,
    pub fused: T,
    pub text: T,
    pub kg: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexData<T>", into = "IndexData<T>", bound = "T: Scalar")]
pub struct DocumentIndex<T> {
    dim: usize,
    docs: Vec<DocumentRecord<T>>,
    by_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct IndexData<T> {
    dim: usize,
    docs: Vec<DocumentRecord<T>>,
}

impl<T: Scalar> TryFrom<IndexData<T>> for DocumentIndex<T> {
    type Error = Error;
    fn try_from(d: IndexData<T>) -> Result<Self> {
        let mut idx = DocumentIndex::new(d.dim)?;
        for doc in d.docs {
            idx.insert_record(doc)?;
        }
        Ok(idx)
    }
}

impl<T: Scalar> From<DocumentIndex<T>> for IndexData<T> {
    fn from(i: DocumentIndex<T>) -> Self {
        IndexData {
            dim: i.dim,
            docs: i.docs,
        }
    }
}

impl<T: Scalar> DocumentIndex<T> {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Configuration("index dim must be > 0".into()));
        }
        Ok(Self {
            dim,
            docs: Vec::new(),
            by_id: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DocumentRecord<T>> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn documents(&self) -> &[DocumentRecord<T>] {
        &self.docs
    }

    /// Embeds and links a new document.
    pub fn add<E: Embedder<T> + ?Sized>(
        &mut self,
        doc: NewDocument,
        embedder: &E,
        gazetteer: &Gazetteer,
    ) -> Result<&DocumentRecord<T>> {
        if doc.id.trim().is_empty() {
            return Err(Error::Validation("document id is empty".into()));
        }
        if doc.text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "document {} has empty text",
                doc.id
            )));
        }
        if self.by_id.contains_key(&doc.id) {
            return Err(Error::Conflict(format!(
                "document {} already indexed",
                doc.id
            )));
        }
        let vector = crate::embedding::embed(&doc.text, embedder)?;
        let links = link_entities(&doc.id, &doc.text, gazetteer);
        self.insert_record(DocumentRecord {
            id: doc.id,
            title: doc.title,
            text: doc.text,
            tags: doc.tags,
            vector,
            links,
        })?;
        Ok(self.docs.last().expect("just inserted"))
    }

    /// Inserts a record whose vector and links were computed elsewhere.
    pub fn insert_record(&mut self, record: DocumentRecord<T>) -> Result<()> {
        check_dim(self.dim, record.vector.dim())?;
        if self.by_id.contains_key(&record.id) {
            return Err(Error::Conflict(format!(
                "document {} already indexed",
                record.id
            )));
        }
        self.by_id.insert(record.id.clone(), self.docs.len());
        self.docs.push(record);
        Ok(())
    }

    /// Recomputes entity links, e.g. after the gazetteer changed.
    pub fn relink(&mut self, gazetteer: &Gazetteer) {
        for d in &mut self.docs {
            d.links = link_entities(&d.id, &d.text, gazetteer);
        }
    }

    /// Fused score of every document, in index order.
    pub fn score_all(
        &self,
        query: &PreparedQuery<T>,
        cfg: &RetrievalConfig,
        kg: KgView<'_, T>,
    ) -> Result<Vec<DocScore<T>>> {
        check_dim(self.dim, query.vector.dim())?;
        let qv = query.vector.as_slice();
        let qn = query.vector.norm();
        self.docs
            .iter()
            .enumerate()
            .map(|(index, d)| {
                let dv = d.vector.as_slice();
                let (text, dn) = match cfg.fusion_mode {
                    FusionMode::Additive => {
                        let dn = d.vector.norm();
                        let denom = qn * dn;
                        let text = if denom.is_zero() {
                            T::zero()
                        } else {
                            dot(qv, dv) / denom
                        };
                        (text, dn)
                    }
                    _ => (cosine_slices(qv, dv), T::one()),
                };
                let kg_score = match cfg.fusion_mode {
                    FusionMode::TextOnly => T::zero(),
                    _ => kg.similarity(&query.links, &d.links)?,
                };
                let fused = fuse_scores(text, kg_score, cfg, (qn, dn))?;
                Ok(DocScore {
                    index,
                    fused,
                    text,
                    kg: kg_score,
                })
            })
            .collect()
    }

    /// Every document with fused score `>= theta`, best first, capped at
    /// `max_results`. Ties are broken by ascending document id.
    pub fn retrieve_prepared(
        &self,
        query: &PreparedQuery<T>,
        cfg: &RetrievalConfig,
        kg: KgView<'_, T>,
    ) -> Result<RetrievalResult<T>> {
        cfg.validate()?;
        if self.docs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut scores = self.score_all(query, cfg, kg)?;
        scores.sort_by(|a, b| {
            b.fused
                .partial_cmp(&a.fused)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.docs[a.index].id.cmp(&self.docs[b.index].id))
        });
        let best_score = scores[0].fused;
        let theta = T::lit(cfg.theta);
        let documents: Vec<RetrievedDocument<T>> = scores
            .iter()
            .take_while(|s| s.fused >= theta)
            .take(cfg.max_results)
            .map(|s| {
                let d = &self.docs[s.index];
                RetrievedDocument {
                    id: d.id.clone(),
                    title: d.title.clone(),
                    text: d.text.clone(),
                    tags: d.tags.clone(),
                    entities: d.links.entities(),
                    score: s.fused,
                    text_score: s.text,
                    kg_score: s.kg,
                }
            })
            .collect();
        Ok(RetrievalResult {
            abstained: documents.is_empty(),
            documents,
            best_score,
        })
    }

    pub fn retrieve<E: Embedder<T> + ?Sized>(
        &self,
        query: &str,
        cfg: &RetrievalConfig,
        embedder: &E,
        gazetteer: &Gazetteer,
        kg: KgView<'_, T>,
    ) -> Result<RetrievalResult<T>> {
        if self.docs.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let q = PreparedQuery::new(query, embedder, gazetteer)?;
        self.retrieve_prepared(&q, cfg, kg)
    }
}
