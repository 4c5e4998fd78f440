//! Response generation conditioned on the query and the retrieved documents.
//!
//! Backends implement [`GenerationBackend`]. The built-in [`ExtractiveMock`]
//! only ever copies sentences out of the retrieved documents, so every
//! sentence it emits is grounded and cited by construction.

use std::cmp::Ordering;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::kg::Triple;
use crate::retriever::RetrievedDocument;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a, T> {
    pub query: &'a str,
    pub documents: &'a [RetrievedDocument<T>],
    pub kg_context: &'a [Triple],
    pub max_tokens: usize,
    pub allow_ungrounded: bool,
}

impl<'a, T> GenerationRequest<'a, T> {
    pub fn new(query: &'a str, documents: &'a [RetrievedDocument<T>]) -> Self {
        Self {
            query,
            documents,
            kg_context: &[],
            max_tokens: 256,
            allow_ungrounded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftSentence {
    pub text: String,
    /// Id of the document the sentence is taken from, if any.
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseDraft {
    pub sentences: Vec<DraftSentence>,
    /// Rendered KG facts (`per KG: head relation tail`), kept apart from the
    /// sentences so they are never mistaken for quoted text.
    pub kg_appendix: Vec<String>,
    pub backend: String,
    pub grounded: bool,
}

impl ResponseDraft {
    /// An uncited free-text draft.
    pub fn plain(backend: impl Into<String>, text: &str) -> Self {
        let sentences = split_sentences(text)
            .into_iter()
            .map(|s| DraftSentence {
                text: s.to_owned(),
                source: None,
            })
            .collect();
        Self::from_sentences(backend, sentences, Vec::new())
    }

    pub fn from_sentences(
        backend: impl Into<String>,
        sentences: Vec<DraftSentence>,
        kg_appendix: Vec<String>,
    ) -> Self {
        let grounded = !sentences.is_empty() && sentences.iter().all(|s| s.source.is_some());
        Self {
            sentences,
            kg_appendix,
            backend: backend.into(),
            grounded,
        }
    }

    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Sentence text followed by the KG appendix, one fact per line.
    pub fn render(&self) -> String {
        let mut out = self.text();
        for line in &self.kg_appendix {
            out.push('\n');
            out.push_str(line);
        }
        out
    }

    /// `(sentence index, document id)` pairs.
    pub fn citations(&self) -> Vec<(usize, String)> {
        self.sentences
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.source.clone().map(|d| (i, d)))
            .collect()
    }
}

pub trait GenerationBackend<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn draft(&self, req: &GenerationRequest<'_, T>) -> Result<ResponseDraft>;
}

/// Checks the grounding precondition, then delegates to the backend.
pub fn generate<T: Scalar, B: GenerationBackend<T> + ?Sized>(
    req: &GenerationRequest<'_, T>,
    backend: &B,
) -> Result<ResponseDraft> {
    if req.documents.is_empty() && !req.allow_ungrounded {
        return Err(Error::Grounding);
    }
    if req.max_tokens == 0 {
        return Err(Error::Validation("max_tokens must be positive".into()));
    }
    let draft = backend.draft(req)?;
    for s in &draft.sentences {
        if let Some(src) = &s.source {
            if !req.documents.iter().any(|d| &d.id == src) {
                return Err(Error::Backend(format!(
                    "{} cited {src}, which was not among the retrieved documents",
                    backend.name()
                )));
            }
        }
    }
    Ok(draft)
}

/// Splits on `.`, `?` or `!` followed by whitespace. Terminators stay with
/// their sentence; the returned slices are trimmed substrings of `text`.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '?' | '!') {
            if let Some(&(_, next)) = iter.peek() {
                if next.is_whitespace() && !(c == '.' && is_abbreviation(&text[start..i])) {
                    let end = i + c.len_utf8();
                    let s = text[start..end].trim();
                    if !s.is_empty() {
                        out.push(s);
                    }
                    start = end;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Abbreviations common in legal citations, compared without the final dot.
const ABBREVIATIONS: &[&str] = &[
    "v", "vs", "no", "nos", "inc", "co", "corp", "ltd", "llc", "art", "arts", "sec", "s", "ss",
    "para", "e.g", "i.e", "cf", "etc", "mr", "mrs", "ms", "dr", "st", "u.s", "j", "jj", "cir",
    "app", "supp",
];

/// Whether the word just before a period is an abbreviation or an initial.
fn is_abbreviation(before: &str) -> bool {
    let word = before
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| !c.is_alphanumeric());
    let mut chars = word.chars();
    match (chars.next(), chars.next()) {
        (None, _) => false,
        (Some(c), None) => c.is_uppercase() || word == "v" || word == "s",
        _ => ABBREVIATIONS.contains(&word.to_lowercase().as_str()),
    }
}

fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// The prefix of `s` holding its first `n` whitespace-separated tokens.
fn token_prefix(s: &str, n: usize) -> &str {
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == n {
                    return &s[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    s
}

pub fn render_triple(t: &Triple) -> String {
    format!("per KG: {} {} {}", t.head, t.relation, t.tail)
}

/// Deterministic extractive generator: ranks every sentence of every retrieved
/// document by cosine similarity to the query and emits the best `max_sentences`.
pub struct ExtractiveMock<T: Scalar> {
    embedder: Arc<dyn Embedder<T>>,
    pub max_sentences: usize,
}

impl<T: Scalar> ExtractiveMock<T> {
    pub fn new(embedder: Arc<dyn Embedder<T>>) -> Self {
        Self {
            embedder,
            max_sentences: 3,
        }
    }

    pub fn with_max_sentences(mut self, m: usize) -> Self {
        self.max_sentences = m.max(1);
        self
    }
}

impl<T: Scalar> GenerationBackend<T> for ExtractiveMock<T> {
    fn name(&self) -> &str {
        "extractive_mock"
    }

    fn draft(&self, req: &GenerationRequest<'_, T>) -> Result<ResponseDraft> {
        let q = self.embedder.embed(req.query)?;
        // (score, doc rank, sentence position, text, doc id)
        let mut scored: Vec<(T, usize, usize, &str, &str)> = Vec::new();
        for (di, doc) in req.documents.iter().enumerate() {
            for (si, s) in split_sentences(&doc.text).into_iter().enumerate() {
                let v = self.embedder.embed(s)?;
                scored.push((cosine(&q, &v)?, di, si, s, &doc.id));
            }
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut sentences: Vec<DraftSentence> = Vec::new();
        let mut budget = req.max_tokens;
        for (_, _, _, text, id) in scored {
            if sentences.len() == self.max_sentences || budget == 0 {
                break;
            }
            if sentences.iter().any(|s| s.text == text) {
                continue;
            }
            let n = token_count(text);
            let text = if n <= budget {
                text
            } else if sentences.is_empty() {
                token_prefix(text, budget)
            } else {
                continue;
            };
            budget -= token_count(text).min(budget);
            sentences.push(DraftSentence {
                text: text.to_owned(),
                source: Some(id.to_owned()),
            });
        }
        let appendix = req.kg_context.iter().map(render_triple).collect();
        Ok(ResponseDraft::from_sentences(
            self.name(),
            sentences,
            appendix,
        ))
    }
}

/// Adapter for an external generator over HTTP.
///
/// Request: `{"query", "documents": [{"id", "text"}], "kg_context": [..], "max_tokens"}`.
/// Response: `{"text", "citations": [{"sentence": i, "doc_id": ..}]}`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub endpoint: String,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct HttpDoc<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    query: &'a str,
    documents: Vec<HttpDoc<'a>>,
    kg_context: Vec<String>,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct HttpCitation {
    sentence: usize,
    doc_id: String,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
    #[serde(default)]
    citations: Vec<HttpCitation>,
}

impl<T: Scalar> GenerationBackend<T> for HttpBackend {
    fn name(&self) -> &str {
        "external_http"
    }

    fn draft(&self, req: &GenerationRequest<'_, T>) -> Result<ResponseDraft> {
        let body = HttpRequest {
            query: req.query,
            documents: req
                .documents
                .iter()
                .map(|d| HttpDoc {
                    id: &d.id,
                    text: &d.text,
                })
                .collect(),
            kg_context: req.kg_context.iter().map(render_triple).collect(),
            max_tokens: req.max_tokens,
        };
        let resp: HttpResponse = crate::http::post_json(&self.endpoint, self.timeout, &body)?;
        let limited = token_prefix(&resp.text, req.max_tokens);
        let mut sentences: Vec<DraftSentence> = split_sentences(limited)
            .into_iter()
            .map(|s| DraftSentence {
                text: s.to_owned(),
                source: None,
            })
            .collect();
        for c in resp.citations {
            if let Some(s) = sentences.get_mut(c.sentence) {
                s.source = Some(c.doc_id);
            }
        }
        Ok(ResponseDraft::from_sentences(
            "external_http",
            sentences,
            Vec::new(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{HashEmbedder, Vector};
    use std::collections::{BTreeSet, HashMap};

    fn doc(id: &str, text: &str) -> RetrievedDocument<f64> {
        RetrievedDocument {
            id: id.into(),
            title: String::new(),
            text: text.into(),
            tags: BTreeSet::new(),
            entities: BTreeSet::new(),
            score: 1.0,
            text_score: 1.0,
            kg_score: 1.0,
        }
    }

    fn mock() -> ExtractiveMock<f64> {
        ExtractiveMock::new(Arc::new(HashEmbedder::default()))
    }

    #[test]
    fn abbreviations_do_not_end_sentences() {
        assert_eq!(
            split_sentences(
                "In Alder v. Brook Ltd. the court ruled. See Art. 4 and J. Smith. Done."
            ),
            vec![
                "In Alder v. Brook Ltd. the court ruled.",
                "See Art. 4 and J. Smith.",
                "Done."
            ]
        );
        assert_eq!(
            split_sentences("It was 5. Then 6."),
            vec!["It was 5.", "Then 6."]
        );
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(
            split_sentences("A b. C d? E!  F"),
            vec!["A b.", "C d?", "E!", "F"]
        );
        assert_eq!(
            split_sentences("Section 2.1 applies. Done."),
            vec!["Section 2.1 applies.", "Done."]
        );
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn single_document_is_quoted_verbatim() {
        let d = [doc(
            "d1",
            "The lease was signed in 2019. Rent is due monthly. The tenant may sublet.",
        )];
        let req = GenerationRequest::new("when is rent due", &d);
        let draft = generate(&req, &mock()).unwrap();
        assert!(draft.grounded);
        for s in &draft.sentences {
            assert!(d[0].text.contains(&s.text));
            assert_eq!(s.source.as_deref(), Some("d1"));
        }
        assert_eq!(draft, generate(&req, &mock()).unwrap());
    }

    #[test]
    fn empty_documents_need_permission() {
        let req = GenerationRequest::<f64>::new("q", &[]);
        assert!(matches!(generate(&req, &mock()), Err(Error::Grounding)));
    }

    #[test]
    fn query_equal_to_a_sentence_ranks_it_first() {
        let d = [doc(
            "d1",
            "Alpha beta gamma. The statute of limitations is six years. Other text here.",
        )];
        let req = GenerationRequest::new("The statute of limitations is six years.", &d);
        let draft = generate(&req, &mock()).unwrap();
        assert_eq!(
            draft.sentences[0].text,
            "The statute of limitations is six years."
        );
        let one = generate(&req, &mock().with_max_sentences(1)).unwrap();
        assert_eq!(one.sentences.len(), 1);
    }

    struct TableEmbedder(HashMap<&'static str, [f64; 2]>);

    impl Embedder<f64> for TableEmbedder {
        fn name(&self) -> &str {
            "table"
        }
        fn dim(&self) -> usize {
            2
        }
        fn deterministic(&self) -> bool {
            true
        }
        fn embed(&self, text: &str) -> Result<Vector<f64>> {
            Vector::from_f64(
                self.0
                    .get(text)
                    .ok_or_else(|| Error::NotFound(text.into()))?,
            )
        }
    }

    #[test]
    fn planted_similarities_fix_the_order() {
        let unit = |c: f64| [c, (1.0 - c * c).sqrt()];
        let e = TableEmbedder(HashMap::from([
            ("q", [1.0, 0.0]),
            ("Low one.", unit(0.7)),
            ("High one.", unit(0.9)),
            ("Noise.", unit(0.1)),
        ]));
        let d = [doc("a", "Low one. Noise."), doc("b", "High one.")];
        let m = ExtractiveMock::new(Arc::new(e)).with_max_sentences(2);
        let draft = generate(&GenerationRequest::new("q", &d), &m).unwrap();
        let order: Vec<_> = draft
            .sentences
            .iter()
            .map(|s| (s.text.as_str(), s.source.as_deref().unwrap()))
            .collect();
        assert_eq!(order, vec![("High one.", "b"), ("Low one.", "a")]);
    }

    #[test]
    fn kg_context_goes_to_the_appendix() {
        let d = [doc("d1", "Statute X governs contracts.")];
        let kg = [Triple::new("Statute X", "applies_to", "Contract Law")];
        let req = GenerationRequest {
            kg_context: &kg,
            ..GenerationRequest::new("statute", &d)
        };
        let draft = generate(&req, &mock()).unwrap();
        assert_eq!(
            draft.kg_appendix,
            vec!["per KG: Statute X applies_to Contract Law"]
        );
        assert!(draft
            .render()
            .ends_with("per KG: Statute X applies_to Contract Law"));
        assert!(draft.grounded);
    }

    #[test]
    fn max_tokens_truncates_on_word_boundaries() {
        let d = [doc("d1", "One  two three four five.")];
        let req = GenerationRequest {
            max_tokens: 2,
            ..GenerationRequest::new("one two", &d)
        };
        let draft = generate(&req, &mock()).unwrap();
        assert_eq!(draft.sentences[0].text, "One  two");
        assert!(d[0].text.contains(&draft.sentences[0].text));
    }

    #[test]
    fn unreachable_http_backend() {
        let b = HttpBackend {
            endpoint: "http://127.0.0.1:9/generate".into(),
            timeout: Duration::from_millis(200),
        };
        let d = [doc("d1", "text.")];
        let r = generate(&GenerationRequest::new("q", &d), &b);
        assert!(matches!(r, Err(Error::BackendUnreachable(_))));
    }
}
