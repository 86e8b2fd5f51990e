//! Root-cause hypotheses from saliency and kinematics, via a chat-completion
//! endpoint or an offline heuristic.

mod prompt;
mod taxonomy;
mod transport;

use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompt::{
    bucket_size, build_prompt, pool_extreme, pool_max_abs, DiagnosisRequest, GateSummary, ImageRef, Trail,
    BLOCK_BEGIN, BLOCK_END, MAX_ROWS, MAX_TOP_K,
};
pub use taxonomy::{FailureCategory, FailureTaxonomy};
pub use transport::{extract_content, ChatRequest, EndpointConfig, HttpTransport, MockTransport, Transport};

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("failure taxonomy is empty")]
    EmptyTaxonomy,
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("invalid diagnosis request: {0}")]
    InvalidRequest(String),
    #[error("endpoint unreachable after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        message: String,
        transcript: String,
    },
    #[error("malformed endpoint response: {reason}")]
    Malformed { reason: String, transcript: String },
    #[error("{reports} reports but {labels} labels")]
    LengthMismatch { reports: usize, labels: usize },
}

impl DiagnosisError {
    /// Raw endpoint exchange, when one happened.
    pub fn transcript(&self) -> Option<&str> {
        match self {
            DiagnosisError::Transport { transcript, .. } | DiagnosisError::Malformed { transcript, .. } => {
                Some(transcript)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub category: String,
    pub confidence: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub incident_id: String,
    /// Best first; at most three, ids unique. Empty only for a refusal.
    pub hypotheses: Vec<Hypothesis>,
    /// The endpoint answered without any ranked line.
    pub refusal: bool,
    /// Produced by the offline heuristic rather than an endpoint.
    pub heuristic: bool,
    pub transcript: String,
    pub endpoint: String,
    pub model: String,
    pub attempts: u32,
    pub elapsed_ms: f64,
}

impl DiagnosisReport {
    pub fn ranked_ids(&self) -> Vec<&str> {
        self.hypotheses.iter().map(|h| h.category.as_str()).collect()
    }
}

const SYSTEM_PROMPT: &str = "You are a robotics reliability engineer. Classify anomalies into the given failure \
taxonomy and answer only in the requested block format.";

fn clean_token(s: &str) -> &str {
    s.trim().trim_matches(|c| matches!(c, '`' | '"' | '\'' | '*' | '<' | '>'))
}

fn resolve<'t>(taxonomy: &'t FailureTaxonomy, token: &str) -> Option<&'t str> {
    let token = clean_token(token);
    taxonomy
        .categories
        .iter()
        .find(|c| c.id.eq_ignore_ascii_case(token) || c.name.eq_ignore_ascii_case(token))
        .map(|c| c.id.as_str())
}

/// Parses `RANKED:` lines. Returns an empty list for a response without
/// any such line (a refusal). Duplicate ids keep their first rank; at most
/// three hypotheses are kept.
pub fn parse_response(text: &str, taxonomy: &FailureTaxonomy) -> Result<Vec<Hypothesis>, DiagnosisError> {
    let malformed = |reason: String| DiagnosisError::Malformed {
        reason,
        transcript: text.to_string(),
    };
    let mut out: Vec<Hypothesis> = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.trim().strip_prefix("RANKED:") else {
            continue;
        };
        let mut parts: Vec<&str> = rest.split('|').map(str::trim).collect();
        if parts.first().is_some_and(|p| clean_token(p).trim_end_matches('.').parse::<u32>().is_ok()) {
            parts.remove(0);
        }
        let Some(&raw_id) = parts.first().filter(|p| !clean_token(p).is_empty()) else {
            return Err(malformed(format!("ranked line without a category: {line:?}")));
        };
        let Some(id) = resolve(taxonomy, raw_id) else {
            return Err(malformed(format!("unknown category {:?}", clean_token(raw_id))));
        };
        if out.iter().any(|h| h.category == id) {
            continue;
        }
        let confidence = parts
            .get(1)
            .map(|c| clean_token(c).to_ascii_lowercase())
            .filter(|c| matches!(c.as_str(), "high" | "medium" | "low"))
            .unwrap_or_else(|| "unspecified".into());
        let rationale = if parts.len() > 2 { parts[2..].join(" | ") } else { String::new() };
        out.push(Hypothesis {
            category: id.to_string(),
            confidence,
            rationale,
        });
    }
    out.truncate(3);
    Ok(out)
}

/// [`parse_response`] over arbitrary bytes (invalid UTF-8 is replaced).
pub fn parse_response_bytes(bytes: &[u8], taxonomy: &FailureTaxonomy) -> Result<Vec<Hypothesis>, DiagnosisError> {
    parse_response(&String::from_utf8_lossy(bytes), taxonomy)
}

/// Sends the prompt through `transport`, retrying transport failures up to
/// `cfg.max_retries` times with exponential backoff.
pub fn classify(
    req: &DiagnosisRequest,
    cfg: &EndpointConfig,
    transport: &dyn Transport,
) -> Result<DiagnosisReport, DiagnosisError> {
    let started = Instant::now();
    let prompt = build_prompt(req)?;
    let chat = ChatRequest {
        model: cfg.model.clone(),
        temperature: cfg.temperature,
        system: SYSTEM_PROMPT.into(),
        prompt,
        image: req.image.clone(),
    };
    let mut errors = Vec::new();
    let mut attempts = 0;
    let text = loop {
        attempts += 1;
        match transport.complete(&chat) {
            Ok(text) => break text,
            Err(e) => {
                errors.push(e);
                if attempts > cfg.max_retries {
                    return Err(DiagnosisError::Transport {
                        attempts,
                        message: errors.last().cloned().unwrap_or_default(),
                        transcript: errors.join("\n"),
                    });
                }
                thread::sleep(cfg.backoff(attempts - 1));
            }
        }
    };
    let hypotheses = parse_response(&text, &req.taxonomy)?;
    Ok(DiagnosisReport {
        incident_id: req.incident_id.clone(),
        refusal: hypotheses.is_empty(),
        hypotheses,
        heuristic: false,
        transcript: text,
        endpoint: transport.describe(),
        model: cfg.model.clone(),
        attempts,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Longest run of identical consecutive values.
fn longest_constant_run(xs: &[f64]) -> usize {
    let mut best = usize::from(!xs.is_empty());
    let mut run = 1;
    for w in xs.windows(2) {
        run = if w[0] == w[1] { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

/// Offline ranking: overlap between salient channel names and category
/// channel hints (weighted by saliency rank), plus two unambiguous trail
/// signatures (held values and exact zeros).
pub fn classify_offline(req: &DiagnosisRequest) -> Result<DiagnosisReport, DiagnosisError> {
    let started = Instant::now();
    req.validate()?;
    let k = req.saliency.top_k.len();
    let mut scores: Vec<f64> = vec![0.0; req.taxonomy.categories.len()];
    for (rank, f) in req.saliency.top_k.iter().enumerate() {
        let name = req.channel_names.get(f.dim).cloned().unwrap_or_default();
        let weight = (k - rank) as f64;
        for (s, c) in scores.iter_mut().zip(&req.taxonomy.categories) {
            if c.channel_hints.iter().any(|h| name.starts_with(h.as_str())) {
                *s += weight;
            }
        }
    }
    let mut notes = Vec::new();
    let bonus = 2.0 * k.max(1) as f64;
    for t in &req.trails {
        let held = longest_constant_run(&t.values);
        let zeros = t.values.iter().filter(|&&v| v == 0.0).count();
        if zeros >= 5 {
            notes.push(format!("{} reads exactly zero for {zeros} steps", t.name));
            if let Some(i) = req.taxonomy.categories.iter().position(|c| c.id == "dropout") {
                scores[i] += bonus;
            }
        } else if held >= 5 {
            notes.push(format!("{} holds one value for {held} steps", t.name));
            if let Some(i) = req.taxonomy.categories.iter().position(|c| c.id == "sensor_freeze") {
                scores[i] += bonus;
            }
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let top: Vec<String> = req
        .saliency
        .top_k
        .iter()
        .map(|f| req.channel_names.get(f.dim).cloned().unwrap_or_else(|| format!("obs_{}", f.dim)))
        .collect();
    let hypotheses = order
        .into_iter()
        .take(3)
        .map(|i| {
            let c = &req.taxonomy.categories[i];
            Hypothesis {
                category: c.id.clone(),
                confidence: "low".into(),
                rationale: format!("heuristic score {:.1} from salient channels [{}]", scores[i], top.join(", ")),
            }
        })
        .collect();
    Ok(DiagnosisReport {
        incident_id: req.incident_id.clone(),
        hypotheses,
        refusal: false,
        heuristic: true,
        transcript: notes.join("\n"),
        endpoint: "offline".into(),
        model: "heuristic".into(),
        attempts: 0,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Endpoint when a transport is given, offline heuristic otherwise.
pub fn diagnose(
    req: &DiagnosisRequest,
    cfg: &EndpointConfig,
    transport: Option<&dyn Transport>,
) -> Result<DiagnosisReport, DiagnosisError> {
    match transport {
        Some(t) => classify(req, cfg, t),
        None => classify_offline(req),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcaScore {
    pub n: usize,
    pub top1: f64,
    pub top3: f64,
}

/// Top-1 and top-3 accuracy. Refusals count as misses.
pub fn score_rca(reports: &[DiagnosisReport], labels: &[&str]) -> Result<RcaScore, DiagnosisError> {
    if reports.len() != labels.len() {
        return Err(DiagnosisError::LengthMismatch {
            reports: reports.len(),
            labels: labels.len(),
        });
    }
    let n = reports.len();
    let (mut t1, mut t3) = (0usize, 0usize);
    for (r, &l) in reports.iter().zip(labels) {
        let ids = r.ranked_ids();
        t1 += usize::from(ids.first() == Some(&l));
        t3 += usize::from(ids.iter().take(3).any(|&i| i == l));
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(RcaScore {
        n,
        top1: frac(t1),
        top3: frac(t3),
    })
}

/// A well-formed ranked block naming `ids` in order.
pub fn format_ranked_block(ids: &[&str]) -> String {
    let mut s = format!("{BLOCK_BEGIN}\n");
    for (i, id) in ids.iter().enumerate() {
        s.push_str(&format!("RANKED: {} | {id} | medium | consistent with the salient channels\n", i + 1));
    }
    s.push_str(BLOCK_END);
    s.push('\n');
    s
}
