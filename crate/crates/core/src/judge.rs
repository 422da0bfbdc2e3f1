//! Rubric-based answer grading by an external chat-completion judge:
//! prompt assembly, tolerant verdict parsing, and batched submission over a
//! pluggable transport (HTTP in the CLI, canned fixtures offline).

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The grading rubric. `{Q}`, `{A}`, and `{G}` in the trailing input
/// section are replaced by the question, the model answer, and the
/// reference answer.
pub const PROMPT_TEMPLATE: &str = "\
You are an expert in swing golf coaching. Below, I will provide you with an input:
<input> = <Q> + <A> + <G>

Where:
<Q> = A question about the athlete's swing motion.
<A> = The LLM's response to the question and motion.
<G> = The coach's standard answer.

Your task is to evaluate the quality of the LLM's response based on the coach's standard answer using the following criteria:

1. Reasonableness: Compare A and G. If A aligns with professional advice, set pred=True. Otherwise, set pred=False.
- If A is limited, give a lower score. If A is comprehensive, give a higher score.
- Confidence = 1 if the evaluation is certain; otherwise, Confidence = 0.

2. Coherence: Evaluate the logical flow of A. If A is consistent with G, set pred=True. Otherwise, set pred=False.
- Logical flaws reduce the score, while strong logic increases it.
- Confidence = 1 if the evaluation is certain; otherwise, Confidence = 0.

3. Pertinence: Assess how closely A addresses the question Q. If relevant, set pred=True. Otherwise, set pred=False.
- General responses lower the score, while targeted responses increase it.
- Confidence = 1 if the evaluation is certain; otherwise, Confidence = 0.

4. Adaptability: Check if A aligns with the athlete's skill level, as indicated in G. If aligned, set pred=True. Otherwise, set pred=False.
- Misaligned suggestions lower the score, while aligned ones increase it.
- Confidence = 1 if the evaluation is certain; otherwise, Confidence = 0.

Finally, combine the evaluations:
- If any criterion has confidence = 0, set the overall confidence = 0.
- The result must follow this format:
{
  'Reasonableness': {'pred': 'True', 'score': 3.9, 'confidence': 1},
  'Coherence': {'pred': 'False', 'score': 0.9, 'confidence': 0},
  'Pertinence': {'pred': 'True', 'score': 3.5, 'confidence': 1},
  'Adaptability': {'pred': 'True', 'score': 4.2, 'confidence': 1},
  'All': {'pred': 'True', 'score': 2.8, 'confidence': 0}
}

Input:
<Q> = {Q}
<A> = {A}
<G> = {G}
";

pub const CRITERIA: [&str; 4] = ["Reasonableness", "Coherence", "Pertinence", "Adaptability"];

pub fn build_prompt(question: &str, answer: &str, ground_truth: &str) -> Result<String> {
    for (name, v) in [
        ("question", question),
        ("answer", answer),
        ("ground truth", ground_truth),
    ] {
        if v.trim().is_empty() {
            return Err(Error::Domain(format!("judge {name} is empty")));
        }
    }
    // Substitute in one pass so placeholder text inside a field stays literal.
    let mut out = String::with_capacity(PROMPT_TEMPLATE.len() + question.len() + answer.len() + ground_truth.len());
    let mut rest = PROMPT_TEMPLATE;
    while let Some(pos) = rest.find('{') {
        let (head, tail) = rest.split_at(pos);
        out.push_str(head);
        let value = match tail.get(..3) {
            Some("{Q}") => Some(question),
            Some("{A}") => Some(answer),
            Some("{G}") => Some(ground_truth),
            _ => None,
        };
        match value {
            Some(v) => {
                out.push_str(v);
                rest = &tail[3..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Lowercase hex SHA-256 of the prompt; names offline fixtures.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub ground_truth: String,
}

impl JudgeRequest {
    pub fn prompt(&self) -> Result<String> {
        build_prompt(&self.question, &self.answer, &self.ground_truth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub pred: bool,
    pub score: f64,
    pub confidence: u8,
}

impl CriterionVerdict {
    const UNSURE: CriterionVerdict = CriterionVerdict {
        pred: false,
        score: 0.0,
        confidence: 0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
pub struct JudgeVerdict {
    pub reasonableness: CriterionVerdict,
    pub coherence: CriterionVerdict,
    pub pertinence: CriterionVerdict,
    pub adaptability: CriterionVerdict,
    pub all: CriterionVerdict,
}

impl JudgeVerdict {
    /// The verdict recorded when a reply cannot be used: every criterion
    /// false, score 0, confidence 0.
    pub fn unsure() -> Self {
        let u = CriterionVerdict::UNSURE;
        JudgeVerdict {
            reasonableness: u,
            coherence: u,
            pertinence: u,
            adaptability: u,
            all: u,
        }
    }

    pub fn criteria(&self) -> [CriterionVerdict; 4] {
        [self.reasonableness, self.coherence, self.pertinence, self.adaptability]
    }

    pub fn needs_review(&self) -> bool {
        self.all.confidence == 0
    }
}

fn criterion_regex(name: &str) -> Regex {
    Regex::new(&format!(r#"(?is)['"]?{name}['"]?\s*:\s*\{{([^}}]*)\}}"#)).expect("static pattern")
}

fn field_regexes() -> &'static [Regex; 3] {
    static FIELDS: OnceLock<[Regex; 3]> = OnceLock::new();
    FIELDS.get_or_init(|| {
        [
            Regex::new(r#"(?i)['"]?pred['"]?\s*:\s*['"]?(true|false)['"]?"#),
            Regex::new(r#"(?i)['"]?score['"]?\s*:\s*['"]?([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"#),
            Regex::new(r#"(?i)['"]?confidence['"]?\s*:\s*['"]?([-+]?\d+)"#),
        ]
        .map(|r| r.expect("static pattern"))
    })
}

fn parse_criterion(text: &str, name: &str) -> Result<Option<CriterionVerdict>> {
    let Some(body) = criterion_regex(name).captures(text).map(|c| c[1].to_string()) else {
        return Ok(None);
    };
    let [pred_re, score_re, conf_re] = field_regexes();
    let field = |re: &Regex, field: &str| {
        re.captures(&body)
            .map(|c| c[1].to_string())
            .ok_or_else(|| Error::Parse(format!("{name}: missing {field}")))
    };
    let pred = field(pred_re, "pred")?.eq_ignore_ascii_case("true");
    let score: f64 = field(score_re, "score")?
        .parse()
        .map_err(|e| Error::Parse(format!("{name}: bad score: {e}")))?;
    if !(0.0..=5.0).contains(&score) {
        return Err(Error::Validation(format!("{name}: score {score} outside [0, 5]")));
    }
    let confidence = match field(conf_re, "confidence")?.as_str() {
        "0" => 0,
        "1" => 1,
        other => return Err(Error::Validation(format!("{name}: confidence {other} is not 0 or 1"))),
    };
    Ok(Some(CriterionVerdict {
        pred,
        score,
        confidence,
    }))
}

/// Parses a judge reply. Quotes may be single or double and boolean case
/// is ignored. A missing overall entry is synthesized (pred: all four
/// true, score: their mean, confidence: their minimum), and the overall
/// confidence is forced to 0 whenever any criterion has confidence 0.
pub fn parse_verdict(text: &str) -> Result<JudgeVerdict> {
    let mut found = [CriterionVerdict::UNSURE; 4];
    for (slot, name) in found.iter_mut().zip(CRITERIA) {
        *slot = parse_criterion(text, name)?.ok_or_else(|| Error::Parse(format!("missing criterion {name}")))?;
    }
    let mut all = match parse_criterion(text, "All")? {
        Some(v) => v,
        None => CriterionVerdict {
            pred: found.iter().all(|c| c.pred),
            score: found.iter().map(|c| c.score).sum::<f64>() / 4.0,
            confidence: found.iter().map(|c| c.confidence).min().unwrap_or(0),
        },
    };
    if found.iter().any(|c| c.confidence == 0) {
        all.confidence = 0;
    }
    let [reasonableness, coherence, pertinence, adaptability] = found;
    Ok(JudgeVerdict {
        reasonableness,
        coherence,
        pertinence,
        adaptability,
        all,
    })
}

/// Delivers one prompt and returns the judge's reply text.
pub trait Transport: Sync {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String>;
}

/// Replies read from `<dir>/<prompt_hash>.txt`; never touches the network.
#[derive(Clone, Debug)]
pub struct OfflineTransport {
    pub dir: PathBuf,
}

impl OfflineTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OfflineTransport { dir: dir.into() }
    }

    pub fn fixture_path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", prompt_hash(prompt)))
    }
}

impl Transport for OfflineTransport {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String> {
        let path = self.fixture_path(prompt);
        std::fs::read_to_string(&path).map_err(|e| Error::Transport {
            request_id: request_id.to_string(),
            message: format!("no fixture at {}: {e}", path.display()),
        })
    }
}

/// Where judge traffic goes, resolved from `JUDGE_OFFLINE_DIR` or
/// `JUDGE_ENDPOINT` + `JUDGE_API_KEY` (+ optional `JUDGE_MODEL`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JudgeEndpoint {
    Offline(PathBuf),
    Remote {
        url: String,
        api_key: String,
        model: String,
    },
}

pub const DEFAULT_JUDGE_MODEL: &str = "gpt-4o";

impl JudgeEndpoint {
    /// `offline` (e.g. a command-line flag) wins over the environment.
    pub fn resolve(offline: Option<PathBuf>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        if let Some(dir) = offline.or_else(|| env("JUDGE_OFFLINE_DIR").map(PathBuf::from)) {
            return Ok(JudgeEndpoint::Offline(dir));
        }
        match (env("JUDGE_ENDPOINT"), env("JUDGE_API_KEY")) {
            (Some(url), Some(api_key)) if !url.is_empty() && !api_key.is_empty() => Ok(JudgeEndpoint::Remote {
                url,
                api_key,
                model: env("JUDGE_MODEL").unwrap_or_else(|| DEFAULT_JUDGE_MODEL.to_string()),
            }),
            _ => Err(Error::Config(
                "judge needs JUDGE_ENDPOINT and JUDGE_API_KEY, or an offline fixture directory".into(),
            )),
        }
    }
}

/// Chat-completion request body for one prompt.
pub fn chat_request_body(model: &str, prompt: &str) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
    })
}

/// Reply text from a chat-completion response (`choices[0].message.content`).
pub fn chat_reply_text(response: &serde_json::Value) -> Option<String> {
    response
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubmitOptions {
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub concurrency: usize,
}

impl Default for SubmitOptions {
    fn default() -> Self {
        SubmitOptions {
            attempts: 3,
            backoff: Duration::from_millis(500),
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub id: String,
    pub prompt_hash: String,
    pub verdict: JudgeVerdict,
    /// Whether the reply parsed; unparsed replies carry an unsure verdict.
    pub parsed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    pub attempts: usize,
}

fn submit_one(req: &JudgeRequest, transport: &dyn Transport, opts: &SubmitOptions) -> Result<VerdictRecord> {
    let prompt = req.prompt()?;
    let mut delay = opts.backoff;
    let mut last = None;
    for attempt in 1..=opts.attempts.max(1) {
        match transport.complete(&req.id, &prompt) {
            Ok(reply) => {
                let (verdict, parsed, error, raw) = match parse_verdict(&reply) {
                    Ok(v) => (v, true, None, None),
                    Err(e) => (JudgeVerdict::unsure(), false, Some(e.to_string()), Some(reply)),
                };
                return Ok(VerdictRecord {
                    id: req.id.clone(),
                    prompt_hash: prompt_hash(&prompt),
                    verdict,
                    parsed,
                    error,
                    raw_reply: raw,
                    attempts: attempt,
                });
            }
            Err(e) => {
                log::warn!("judge request {} attempt {attempt} failed: {e}", req.id);
                last = Some(e);
                if attempt < opts.attempts && !delay.is_zero() {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    let message = last.map_or_else(|| "no attempts made".to_string(), |e| e.to_string());
    Err(Error::Transport {
        request_id: req.id.clone(),
        message: format!("gave up after {} attempts: {message}", opts.attempts.max(1)),
    })
}

/// Submits every request (up to `concurrency` at a time) and returns one
/// record per request sorted by id. A transport failure that survives all
/// retries fails the batch; an unusable reply only marks its record.
pub fn evaluate_batch(
    requests: &[JudgeRequest],
    transport: &dyn Transport,
    opts: &SubmitOptions,
) -> Result<Vec<VerdictRecord>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<VerdictRecord>>>> = Mutex::new((0..requests.len()).map(|_| None).collect());
    let workers = opts.concurrency.clamp(1, requests.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let r = submit_one(req, transport, opts);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(requests.len());
    for r in results.into_inner().expect("worker panicked") {
        out.push(r.expect("every request visited")?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
