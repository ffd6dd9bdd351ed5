//! Assembled global/local decoding.
//!
//! At every step the decoder asks a [`LogitSource`] for logits on the
//! original view and on the augmented view, and forms
//!
//! ```text
//! keep  = { y : p_orig(y) >= beta · max_w p_orig(w) }
//! p(y)  ∝ exp(orig(y) + alpha · aug(y))   for y in keep, 0 otherwise
//! ```
//!
//! where `p_orig = softmax(orig)`. The result is renormalized over `keep`
//! and handed to the configured [`Sampler`]. With `aug == orig` this is the
//! original distribution at temperature `1 / (1 + alpha)`.
//!
//! The regular baseline (no augmented view) samples from `softmax(orig)`
//! without truncation.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numeric::{argmax_ties, softmax, SeededRng, Vector};
use crate::toy::Answer;
use crate::TokenId;

/// Anything that produces next-token logits for a view of an image.
pub trait LogitSource {
    /// Original or augmented image representation.
    type View;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> TokenId;

    fn next_logits(&self, view: &Self::View, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vector>;
}

/// Candidate restriction applied before a temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    TopP(f64),
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    Multinomial,
    TopP(f64),
    TopK(usize),
    Temperature(f64),
    /// Filter first, then temperature.
    Composed {
        filter: Filter,
        temperature: f64,
    },
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64| if p > 0.0 && p <= 1.0 { Ok(()) } else { contract(format!("top-p {p} outside (0, 1]")) };
        let check_k = |k: usize| if k >= 1 { Ok(()) } else { contract("top-k needs k >= 1") };
        let check_t = |t: f64| if t > 0.0 && t.is_finite() { Ok(()) } else { contract(format!("temperature {t} must be positive")) };
        match *self {
            Sampler::Greedy | Sampler::Multinomial => Ok(()),
            Sampler::TopP(p) => check_p(p),
            Sampler::TopK(k) => check_k(k),
            Sampler::Temperature(t) => check_t(t),
            Sampler::Composed { filter, temperature } => {
                check_t(temperature)?;
                match filter {
                    Filter::TopP(p) => check_p(p),
                    Filter::TopK(k) => check_k(k),
                }
            }
        }
    }

    /// Short label used in reports, e.g. `top_p(0.7)+temp(0.5)`.
    pub fn label(&self) -> String {
        match *self {
            Sampler::Greedy => "greedy".into(),
            Sampler::Multinomial => "multinomial".into(),
            Sampler::TopP(p) => format!("top_p({p})"),
            Sampler::TopK(k) => format!("top_k({k})"),
            Sampler::Temperature(t) => format!("temp({t})"),
            Sampler::Composed { filter: Filter::TopP(p), temperature } => format!("top_p({p})+temp({temperature})"),
            Sampler::Composed { filter: Filter::TopK(k), temperature } => format!("top_k({k})+temp({temperature})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sampler: Sampler,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 0.5, sampler: Sampler::Multinomial, max_len: 16, seed: 0 }
    }
}

impl DecoderConfig {
    /// Weights used with greedy decoding: alpha = 1, beta = 0.1.
    pub fn greedy() -> Self {
        Self { alpha: 1.0, beta: 0.1, sampler: Sampler::Greedy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return contract(format!("alpha {} must be a finite nonnegative weight", self.alpha));
        }
        check_beta(self.beta)?;
        if self.max_len == 0 {
            return contract("max_len must be at least 1");
        }
        self.sampler.validate()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        contract(format!("beta {beta} outside (0, 1]"))
    }
}

fn check_lengths(orig: &[f64], aug: &[f64]) -> Result<()> {
    if orig.len() != aug.len() {
        return contract(format!("logit lengths differ: {} vs {}", orig.len(), aug.len()));
    }
    if orig.is_empty() {
        return contract("empty logits");
    }
    Ok(())
}

/// `softmax(orig + alpha · aug)`.
pub fn fuse_logits(orig: &[f64], aug: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_lengths(orig, aug)?;
    let fused: Vec<f64> = orig.iter().zip(aug).map(|(o, a)| o + alpha * a).collect();
    Ok(softmax(&fused))
}

/// Tokens whose original probability is at least `beta` times the largest.
pub fn plausibility_keep_set(orig: &[f64], beta: f64) -> Result<Vec<TokenId>> {
    check_beta(beta)?;
    if orig.is_empty() {
        return contract("empty logits");
    }
    let p = softmax(orig);
    let max = p.iter().copied().fold(0.0, f64::max);
    let cutoff = beta * max;
    Ok(p.iter().enumerate().filter(|(_, q)| **q >= cutoff).map(|(i, _)| i).collect())
}

/// Fused distribution truncated to the plausibility set and renormalized.
pub fn agla_distribution(orig: &[f64], aug: &[f64], cfg: &DecoderConfig) -> Result<Vec<f64>> {
    Ok(agla_step(orig, aug, cfg.alpha, cfg.beta)?.1)
}

/// Returns the kept set alongside the distribution.
pub fn agla_step(orig: &[f64], aug: &[f64], alpha: f64, beta: f64) -> Result<(Vec<TokenId>, Vec<f64>)> {
    check_lengths(orig, aug)?;
    let keep = plausibility_keep_set(orig, beta)?;
    let fused: Vec<f64> = keep.iter().map(|&i| orig[i] + alpha * aug[i]).collect();
    let kept_probs = softmax(&fused);
    let mut dist = vec![0.0; orig.len()];
    for (&i, p) in keep.iter().zip(kept_probs) {
        dist[i] = p;
    }
    Ok((keep, dist))
}

/// Plain `softmax(orig)`, the regular baseline.
pub fn regular_distribution(orig: &[f64]) -> Result<Vec<f64>> {
    if orig.is_empty() {
        return contract("empty logits");
    }
    Ok(softmax(orig))
}

fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() || dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return contract("distribution must be non-empty with nonnegative finite entries");
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return contract(format!("distribution sums to {total}"));
    }
    Ok(())
}

/// Support indices sorted by probability descending, ties by index.
fn ranked_support(dist: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx
}

fn restrict(dist: &[f64], keep: &[usize]) -> Vec<f64> {
    let total: f64 = keep.iter().map(|&i| dist[i]).sum();
    let mut out = vec![0.0; dist.len()];
    keep.iter().for_each(|&i| out[i] = dist[i] / total);
    out
}

fn top_k(dist: &[f64], k: usize) -> Vec<f64> {
    let mut ranked = ranked_support(dist);
    ranked.truncate(k);
    restrict(dist, &ranked)
}

fn top_p(dist: &[f64], p: f64) -> Vec<f64> {
    let mut keep = Vec::new();
    let mut mass = 0.0;
    for i in ranked_support(dist) {
        keep.push(i);
        mass += dist[i];
        if mass >= p {
            break;
        }
    }
    restrict(dist, &keep)
}

fn with_temperature(dist: &[f64], t: f64) -> Vec<f64> {
    let support: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    let scaled: Vec<f64> = support.iter().map(|&i| dist[i].ln() / t).collect();
    let mut out = vec![0.0; dist.len()];
    for (&i, q) in support.iter().zip(softmax(&scaled)) {
        out[i] = q;
    }
    out
}

/// The distribution a sampler actually draws from (greedy collapses to the
/// lowest-index argmax).
pub fn sampler_distribution(dist: &[f64], sampler: &Sampler) -> Result<Vec<f64>> {
    sampler.validate()?;
    check_distribution(dist)?;
    Ok(match *sampler {
        Sampler::Greedy => {
            let mut one_hot = vec![0.0; dist.len()];
            one_hot[argmax_ties(dist)?[0]] = 1.0;
            one_hot
        }
        Sampler::Multinomial => dist.to_vec(),
        Sampler::TopP(p) => top_p(dist, p),
        Sampler::TopK(k) => top_k(dist, k),
        Sampler::Temperature(t) => with_temperature(dist, t),
        Sampler::Composed { filter, temperature } => {
            let filtered = match filter {
                Filter::TopP(p) => top_p(dist, p),
                Filter::TopK(k) => top_k(dist, k),
            };
            with_temperature(&filtered, temperature)
        }
    })
}

fn draw(dist: &[f64], rng: &mut SeededRng) -> TokenId {
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

pub fn sample(dist: &[f64], sampler: &Sampler, rng: &mut SeededRng) -> Result<TokenId> {
    if *sampler == Sampler::Greedy {
        check_distribution(dist)?;
        return Ok(argmax_ties(dist)?[0]);
    }
    let final_dist = sampler_distribution(dist, sampler)?;
    Ok(draw(&final_dist, rng))
}

/// Diagnostic record of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub original_logits: Vec<f64>,
    /// `None` for the regular baseline.
    pub augmented_logits: Option<Vec<f64>>,
    pub kept: Vec<TokenId>,
    pub probabilities: Vec<f64>,
    pub token: TokenId,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    original_logits: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    augmented_logits: Option<Vec<f64>>,
    kept: &'a [TokenId],
    probabilities: &'a [f64],
    token: TokenId,
}

/// Round to 12 significant digits.
fn round12(x: f64) -> f64 {
    format!("{x:.11e}").parse().expect("formatted float parses")
}

impl StepTrace {
    pub fn to_json_line(&self, step: usize) -> Result<String> {
        let line = TraceLine {
            step,
            original_logits: self.original_logits.iter().copied().map(round12).collect(),
            augmented_logits: self.augmented_logits.as_ref().map(|v| v.iter().copied().map(round12).collect()),
            kept: &self.kept,
            probabilities: &self.probabilities,
            token: self.token,
        };
        Ok(serde_json::to_string(&line)?)
    }
}

pub fn traces_to_jsonl(traces: &[StepTrace]) -> Result<String> {
    let mut out = String::new();
    for (i, t) in traces.iter().enumerate() {
        out.push_str(&t.to_json_line(i)?);
        out.push('\n');
    }
    Ok(out)
}

/// Distribution for one step; the regular baseline when `aug` is `None`.
fn step_distribution(orig: &Vector, aug: Option<&Vector>, cfg: &DecoderConfig) -> Result<(Vec<TokenId>, Vec<f64>)> {
    match aug {
        Some(aug) => agla_step(orig.as_slice(), aug.as_slice(), cfg.alpha, cfg.beta),
        None => Ok(((0..orig.len()).collect(), regular_distribution(orig.as_slice())?)),
    }
}

fn step_logits<S: LogitSource>(
    source: &S,
    view: &S::View,
    aug_view: Option<&S::View>,
    prompt: &[TokenId],
    prefix: &[TokenId],
) -> Result<(Vector, Option<Vector>)> {
    let orig = source.next_logits(view, prompt, prefix)?;
    let aug = aug_view.map(|v| source.next_logits(v, prompt, prefix)).transpose()?;
    let v = source.vocab_size();
    if orig.len() != v || aug.as_ref().is_some_and(|a| a.len() != v) {
        return contract(format!("logit source returned the wrong vocabulary size (expected {v})"));
    }
    Ok((orig, aug))
}

/// The two answer tokens of a yes/no question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerTokens {
    pub yes: TokenId,
    pub no: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresenceDecision {
    pub answer: Answer,
    pub trace: StepTrace,
}

/// One-step yes/no decision: "yes" iff `p(yes) > p(no)`, ties answer "no".
pub fn answer_presence<S: LogitSource>(
    source: &S,
    view: &S::View,
    aug_view: Option<&S::View>,
    prompt: &[TokenId],
    cfg: &DecoderConfig,
    tokens: AnswerTokens,
) -> Result<PresenceDecision> {
    cfg.validate()?;
    let (orig, aug) = step_logits(source, view, aug_view, prompt, &[])?;
    let (kept, dist) = step_distribution(&orig, aug.as_ref(), cfg)?;
    let answer = if dist[tokens.yes] > dist[tokens.no] { Answer::Yes } else { Answer::No };
    let token = match answer {
        Answer::Yes => tokens.yes,
        Answer::No => tokens.no,
    };
    let trace = StepTrace { original_logits: orig.0, augmented_logits: aug.map(|a| a.0), kept, probabilities: dist, token };
    Ok(PresenceDecision { answer, trace })
}

/// Yes/no answer drawn with the configured sampler. Greedy uses the
/// deterministic rule of [`answer_presence`]; any sampled token other than
/// `yes` counts as "no".
pub fn sample_presence<S: LogitSource>(
    source: &S,
    view: &S::View,
    aug_view: Option<&S::View>,
    prompt: &[TokenId],
    cfg: &DecoderConfig,
    tokens: AnswerTokens,
    rng: &mut SeededRng,
) -> Result<PresenceDecision> {
    if cfg.sampler == Sampler::Greedy {
        return answer_presence(source, view, aug_view, prompt, cfg, tokens);
    }
    cfg.validate()?;
    let (orig, aug) = step_logits(source, view, aug_view, prompt, &[])?;
    let (kept, dist) = step_distribution(&orig, aug.as_ref(), cfg)?;
    let token = sample(&dist, &cfg.sampler, rng)?;
    let answer = if token == tokens.yes { Answer::Yes } else { Answer::No };
    let trace = StepTrace { original_logits: orig.0, augmented_logits: aug.map(|a| a.0), kept, probabilities: dist, token };
    Ok(PresenceDecision { answer, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Emitted tokens, including the final end-of-sequence token if reached.
    pub tokens: Vec<TokenId>,
    pub traces: Vec<StepTrace>,
}

/// Autoregressive decoding until end-of-sequence or `cfg.max_len` tokens.
/// The augmented view is fixed for the whole sequence.
pub fn generate<S: LogitSource>(
    source: &S,
    view: &S::View,
    aug_view: Option<&S::View>,
    prompt: &[TokenId],
    cfg: &DecoderConfig,
) -> Result<Generation> {
    generate_with_rng(source, view, aug_view, prompt, cfg, &mut SeededRng::new(cfg.seed))
}

/// [`generate`] drawing from a caller-supplied generator; `cfg.seed` is
/// ignored.
pub fn generate_with_rng<S: LogitSource>(
    source: &S,
    view: &S::View,
    aug_view: Option<&S::View>,
    prompt: &[TokenId],
    cfg: &DecoderConfig,
    rng: &mut SeededRng,
) -> Result<Generation> {
    cfg.validate()?;
    let eos = source.eos();
    let mut tokens = Vec::new();
    let mut traces = Vec::new();
    while tokens.len() < cfg.max_len {
        let (orig, aug) = step_logits(source, view, aug_view, prompt, &tokens)?;
        let (kept, dist) = step_distribution(&orig, aug.as_ref(), cfg)?;
        let token = sample(&dist, &cfg.sampler, rng)?;
        traces.push(StepTrace { original_logits: orig.0, augmented_logits: aug.map(|a| a.0), kept, probabilities: dist, token });
        tokens.push(token);
        if token == eos {
            break;
        }
    }
    Ok(Generation { tokens, traces })
}
