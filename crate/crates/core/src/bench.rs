//! End-to-end runs on the synthetic testbed: match, mask, decode, score.
//!
//! Every record is decoded twice from the same seed. The regular arm sees
//! only the original view. The assembled arm also sees the view masked
//! according to the image-prompt matching scores.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{generate_with_rng, sample_presence, AnswerTokens, DecoderConfig};
use crate::error::{contract, Result};
use crate::masking::{adaptive_mask, AugmentedView, GridImage, Strategy};
use crate::matching::{CorrelationMap, SimilarityResult};
use crate::metrics::{chair_scores, extract_mentions, pope_scores, ChairInput, ConfusionCounts, ScoreReport};
use crate::numeric::{Matrix, SeededRng};
use crate::toy::{generate_benchmark, record_seed, records_to_jsonl, Answer, BenchmarkKind, Record, Testbed, ToyLvlm};
use crate::TokenId;

/// Reference scores of the pinned adversarial benchmark.
pub const PINNED_BENCH_JSON: &str = include_str!("../config/pinned_bench.json");

/// Stream of the per-record generator reserved for decoding.
const DECODE_STREAM: u64 = 2;

/// Matching output and the masked view for one image-prompt pair.
#[derive(Debug, Clone)]
pub struct Augmentation {
    pub similarity: SimilarityResult,
    pub correlation: CorrelationMap,
    pub view: AugmentedView,
    /// Patch features of the masked view.
    pub features: Matrix,
}

/// Runs matching on `(image, prompt)` and masks with the adaptive ratio.
pub fn augment(testbed: &Testbed, image: &GridImage, prompt: &[TokenId], strategy: Strategy, seed: u64) -> Result<Augmentation> {
    let y = testbed.featurize(image)?;
    let (similarity, correlation) = testbed.matching_model().match_prompt(prompt, &y)?;
    let view = adaptive_mask(image, &correlation, similarity.sim, strategy, seed, &y)?;
    let features = match (view.image(), view.features()) {
        (Some(img), _) => testbed.featurize(img)?,
        (None, Some(f)) => f.clone(),
        (None, None) => unreachable!("augmented view holds an image or features"),
    };
    Ok(Augmentation { similarity, correlation, view, features })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub kind: BenchmarkKind,
    pub n: usize,
    pub seed: u64,
    pub gamma: f64,
    pub strategy: Strategy,
    pub decoder: DecoderConfig,
}

impl BenchConfig {
    pub fn new(kind: BenchmarkKind, n: usize, seed: u64) -> Self {
        Self { kind, n, seed, gamma: 0.8, strategy: Strategy::Pixel, decoder: DecoderConfig::default() }
    }
}

/// Both arms' outputs for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerLine {
    pub id: usize,
    pub prompt: String,
    pub sim: f64,
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regular: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agla: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regular_caption: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agla_caption: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub config: BenchConfig,
    pub records: Vec<Record>,
    pub answers: Vec<AnswerLine>,
    pub regular: ScoreReport,
    pub agla: ScoreReport,
}

impl BenchOutcome {
    /// Flat report with `regular_` and `agla_` prefixes.
    pub fn report(&self) -> ScoreReport {
        let mut r = ScoreReport::new();
        r.push("n", self.records.len() as f64);
        r.extend_prefixed("regular_", &self.regular);
        r.extend_prefixed("agla_", &self.agla);
        r
    }

    pub fn answers_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for a in &self.answers {
            out.push_str(&serde_json::to_string(a)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `config.json`, `records.jsonl`, `answers.jsonl`, `scores.json`
    /// and `scores.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)? + "\n")?;
        fs::write(dir.join("records.jsonl"), records_to_jsonl(&self.records)?)?;
        fs::write(dir.join("answers.jsonl"), self.answers_jsonl()?)?;
        let report = self.report();
        fs::write(dir.join("scores.json"), report.to_json() + "\n")?;
        fs::write(dir.join("scores.txt"), report.to_table())?;
        Ok(())
    }
}

fn run_record(testbed: &Testbed, lvlm: &ToyLvlm, cfg: &BenchConfig, record: &Record) -> Result<AnswerLine> {
    let lx = testbed.lexicon();
    let seed = record_seed(cfg.seed, record.id);
    let (image, _) = testbed.render_scene(record.scene()?)?;
    let y = testbed.featurize(&image)?;
    let prompt = lx.tokenize(&record.prompt)?;
    let aug = augment(testbed, &image, &prompt, cfg.strategy, seed)?;
    let mut line = AnswerLine {
        id: record.id,
        prompt: record.prompt.clone(),
        sim: aug.similarity.sim,
        ratio: aug.view.spec.ratio,
        label: record.label,
        regular: None,
        agla: None,
        objects: record.objects.clone(),
        regular_caption: None,
        agla_caption: None,
    };
    let dec = DecoderConfig { seed, ..cfg.decoder };
    if cfg.kind.is_pope() {
        let tokens = AnswerTokens { yes: lx.yes(), no: lx.no() };
        let mut rng = SeededRng::with_stream(seed, DECODE_STREAM);
        line.regular = Some(sample_presence(lvlm, &y, None, &prompt, &dec, tokens, &mut rng)?.answer);
        let mut rng = SeededRng::with_stream(seed, DECODE_STREAM);
        line.agla = Some(sample_presence(lvlm, &y, Some(&aug.features), &prompt, &dec, tokens, &mut rng)?.answer);
    } else {
        let mut rng = SeededRng::with_stream(seed, DECODE_STREAM);
        let regular = generate_with_rng(lvlm, &y, None, &prompt, &dec, &mut rng)?;
        let mut rng = SeededRng::with_stream(seed, DECODE_STREAM);
        let agla = generate_with_rng(lvlm, &y, Some(&aug.features), &prompt, &dec, &mut rng)?;
        line.regular_caption = Some(lx.detokenize(&regular.tokens));
        line.agla_caption = Some(lx.detokenize(&agla.tokens));
    }
    Ok(line)
}

fn pope_report(lines: &[AnswerLine], arm: fn(&AnswerLine) -> Option<Answer>) -> Result<ScoreReport> {
    let counts = ConfusionCounts::from_pairs(lines.iter().filter_map(|l| Some((arm(l)?, l.label?))));
    Ok(ScoreReport::from_pope(&pope_scores(&counts)?))
}

fn chair_report(testbed: &Testbed, lines: &[AnswerLine], arm: fn(&AnswerLine) -> Option<&Vec<String>>) -> Result<ScoreReport> {
    let lx = testbed.lexicon();
    let inputs = lines
        .iter()
        .map(|l| {
            let words = arm(l).map(Vec::as_slice).unwrap_or_default();
            let tokens: Vec<TokenId> = words.iter().filter_map(|w| lx.id(w)).collect();
            ChairInput {
                mentions: extract_mentions(&tokens, lx),
                ground_truth: l.objects.iter().flatten().cloned().collect::<BTreeSet<_>>(),
            }
        })
        .collect::<Vec<_>>();
    Ok(ScoreReport::from_chair(&chair_scores(&inputs)?))
}

/// Generates the benchmark and runs both arms over it.
pub fn run_bench(testbed: &Testbed, cfg: &BenchConfig) -> Result<BenchOutcome> {
    cfg.decoder.validate()?;
    if !(0.0..=1.0).contains(&cfg.gamma) {
        return contract(format!("gamma {} outside [0, 1]", cfg.gamma));
    }
    let records = generate_benchmark(testbed, cfg.kind, cfg.n, cfg.seed)?;
    run_records(testbed, cfg, records)
}

/// Runs both arms over existing records.
pub fn run_records(testbed: &Testbed, cfg: &BenchConfig, records: Vec<Record>) -> Result<BenchOutcome> {
    let lvlm = testbed.lvlm_with_gamma(cfg.gamma)?;
    let answers = records.par_iter().map(|r| run_record(testbed, &lvlm, cfg, r)).collect::<Result<Vec<_>>>()?;
    let (regular, agla) = if cfg.kind.is_pope() {
        (pope_report(&answers, |l| l.regular)?, pope_report(&answers, |l| l.agla)?)
    } else {
        (chair_report(testbed, &answers, |l| l.regular_caption.as_ref())?, chair_report(testbed, &answers, |l| l.agla_caption.as_ref())?)
    };
    Ok(BenchOutcome { config: *cfg, records, answers, regular, agla })
}
