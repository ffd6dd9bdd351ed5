//! Evaluation kernels: POPE binary metrics, CHAIR, MME and the caption
//! judge prompt.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::toy::{Answer, Lexicon};
use crate::TokenId;

/// Confusion counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: Answer, label: Answer) {
        match (predicted, label) {
            (Answer::Yes, Answer::Yes) => self.tp += 1,
            (Answer::Yes, Answer::No) => self.fp += 1,
            (Answer::No, Answer::Yes) => self.fn_ += 1,
            (Answer::No, Answer::No) => self.tn += 1,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (Answer, Answer)>>(pairs: I) -> Self {
        let mut c = Self::default();
        pairs.into_iter().for_each(|(p, l)| c.record(p, l));
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn pope_scores(c: &ConfusionCounts) -> Result<PopeScores> {
    if c.total() == 0 {
        return contract("no predictions to score");
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(PopeScores {
        accuracy: (tp + tn) / (tp + fp + fn_ + tn),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    })
}

/// One caption: its object mentions (repeats allowed) and ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairInput {
    pub mentions: Vec<String>,
    pub ground_truth: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub c_s: f64,
    pub c_i: f64,
    pub recall: f64,
}

/// C_S counts captions with any hallucinated mention; C_I counts
/// hallucinated mentions over all mentions; recall counts distinct correctly
/// mentioned objects over ground-truth objects, per caption.
pub fn chair_scores(inputs: &[ChairInput]) -> Result<ChairScores> {
    if inputs.is_empty() {
        return contract("no captions to score");
    }
    let mut hallucinated_captions = 0usize;
    let mut hallucinated_mentions = 0usize;
    let mut mentions = 0usize;
    let mut accurate = 0usize;
    let mut gt_total = 0usize;
    for caption in inputs {
        let bad = caption.mentions.iter().filter(|m| !caption.ground_truth.contains(*m)).count();
        hallucinated_mentions += bad;
        hallucinated_captions += usize::from(bad > 0);
        mentions += caption.mentions.len();
        let mentioned: BTreeSet<&String> = caption.mentions.iter().collect();
        accurate += caption.ground_truth.iter().filter(|g| mentioned.contains(g)).count();
        gt_total += caption.ground_truth.len();
    }
    Ok(ChairScores {
        c_s: hallucinated_captions as f64 / inputs.len() as f64,
        c_i: ratio(hallucinated_mentions as f64, mentions as f64),
        recall: ratio(accurate as f64, gt_total as f64),
    })
}

/// Object words in order of appearance, repeats kept.
pub fn extract_mentions(caption: &[TokenId], lexicon: &Lexicon) -> Vec<String> {
    caption.iter().filter(|&&t| t < lexicon.len() && lexicon.is_object(t)).map(|&t| lexicon.word(t).to_string()).collect()
}

pub fn extract_objects(caption: &[TokenId], lexicon: &Lexicon) -> BTreeSet<String> {
    extract_mentions(caption, lexicon).into_iter().collect()
}

/// Outcomes of the two questions asked about one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmeInput {
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmeScore {
    pub accuracy_pct: f64,
    pub accuracy_plus_pct: f64,
    pub total: f64,
}

pub fn mme_score(inputs: &[MmeInput]) -> Result<MmeScore> {
    if inputs.is_empty() {
        return contract("no images to score");
    }
    if let Some(i) = inputs.iter().position(|m| m.correct.len() != 2) {
        return input(format!("image {i} has {} outcomes, expected 2", inputs[i].correct.len()));
    }
    let right = inputs.iter().flat_map(|m| &m.correct).filter(|c| **c).count();
    let both = inputs.iter().filter(|m| m.correct.iter().all(|c| *c)).count();
    let accuracy_pct = 100.0 * right as f64 / (2 * inputs.len()) as f64;
    let accuracy_plus_pct = 100.0 * both as f64 / inputs.len() as f64;
    Ok(MmeScore { accuracy_pct, accuracy_plus_pct, total: accuracy_pct + accuracy_plus_pct })
}

const JUDGE_TEMPLATE: &str = "\
Description:
AI that scores image description accuracy and detailedness.

Instructions:
You are an AI designed to evaluate and score the performance of two AI assistants in describing a given image. Your primary focus is on the accuracy and detailedness of their descriptions. You will assess the accuracy by checking for hallucinations - any part of the description that is inconsistent with the image content. For detailedness, you will consider how rich the response is in necessary details, excluding any hallucinated parts. You will provide scores on a scale from 1 to 10 for each assistant separately, based on these criteria. After scoring, you will offer an explanation for your evaluation, ensuring it is free from bias and not influenced by the order of presentation of the responses.

Input format:
[Assistant 1]
{Response 1}
[End of Assistant 1]

[Assistant 2]
{Response 2}
[End of Assistant 2]

Output format:
Accuracy:
Scores of the two answers:
Reason:

Detailedness:
Scores of the two answers:
Reason:
";

/// Judge prompt comparing two captions. The placeholders are filled in a
/// single pass, so braces inside a response are left alone.
pub fn render_judge_prompt(response1: &str, response2: &str) -> Result<String> {
    if response1.trim().is_empty() || response2.trim().is_empty() {
        return input("judge responses must be non-empty");
    }
    let (head, rest) = JUDGE_TEMPLATE.split_once("{Response 1}").expect("template slot 1");
    let (mid, tail) = rest.split_once("{Response 2}").expect("template slot 2");
    Ok(format!("{head}{response1}{mid}{response2}{tail}"))
}

/// Named scores rendered as a flat JSON object or an aligned table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreReport {
    entries: Vec<(String, f64)>,
}

impl ScoreReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ScoreReport) {
        for (n, v) in &other.entries {
            self.push(format!("{prefix}{n}"), *v);
        }
    }

    pub fn from_pope(s: &PopeScores) -> Self {
        let mut r = Self::new();
        r.push("accuracy", s.accuracy);
        r.push("precision", s.precision);
        r.push("recall", s.recall);
        r.push("f1", s.f1);
        r
    }

    pub fn from_chair(s: &ChairScores) -> Self {
        let mut r = Self::new();
        r.push("c_s", s.c_s);
        r.push("c_i", s.c_i);
        r.push("recall", s.recall);
        r
    }

    pub fn from_mme(s: &MmeScore) -> Self {
        let mut r = Self::new();
        r.push("accuracy_pct", s.accuracy_pct);
        r.push("accuracy_plus_pct", s.accuracy_plus_pct);
        r.push("total", s.total);
        r
    }

    /// Keys in insertion order.
    pub fn to_json(&self) -> String {
        let body: Vec<String> =
            self.entries.iter().map(|(n, v)| format!("{}:{}", serde_json::Value::String(n.clone()), serde_json::Value::from(*v))).collect();
        format!("{{{}}}", body.join(","))
    }

    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (n, v) in &self.entries {
            let _ = writeln!(out, "{n:<width$}  {v:>10.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn caption(mentions: &[&str], gt: &[&str]) -> ChairInput {
        ChairInput { mentions: mentions.iter().map(|w| w.to_string()).collect(), ground_truth: set(gt) }
    }

    #[test]
    fn pope_examples() {
        let s = pope_scores(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 2 }).unwrap();
        for v in [s.accuracy, s.precision, s.recall, s.f1] {
            assert!((v - 2.0 / 3.0).abs() <= 1e-12);
        }
        let s = pope_scores(&ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 4 }).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall, s.f1), (1.0, 1.0, 1.0, 1.0));
        let s = pope_scores(&ConfusionCounts { tp: 5, fp: 5, fn_: 0, tn: 0 }).unwrap();
        assert_eq!((s.recall, s.precision), (1.0, 0.5));
        let s = pope_scores(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 3 }).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(pope_scores(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn chair_examples() {
        let s = chair_scores(&[caption(&["dog", "frisbee"], &["dog"]), caption(&["cat"], &["cat", "sofa"])]).unwrap();
        assert_eq!(s.c_s, 0.5);
        assert!((s.c_i - 1.0 / 3.0).abs() <= 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() <= 1e-12);

        let s = chair_scores(&[caption(&["dog"], &["dog", "cat"])]).unwrap();
        assert_eq!((s.c_s, s.c_i), (0.0, 0.0));

        let s = chair_scores(&[caption(&[], &["dog", "cat"]), caption(&["dog"], &["dog"])]).unwrap();
        assert_eq!((s.c_s, s.c_i), (0.0, 0.0));
        assert!((s.recall - 1.0 / 3.0).abs() <= 1e-12);

        let s = chair_scores(&[caption(&["cup", "cup"], &["dog"])]).unwrap();
        assert_eq!((s.c_s, s.c_i, s.recall), (1.0, 1.0, 0.0));
        assert!(chair_scores(&[]).is_err());
    }

    #[test]
    fn mme_examples() {
        let s = mme_score(&[MmeInput { correct: vec![true, true] }, MmeInput { correct: vec![true, false] }]).unwrap();
        assert_eq!((s.accuracy_pct, s.accuracy_plus_pct, s.total), (75.0, 50.0, 125.0));
        assert_eq!(mme_score(&[MmeInput { correct: vec![true, true] }]).unwrap().total, 200.0);
        assert_eq!(mme_score(&[MmeInput { correct: vec![false, false] }]).unwrap().total, 0.0);
        assert!(matches!(mme_score(&[MmeInput { correct: vec![true] }]), Err(crate::AglaError::Input(_))));
    }

    #[test]
    fn judge_prompt() {
        let p = render_judge_prompt("a dog {x}", "a cat").unwrap();
        assert!(p.lines().any(|l| l == "[Assistant 1]"));
        assert!(p.lines().any(|l| l == "[End of Assistant 2]"));
        assert!(p.lines().any(|l| l.starts_with("You are an AI designed to evaluate")));
        assert!(p.contains("[Assistant 1]\na dog {x}\n[End of Assistant 1]"));
        assert!(p.contains("[Assistant 2]\na cat\n[End of Assistant 2]"));
        assert_eq!(p, render_judge_prompt("a dog {x}", "a cat").unwrap());
        assert!(render_judge_prompt("", "x").is_err());
    }

    #[test]
    fn report_formats() {
        let mut r = ScoreReport::new();
        r.push("f1", 0.5);
        r.push("accuracy", 1.0);
        assert_eq!(r.to_json(), "{\"f1\":0.5,\"accuracy\":1.0}");
        assert_eq!(r.to_table(), "f1          0.500000\naccuracy    1.000000\n");
    }
}
