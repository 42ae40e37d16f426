//! Explanations from concept scores and attention: windowed top concepts,
//! attention spikes, reveal timing and content-word matching against scene
//! descriptions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::concepts::{concept_scores, top_k_concepts, ConceptScoreMatrix, ConceptSet};
use crate::data::DriveSequence;
use crate::error::{Error, Result};
use crate::model::{forward_scores, AttentionTrace, ModelConfig, ModelParams};
use crate::training::median;

/// English stopwords (179 words).
pub const STOPWORDS: &[&str] = &[
    "i",
    "me",
    "my",
    "myself",
    "we",
    "our",
    "ours",
    "ourselves",
    "you",
    "you're",
    "you've",
    "you'll",
    "you'd",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "he",
    "him",
    "his",
    "himself",
    "she",
    "she's",
    "her",
    "hers",
    "herself",
    "it",
    "it's",
    "its",
    "itself",
    "they",
    "them",
    "their",
    "theirs",
    "themselves",
    "what",
    "which",
    "who",
    "whom",
    "this",
    "that",
    "that'll",
    "these",
    "those",
    "am",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "have",
    "has",
    "had",
    "having",
    "do",
    "does",
    "did",
    "doing",
    "a",
    "an",
    "the",
    "and",
    "but",
    "if",
    "or",
    "because",
    "as",
    "until",
    "while",
    "of",
    "at",
    "by",
    "for",
    "with",
    "about",
    "against",
    "between",
    "into",
    "through",
    "during",
    "before",
    "after",
    "above",
    "below",
    "to",
    "from",
    "up",
    "down",
    "in",
    "out",
    "on",
    "off",
    "over",
    "under",
    "again",
    "further",
    "then",
    "once",
    "here",
    "there",
    "when",
    "where",
    "why",
    "how",
    "all",
    "any",
    "both",
    "each",
    "few",
    "more",
    "most",
    "other",
    "some",
    "such",
    "no",
    "nor",
    "not",
    "only",
    "own",
    "same",
    "so",
    "than",
    "too",
    "very",
    "s",
    "t",
    "can",
    "will",
    "just",
    "don",
    "don't",
    "should",
    "should've",
    "now",
    "d",
    "ll",
    "m",
    "o",
    "re",
    "ve",
    "y",
    "ain",
    "aren",
    "aren't",
    "couldn",
    "couldn't",
    "didn",
    "didn't",
    "doesn",
    "doesn't",
    "hadn",
    "hadn't",
    "hasn",
    "hasn't",
    "haven",
    "haven't",
    "isn",
    "isn't",
    "ma",
    "mightn",
    "mightn't",
    "mustn",
    "mustn't",
    "needn",
    "needn't",
    "shan",
    "shan't",
    "shouldn",
    "shouldn't",
    "wasn",
    "wasn't",
    "weren",
    "weren't",
    "won",
    "won't",
    "wouldn",
    "wouldn't",
];

/// Words of the prompt template, always ignored when matching.
pub const TEMPLATE_WORDS: &[&str] = &["a", "photo", "of"];

pub fn default_stopwords() -> Vec<String> {
    STOPWORDS
        .iter()
        .chain(TEMPLATE_WORDS)
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub window_frames: usize,
    pub k_per_frame: usize,
    pub z_threshold: f64,
    pub min_gap: usize,
    pub hold_off: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            window_frames: 20,
            k_per_frame: 10,
            z_threshold: 2.5,
            min_gap: 4,
            hold_off: 4,
        }
    }
}

/// How often a concept appeared in the per-frame top-k lists of a window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptFraction {
    pub concept: usize,
    pub text: String,
    pub fraction: f64,
}

/// Frames `[start, end)` with their three most frequent concepts and the
/// fraction for every concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub start: usize,
    pub end: usize,
    pub top3: Vec<ConceptFraction>,
    #[serde(skip)]
    pub fractions: Vec<f64>,
}

/// Splits the frames into consecutive windows of `window_frames` (the last
/// one may be shorter) and counts top-k memberships within each. Equal
/// counts are ordered by summed score over the window, then by index.
pub fn aggregate_top_concepts(
    scores: &ConceptScoreMatrix,
    texts: &[String],
    window_frames: usize,
    k_per_frame: usize,
) -> Result<Vec<WindowSummary>> {
    if window_frames == 0 {
        return Err(Error::Parameter("window_frames must be ≥ 1".into()));
    }
    let k = scores.concepts();
    if texts.len() != k {
        return Err(Error::Shape(format!(
            "{} texts for {k} concepts",
            texts.len()
        )));
    }
    let k_top = k_per_frame.min(k);
    let frames = scores.frames();
    let mut out = Vec::new();
    let mut start = 0;
    while start < frames {
        let end = (start + window_frames).min(frames);
        let mut counts = vec![0usize; k];
        let mut totals = vec![0.0; k];
        for t in start..end {
            for (c, _) in top_k_concepts(scores.row(t), k_top)? {
                counts[c] += 1;
            }
            for (acc, s) in totals.iter_mut().zip(scores.row(t)) {
                *acc += s;
            }
        }
        let n = (end - start) as f64;
        let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            counts[b]
                .cmp(&counts[a])
                .then(totals[b].total_cmp(&totals[a]))
                .then(a.cmp(&b))
        });
        let top3 = order
            .into_iter()
            .take(3)
            .map(|c| ConceptFraction {
                concept: c,
                text: texts[c].clone(),
                fraction: fractions[c],
            })
            .collect();
        out.push(WindowSummary {
            start,
            end,
            top3,
            fractions,
        });
        start = end;
    }
    Ok(out)
}

/// Final-layer head-averaged attention from `[CLS]` to each frame.
pub fn attention_series(trace: &AttentionTrace) -> Result<Vec<f64>> {
    trace.aggregate()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Rise,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub frame: usize,
    pub direction: Direction,
    pub z: f64,
}

pub const MIN_SPIKE_SERIES: usize = 8;

/// Robust z-scores of the first differences. The difference `x[i+1] − x[i]`
/// is attributed to frame `i+1`. Returns `None` when the differences have no
/// spread.
pub fn difference_z_scores(series: &[f64]) -> Option<Vec<f64>> {
    let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.is_empty() {
        return None;
    }
    let med = median(&mut diffs.clone());
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d - med).abs()).collect();
    let mut scale = 1.4826 * median(&mut dev);
    if scale == 0.0 {
        scale = 1.2533 * dev.iter().sum::<f64>() / dev.len() as f64;
    }
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    Some(diffs.iter().map(|d| (d - med) / scale).collect())
}

/// Frames where attention jumps or falls abnormally fast. Events closer
/// than `min_gap` frames are merged into the one with the larger `|z|`.
pub fn detect_spikes(series: &[f64], z_threshold: f64, min_gap: usize) -> Result<Vec<SpikeEvent>> {
    if series.len() < MIN_SPIKE_SERIES {
        return Err(Error::Contract(format!(
            "spike detection needs at least {MIN_SPIKE_SERIES} frames, got {}",
            series.len()
        )));
    }
    let Some(z) = difference_z_scores(series) else {
        return Ok(Vec::new());
    };
    let mut events: Vec<SpikeEvent> = Vec::new();
    for (i, &zi) in z.iter().enumerate() {
        if zi.abs() < z_threshold {
            continue;
        }
        let ev = SpikeEvent {
            frame: i + 1,
            direction: if zi > 0.0 {
                Direction::Rise
            } else {
                Direction::Drop
            },
            z: zi,
        };
        match events.last_mut() {
            Some(last) if ev.frame - last.frame < min_gap => {
                if ev.z.abs() > last.z.abs() {
                    *last = ev;
                }
            }
            _ => events.push(ev),
        }
    }
    Ok(events)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevealFlag {
    pub frame: usize,
    pub reveal: bool,
    /// Top-3 concepts of the window holding this frame, for revealed frames.
    pub concepts: Option<Vec<ConceptFraction>>,
}

/// Reveals on each event frame and the `hold_off` frames after it.
pub fn reveal_decision(
    events: &[SpikeEvent],
    windows: &[WindowSummary],
    frames: usize,
    hold_off: usize,
) -> Vec<RevealFlag> {
    let mut reveal = vec![false; frames];
    for e in events {
        if e.frame < frames {
            reveal[e.frame..=(e.frame + hold_off).min(frames - 1)].fill(true);
        }
    }
    (0..frames)
        .map(|f| RevealFlag {
            frame: f,
            reveal: reveal[f],
            concepts: reveal[f]
                .then(|| windows.iter().find(|w| w.start <= f && f < w.end))
                .flatten()
                .map(|w| w.top3.clone()),
        })
        .collect()
}

/// Lowercased alphanumeric tokens (apostrophes kept inside words).
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn content_words<S: AsRef<str>>(text: &str, stopwords: &[S]) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|w| {
            !stopwords.iter().any(|s| s.as_ref() == w) && !TEMPLATE_WORDS.contains(&w.as_str())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub hit: bool,
    pub matched: BTreeSet<String>,
    /// The same check using only the first predicted concept.
    pub top1_hit: bool,
    pub top1_matched: BTreeSet<String>,
}

/// Content words shared by the predicted concepts and a description.
pub fn content_word_overlap<P: AsRef<str>, S: AsRef<str>>(
    predicted: &[P],
    ground_truth: &str,
    stopwords: &[S],
) -> Result<Overlap> {
    if ground_truth.trim().is_empty() {
        return Err(Error::Contract("ground-truth description is empty".into()));
    }
    let truth = content_words(ground_truth, stopwords);
    let matched_in = |preds: &[P]| -> BTreeSet<String> {
        preds
            .iter()
            .flat_map(|p| content_words(p.as_ref(), stopwords))
            .filter(|w| truth.contains(w))
            .collect()
    };
    let matched = matched_in(predicted);
    let top1_matched = matched_in(&predicted[..predicted.len().min(1)]);
    Ok(Overlap {
        hit: !matched.is_empty(),
        matched,
        top1_hit: !top1_matched.is_empty(),
        top1_matched,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMode {
    Top1,
    Top3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRate {
    /// Fraction of described scenes whose final-window top concepts hit.
    pub rate: f64,
    pub explained: usize,
    pub scored: usize,
    /// Fraction of frames (of described scenes) whose own top concepts hit.
    pub frame_rate: f64,
    pub frames_explained: usize,
    pub frames_scored: usize,
    /// Sequences without a description.
    pub skipped: usize,
}

fn mode_hit(o: &Overlap, mode: ExplainMode) -> bool {
    match mode {
        ExplainMode::Top1 => o.top1_hit,
        ExplainMode::Top3 => o.hit,
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// How often the concepts explain the scene descriptions, per scene (top
/// concepts aggregated over the final window) and per frame (each frame's
/// own top concepts).
pub fn scene_explain_rate(
    seqs: &[DriveSequence],
    set: &ConceptSet,
    mode: ExplainMode,
    options: &ExplainOptions,
) -> Result<SceneRate> {
    let stopwords = default_stopwords();
    let mut r = SceneRate {
        rate: 0.0,
        explained: 0,
        scored: 0,
        frame_rate: 0.0,
        frames_explained: 0,
        frames_scored: 0,
        skipped: 0,
    };
    for s in seqs {
        let Some(desc) = s.description.as_deref().filter(|d| !d.trim().is_empty()) else {
            r.skipped += 1;
            continue;
        };
        let scores = concept_scores(&s.frame_embeddings, set)?;
        let windows = aggregate_top_concepts(
            &scores,
            set.texts(),
            options.window_frames,
            options.k_per_frame,
        )?;
        let last = windows.last().expect("validated sequences have frames");
        let texts: Vec<&str> = last.top3.iter().map(|c| c.text.as_str()).collect();
        let o = content_word_overlap(&texts, desc, &stopwords)?;
        r.scored += 1;
        r.explained += usize::from(mode_hit(&o, mode));
        for t in 0..scores.frames() {
            let top = top_k_concepts(scores.row(t), 3.min(set.len()))?;
            let texts: Vec<&str> = top.iter().map(|&(c, _)| set.texts()[c].as_str()).collect();
            let o = content_word_overlap(&texts, desc, &stopwords)?;
            r.frames_scored += 1;
            r.frames_explained += usize::from(mode_hit(&o, mode));
        }
    }
    r.rate = ratio(r.explained, r.scored);
    r.frame_rate = ratio(r.frames_explained, r.frames_scored);
    Ok(r)
}

/// Everything shown to a user for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub sequence: String,
    /// Per frame: the top-k `(concept text, score)` pairs.
    pub frame_top_k: Vec<Vec<(String, f64)>>,
    pub windows: Vec<WindowSummary>,
    pub attention: Vec<f64>,
    pub events: Vec<SpikeEvent>,
    pub reveals: Vec<RevealFlag>,
}

impl ExplanationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Contract(format!("report serialization: {e}")))
    }

    /// `frame,attention,reveal,top1_concept`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,attention,reveal,top1_concept\n");
        for (t, a) in self.attention.iter().enumerate() {
            let top1 = self.frame_top_k[t].first().map_or("", |c| c.0.as_str());
            out.push_str(&format!(
                "{t},{a},{},{}\n",
                self.reveals[t].reveal,
                csv_field(top1)
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs the model on one sequence and assembles its explanation.
pub fn explain_sequence(
    seq: &DriveSequence,
    set: &ConceptSet,
    params: &ModelParams,
    config: &ModelConfig,
    options: &ExplainOptions,
) -> Result<ExplanationReport> {
    let scores = concept_scores(&seq.frame_embeddings, set)?;
    let out = forward_scores(&scores, &seq.sensors, params, config, None)?;
    let k_top = options.k_per_frame.min(set.len());
    let frame_top_k = (0..scores.frames())
        .map(|t| {
            Ok(top_k_concepts(scores.row(t), k_top)?
                .into_iter()
                .map(|(c, s)| (set.texts()[c].clone(), s))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let windows = aggregate_top_concepts(
        &scores,
        set.texts(),
        options.window_frames,
        options.k_per_frame,
    )?;
    let attention = attention_series(&out.trace)?;
    let events = if attention.len() >= MIN_SPIKE_SERIES {
        detect_spikes(&attention, options.z_threshold, options.min_gap)?
    } else {
        Vec::new()
    };
    let reveals = reveal_decision(&events, &windows, attention.len(), options.hold_off);
    Ok(ExplanationReport {
        sequence: seq.id.clone(),
        frame_top_k,
        windows,
        attention,
        events,
        reveals,
    })
}
