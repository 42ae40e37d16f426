//! Losses, data splitting, Adam, the training loop, evaluation and the
//! bottleneck-size ablation.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::concepts::{concept_scores, subset_concepts, ConceptScoreMatrix, ConceptSet};
use crate::data::{DriveSequence, Normalizer, SplitData, DEFAULT_DISTANCE_CAP};
use crate::error::{Error, Result};
use crate::model::{
    encode_on, forward_scores, frame_features, ModelConfig, ModelParams, Prediction, Target,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{derived_rng, rng_from_seed};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// `(angle, distance)` loss weights.
    pub task_weights: (f64, f64),
    /// Sequences whose distance target exceeds this are left out of the
    /// distance task.
    pub distance_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            grad_clip: None,
            task_weights: (1.0, 1.0),
            distance_cap: DEFAULT_DISTANCE_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        let (wa, wd) = self.task_weights;
        if wa < 0.0 || wd < 0.0 || wa + wd == 0.0 {
            return bad(format!(
                "task weights ({wa}, {wd}) must be nonnegative and not both zero"
            ));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        if self.distance_cap.is_nan() || self.distance_cap < 0.0 {
            return bad(format!(
                "distance_cap must be ≥ 0, got {}",
                self.distance_cap
            ));
        }
        Ok(())
    }

    fn weight(&self, t: Target) -> f64 {
        match t {
            Target::Angle => self.task_weights.0,
            Target::Distance => self.task_weights.1,
        }
    }
}

/// `sqrt(mean((pred − target)²))`.
pub fn rmse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "rmse over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// RMSE recorded on a tape; the gradient at zero error is zero.
pub fn rmse_on(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    let m = tape.mean(sq)?;
    tape.sqrt(m)
}

/// `w_a·L_a + w_d·L_d`.
pub fn multi_task_loss(losses: (f64, f64), weights: (f64, f64)) -> f64 {
    weights.0 * losses.0 + weights.1 * losses.1
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mae over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Seeded shuffle, then contiguous slices. Validation and test sizes are
/// floored; the remainder goes to train.
pub fn split_dataset<T: Clone>(
    items: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Parameter(format!(
            "split ratios {ratios:?} must sum to 1"
        )));
    }
    let n = items.len();
    if n < 3 {
        return Err(Error::validation(
            "sequences",
            format!("cannot split {n} sequences"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, "split"));
    let n_val = (n as f64 * b + 1e-9).floor() as usize;
    let n_test = (n as f64 * c + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// The sequence, if its distance target is within `cap`.
pub fn filter_distance(seq: &DriveSequence, cap: f64) -> Option<&DriveSequence> {
    (seq.targets.distance <= cap).then_some(seq)
}

/// Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, with optional global-norm clipping.
pub fn adam_step(
    params: Vec<&mut Tensor>,
    names: &[String],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            let name = names.get(i).map_or("?", String::as_str);
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        if g.shape() != state.m[i].shape() || g.shape() != params[i].shape() {
            return Err(Error::Shape(format!(
                "gradient {i} has shape {:?}",
                g.shape()
            )));
        }
    }
    let clip_scale = match config.grad_clip {
        Some(c) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj * clip_scale;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            let gs = gj * clip_scale;
            *vj = b2 * *vj + (1.0 - b2) * gs * gs;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / c1;
            let vhat = vj / c2;
            *pj -= config.learning_rate * mhat / (vhat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_angle_mae: Option<f64>,
    pub val_distance_mae: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the epoch with the best validation score (the last
    /// epoch when there is no validation data).
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

struct Prepared {
    features: Tensor,
    /// Standardized `(angle, distance)` targets; distance is `None` beyond
    /// the cap.
    targets: [Option<f64>; 2],
}

fn prepare(
    seqs: &[DriveSequence],
    set: &ConceptSet,
    normalizer: &Normalizer,
    cap: f64,
) -> Result<Vec<Prepared>> {
    seqs.iter()
        .map(|s| {
            let scores = concept_scores(&s.frame_embeddings, set)?;
            Ok(Prepared {
                features: frame_features(&scores, &s.sensors, normalizer)?,
                targets: [
                    Some(normalizer.normalize_target(0, s.targets.angle)),
                    filter_distance(s, cap)
                        .map(|s| normalizer.normalize_target(1, s.targets.distance)),
                ],
            })
        })
        .collect()
}

/// Trains a fresh model on `train`, selecting the epoch with the lowest
/// validation error (sum of per-task MAEs in standardized units).
pub fn fit(
    train: &[DriveSequence],
    val: &[DriveSequence],
    set: &ConceptSet,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<FitResult> {
    model_config.validate()?;
    train_config.validate()?;
    if train.is_empty() {
        return Err(Error::validation("train", "training split is empty"));
    }
    if set.len() != model_config.concepts() {
        return Err(Error::Shape(format!(
            "model expects {} concepts, set has {}",
            model_config.concepts(),
            set.len()
        )));
    }
    let targets = model_config.tasks.targets();
    let mut params = ModelParams::init(model_config, train_config.seed)?;
    params.normalizer = Normalizer::fit(train, train_config.distance_cap)?;
    let data = prepare(train, set, &params.normalizer, train_config.distance_cap)?;
    let val_scores: Vec<ConceptScoreMatrix> = val
        .iter()
        .map(|s| concept_scores(&s.frame_embeddings, set))
        .collect::<Result<_>>()?;

    let names = params.weights.names();
    let mut adam = AdamState::new(&params.weights.iter());
    let mut shuffle_rng = derived_rng(train_config.seed, "shuffle");
    let mut dropout_rng = derived_rng(train_config.seed, "dropout");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(train_config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut losses = Vec::new();
        for (step, batch) in order.chunks(train_config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = params.weights.bind(&mut tape);
            let mut outs: Vec<Vec<Var>> = vec![Vec::new(); targets.len()];
            let mut ys: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
            for &i in batch {
                let item = &data[i];
                let f = tape.constant(item.features.clone());
                let enc = encode_on(&mut tape, &bound, f, model_config, Some(&mut dropout_rng))?;
                for (h, t) in targets.iter().enumerate() {
                    if let Some(y) = item.targets[t.index()] {
                        outs[h].push(enc.heads[h]);
                        ys[h].push(y);
                    }
                }
            }
            let mut loss: Option<Var> = None;
            for (h, t) in targets.iter().enumerate() {
                if outs[h].is_empty() {
                    continue;
                }
                let pred = tape.concat_rows(&outs[h])?;
                let y = tape.constant(Tensor::matrix(ys[h].len(), 1, ys[h].clone())?);
                let l = rmse_on(&mut tape, pred, y)?;
                let l = tape.scale(l, train_config.weight(*t));
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let Some(loss) = loss else { continue };
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch}, step {step}"
                )));
            }
            losses.push(value);
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.iter().into_iter().map(|v| grads.wrt(*v)).collect();
            adam_step(
                params.weights.iter_mut(),
                &names,
                &grads,
                &mut adam,
                train_config,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            })?;
        }
        let train_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        let mut entry = EpochLog {
            epoch,
            train_loss,
            val_angle_mae: None,
            val_distance_mae: None,
        };
        if !val.is_empty() {
            let preds: Vec<Prediction> = val_scores
                .iter()
                .zip(val)
                .map(|(sc, s)| {
                    forward_scores(sc, &s.sensors, &params, model_config, None)
                        .map(|o| o.prediction)
                })
                .collect::<Result<_>>()?;
            let report = evaluate_predictions(val, &preds, train_config.distance_cap)?;
            entry.val_angle_mae = report.angle.as_ref().map(|r| r.mae);
            entry.val_distance_mae = report.distance.as_ref().map(|r| r.mae);
            let score = entry
                .val_angle_mae
                .map_or(0.0, |m| m / params.normalizer.target_std[0])
                + entry
                    .val_distance_mae
                    .map_or(0.0, |m| m / params.normalizer.target_std[1]);
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, epoch, params.clone()));
            }
        }
        log.push(entry);
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, train_config.epochs),
    };
    Ok(FitResult {
        params,
        log,
        best_epoch,
    })
}

/// Mean absolute error over one magnitude bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub mae: f64,
    pub count: usize,
    pub bins: Vec<BinReport>,
}

/// Per-sequence record kept by an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub prediction: Prediction,
    pub angle: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub angle: Option<TaskReport>,
    pub distance: Option<TaskReport>,
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    /// `[a-MAE, d-MAE]` when both heads exist.
    pub fn pair(&self) -> Option<[f64; 2]> {
        Some([self.angle.as_ref()?.mae, self.distance.as_ref()?.mae])
    }
}

fn distance_bins(pairs: &[(f64, f64)]) -> Vec<BinReport> {
    let mut edges: Vec<(f64, f64)> = (0..7)
        .map(|i| (10.0 * i as f64, 10.0 * (i + 1) as f64))
        .collect();
    if pairs.iter().any(|(t, _)| *t > 70.0) {
        edges.push((70.0, f64::INFINITY));
    }
    let last = edges.len() - 1;
    let which = |t: f64| {
        edges
            .iter()
            .position(|&(lo, hi)| t >= lo && (t < hi || (hi == 70.0 && t == 70.0)))
            .unwrap_or(last)
    };
    bin_reports(&edges, pairs.iter().map(|&(t, e)| (which(t), e)))
}

fn angle_bins(pairs: &[(f64, f64)]) -> Vec<BinReport> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| {
        pairs[a]
            .0
            .abs()
            .total_cmp(&pairs[b].0.abs())
            .then(a.cmp(&b))
    });
    let n = pairs.len();
    let mut assignment = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = rank * 10 / n;
    }
    let edges: Vec<(f64, f64)> = (0..10)
        .map(|b| {
            let mags = (0..n)
                .filter(|&i| assignment[i] == b)
                .map(|i| pairs[i].0.abs());
            let lo = mags.clone().fold(f64::INFINITY, f64::min);
            let hi = mags.fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() {
                (lo, hi)
            } else {
                (f64::NAN, f64::NAN)
            }
        })
        .collect();
    let reports = bin_reports(&edges, (0..n).map(|i| (assignment[i], pairs[i].1)));
    reports.into_iter().filter(|b| b.count > 0).collect()
}

fn bin_reports(
    edges: &[(f64, f64)],
    assigned: impl Iterator<Item = (usize, f64)>,
) -> Vec<BinReport> {
    let mut sums = vec![(0usize, 0.0); edges.len()];
    for (b, err) in assigned {
        sums[b].0 += 1;
        sums[b].1 += err;
    }
    edges
        .iter()
        .zip(sums)
        .map(|(&(lo, hi), (count, total))| BinReport {
            lo,
            hi,
            count,
            mae: (count > 0).then(|| total / count as f64),
        })
        .collect()
}

/// Scores precomputed predictions against the sequences' targets.
pub fn evaluate_predictions(
    seqs: &[DriveSequence],
    preds: &[Prediction],
    distance_cap: f64,
) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(Error::validation("test", "evaluation split is empty"));
    }
    if seqs.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} sequences, {} predictions",
            seqs.len(),
            preds.len()
        )));
    }
    let task = |target: Target| -> Result<Option<TaskReport>> {
        let pairs: Vec<(f64, f64)> = seqs
            .iter()
            .zip(preds)
            .filter(|(s, _)| target == Target::Angle || filter_distance(s, distance_cap).is_some())
            .filter_map(|(s, p)| {
                let truth = match target {
                    Target::Angle => s.targets.angle,
                    Target::Distance => s.targets.distance,
                };
                p.get(target).map(|v| (truth, (v - truth).abs()))
            })
            .collect();
        if pairs.is_empty() {
            return Ok(None);
        }
        let mae = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
        let bins = match target {
            Target::Angle => angle_bins(&pairs),
            Target::Distance => distance_bins(&pairs),
        };
        Ok(Some(TaskReport {
            mae,
            count: pairs.len(),
            bins,
        }))
    };
    Ok(EvalReport {
        angle: task(Target::Angle)?,
        distance: task(Target::Distance)?,
        samples: seqs
            .iter()
            .zip(preds)
            .map(|(s, p)| SampleResult {
                id: s.id.clone(),
                prediction: *p,
                angle: s.targets.angle,
                distance: s.targets.distance,
            })
            .collect(),
    })
}

/// Evaluation-mode predictions on `test` with per-task and per-bin MAE.
pub fn evaluate(
    test: &[DriveSequence],
    set: &ConceptSet,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<EvalReport> {
    evaluate_with_cap(test, set, params, config, DEFAULT_DISTANCE_CAP)
}

pub fn evaluate_with_cap(
    test: &[DriveSequence],
    set: &ConceptSet,
    params: &ModelParams,
    config: &ModelConfig,
    distance_cap: f64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::validation("test", "evaluation split is empty"));
    }
    let preds = test
        .iter()
        .map(|s| crate::model::forward(s, set, params, config, None).map(|o| o.prediction))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(test, &preds, distance_cap)
}

/// A bottleneck size in the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationSize {
    Count(usize),
    Full,
}

impl fmt::Display for AblationSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationSize::Count(n) => write!(f, "{n}"),
            AblationSize::Full => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for AblationSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(AblationSize::Full),
            n => n
                .parse()
                .map(AblationSize::Count)
                .map_err(|_| Error::Parameter(format!("bad bottleneck size `{n}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub size: AblationSize,
    pub seed: u64,
    pub a_mae: Option<f64>,
    pub d_mae: Option<f64>,
}

/// For every `(size, seed)`: draw a concept subset with `seed`, train with
/// `train_config` (whose own seed is shared by all rows) and evaluate on the
/// test split.
pub fn ablate_bottleneck(
    full_set: &ConceptSet,
    sizes: &[AblationSize],
    seeds: &[u64],
    data: &SplitData,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    for s in sizes {
        if let AblationSize::Count(n) = s {
            if *n == 0 || *n > full_set.len() {
                return Err(Error::Parameter(format!(
                    "bottleneck size {n} outside 1..={}",
                    full_set.len()
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(sizes.len() * seeds.len());
    for &size in sizes {
        for &seed in seeds {
            let n = match size {
                AblationSize::Count(n) => n,
                AblationSize::Full => full_set.len(),
            };
            let subset = subset_concepts(full_set, n, seed)?;
            let config = model_config.with_concepts(n);
            let fitted = fit(&data.train, &data.val, &subset, &config, train_config)?;
            let report = evaluate_with_cap(
                &data.test,
                &subset,
                &fitted.params,
                &config,
                train_config.distance_cap,
            )?;
            rows.push(AblationRow {
                size,
                seed,
                a_mae: report.angle.map(|r| r.mae),
                d_mae: report.distance.map(|r| r.mae),
            });
        }
    }
    Ok(rows)
}

/// Wall-clock latency of evaluation-mode forward passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub frames: usize,
    pub runs: usize,
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub throughput_per_second: f64,
}

pub const BENCH_WARMUP_RUNS: usize = 3;

/// Times `runs` forward passes on a random `frames`-long input after a
/// short warm-up.
pub fn bench_inference(
    params: &ModelParams,
    config: &ModelConfig,
    frames: usize,
    runs: usize,
) -> Result<BenchResult> {
    if runs == 0 {
        return Err(Error::Parameter("runs must be ≥ 1".into()));
    }
    let mut rng = rng_from_seed(0);
    let k = config.concepts();
    let scores = ConceptScoreMatrix {
        scores: Tensor::matrix(
            frames,
            k,
            (0..frames * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?,
        frame_index: (0..frames).collect(),
    };
    let sensors = Tensor::matrix(
        frames,
        3,
        (0..frames * 3)
            .map(|_| rng.random_range(0.0..30.0))
            .collect(),
    )?;
    for _ in 0..BENCH_WARMUP_RUNS {
        forward_scores(&scores, &sensors, params, config, None)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = forward_scores(&scores, &sensors, params, config, None)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    Ok(BenchResult {
        frames,
        runs,
        median_seconds: median(&mut times),
        mean_seconds: mean,
        throughput_per_second: 1.0 / mean,
    })
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub const LOSS_LOG_HEADER: &str = "epoch,split,task,metric,value";

/// CSV lines (without header) for one epoch of the training log.
pub fn loss_log_rows(entry: &EpochLog) -> Vec<String> {
    let mut rows = vec![format!(
        "{},train,all,rmse,{}",
        entry.epoch, entry.train_loss
    )];
    if let Some(v) = entry.val_angle_mae {
        rows.push(format!("{},val,angle,mae,{v}", entry.epoch));
    }
    if let Some(v) = entry.val_distance_mae {
        rows.push(format!("{},val,distance,mae,{v}", entry.epoch));
    }
    rows
}

/// Appends log rows to `path`, writing the header if the file is new.
pub fn append_loss_log(path: &Path, entries: &[EpochLog]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    if fresh {
        out.push_str(LOSS_LOG_HEADER);
        out.push('\n');
    }
    for e in entries {
        for r in loss_log_rows(e) {
            out.push_str(&r);
            out.push('\n');
        }
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub const ABLATION_HEADER: &str = "size,seed,a_mae,d_mae";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.size,
            r.seed,
            opt(r.a_mae),
            opt(r.d_mae)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec, Targets};

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse_loss(&[1.0, 2.0], &[1.0, 4.0]).unwrap() - 2f64.sqrt()).abs() < 1e-8);
        let base = rmse_loss(&[0.3, -1.0, 2.0], &[0.0, 0.0, 0.0]).unwrap();
        let scaled = rmse_loss(&[0.9, -3.0, 6.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
        assert!(rmse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn multi_task_examples() {
        assert_eq!(multi_task_loss((1.0, 1.0), (1.0, 1.0)), 2.0);
        assert_eq!(multi_task_loss((0.7, 5.0), (1.0, 0.0)), 0.7);
    }

    #[test]
    fn split_examples() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split_dataset(&items, SPLIT, 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (85, 5, 10));
        let items: Vec<usize> = (0..20).collect();
        let (a, b, c) = split_dataset(&items, SPLIT, 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (17, 1, 2));
        assert_eq!(split_dataset(&items, SPLIT, 1).unwrap(), (a, b, c));
        assert!(split_dataset(&items[..2], SPLIT, 1).is_err());
        assert!(split_dataset(&items, (0.5, 0.5, 0.5), 1).is_err());
    }

    const SPLIT: (f64, f64, f64) = crate::data::SPLIT_RATIOS;

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut w = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&w]);
        adam_step(
            vec![&mut w],
            &["w".into()],
            &[Tensor::scalar(1.0)],
            &mut st,
            &cfg,
        )
        .unwrap();
        assert!((w.data()[0] + 0.1).abs() < 1e-6);

        let mut w = Tensor::vector(vec![0.5, -2.0]);
        let mut st = AdamState::new(&[&w]);
        adam_step(
            vec![&mut w],
            &["w".into()],
            &[Tensor::zeros(&[2])],
            &mut st,
            &cfg,
        )
        .unwrap();
        assert_eq!(w.data(), &[0.5, -2.0]);
        assert_eq!(st.step, 1);

        let err = adam_step(
            vec![&mut w],
            &["layers.0.wq".into()],
            &[Tensor::vector(vec![f64::NAN, 0.0])],
            &mut st,
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layers.0.wq"));
    }

    #[test]
    fn clipping_bounds_first_step() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            grad_clip: Some(1.0),
            ..TrainConfig::default()
        };
        let mut w = Tensor::vector(vec![0.0, 0.0]);
        let mut st = AdamState::new(&[&w]);
        adam_step(
            vec![&mut w],
            &["w".into()],
            &[Tensor::vector(vec![300.0, 400.0])],
            &mut st,
            &cfg,
        )
        .unwrap();
        // Adam's first step is scale-free, so clipping only shows in the moments.
        assert!((st.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-12);
    }

    #[test]
    fn filter_distance_examples() {
        let mut s = generate_synthetic(&SyntheticSpec {
            n_sequences: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .sequences
        .remove(0);
        assert!(filter_distance(&s, 70.0).is_some());
        s.targets.distance = 80.0;
        assert!(filter_distance(&s, 70.0).is_none());
        assert!(filter_distance(&s, f64::INFINITY).is_some());
    }

    fn seqs_with_targets(targets: &[(f64, f64)]) -> Vec<DriveSequence> {
        let base = generate_synthetic(&SyntheticSpec {
            n_sequences: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .sequences
        .remove(0);
        targets
            .iter()
            .map(|&(angle, distance)| DriveSequence {
                targets: Targets { angle, distance },
                ..base.clone()
            })
            .collect()
    }

    #[test]
    fn evaluation_examples() {
        let seqs = seqs_with_targets(&[(1.0, 5.0), (-3.0, 25.0), (0.2, 69.0), (4.0, 90.0)]);
        let perfect: Vec<Prediction> = seqs
            .iter()
            .map(|s| Prediction {
                angle: Some(s.targets.angle),
                distance: Some(s.targets.distance),
            })
            .collect();
        let r = evaluate_predictions(&seqs, &perfect, 70.0).unwrap();
        assert_eq!(r.pair(), Some([0.0, 0.0]));
        // The 90 m sequence is excluded from the distance task.
        assert_eq!(r.distance.as_ref().unwrap().count, 3);
        let bin_total: usize = r
            .distance
            .as_ref()
            .unwrap()
            .bins
            .iter()
            .map(|b| b.count)
            .sum();
        assert_eq!(bin_total, 3);
        let bin_total: usize = r.angle.as_ref().unwrap().bins.iter().map(|b| b.count).sum();
        assert_eq!(bin_total, 4);

        let c = 10.0;
        let seqs = seqs_with_targets(&[(c - 1.0, c - 1.0), (c + 1.0, c + 1.0)]);
        let constant = vec![
            Prediction {
                angle: Some(c),
                distance: Some(c)
            };
            2
        ];
        let r = evaluate_predictions(&seqs, &constant, 70.0).unwrap();
        assert_eq!(r.pair(), Some([1.0, 1.0]));
        assert!(evaluate_predictions(&[], &[], 70.0).is_err());
    }

    #[test]
    fn seventy_meters_lands_in_last_regular_bin() {
        let seqs = seqs_with_targets(&[(0.0, 70.0), (0.0, 0.0)]);
        let preds = vec![
            Prediction {
                angle: Some(0.0),
                distance: Some(70.0)
            };
            2
        ];
        let r = evaluate_predictions(&seqs, &preds, 70.0).unwrap();
        let bins = &r.distance.unwrap().bins;
        assert_eq!(bins.len(), 7);
        assert_eq!(bins[6].count, 1);
        assert_eq!(bins[0].count, 1);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            task_weights: (0.0, 0.0),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ablation_size_parsing() {
        assert_eq!("full".parse::<AblationSize>().unwrap(), AblationSize::Full);
        assert_eq!(
            " 24".parse::<AblationSize>().unwrap(),
            AblationSize::Count(24)
        );
        assert!("x".parse::<AblationSize>().is_err());
    }
}
