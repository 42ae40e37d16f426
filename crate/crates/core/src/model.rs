//! Sliding-window transformer encoder over fused concept/sensor frames with a
//! global `[CLS]` token and per-task MLP regression heads.

use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::concepts::{concept_scores, ConceptScoreMatrix, ConceptSet};
use crate::data::{DriveSequence, Normalizer, SENSOR_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, AttentionWeights, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::{derived_rng, Rng};

const CGCK_MAGIC: &[u8; 4] = b"CGCK";
const CGCK_VERSION: u32 = 1;

/// Which regression heads a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Angle,
    Distance,
    Both,
}

/// A single regression target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Angle,
    Distance,
}

impl Target {
    /// Column of this target in angle/distance pairs.
    pub fn index(self) -> usize {
        match self {
            Target::Angle => 0,
            Target::Distance => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Angle => "angle",
            Target::Distance => "distance",
        }
    }
}

impl Task {
    /// Targets in head order.
    pub fn targets(self) -> &'static [Target] {
        match self {
            Task::Angle => &[Target::Angle],
            Task::Distance => &[Target::Distance],
            Task::Both => &[Target::Angle, Target::Distance],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Angle => "angle",
            Task::Distance => "distance",
            Task::Both => "both",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angle" => Ok(Task::Angle),
            "distance" => Ok(Task::Distance),
            "both" => Ok(Task::Both),
            other => Err(Error::Parameter(format!("unknown task `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Concept count plus the three sensor channels.
    pub input_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Attention window in frames. Frames see `window / 2` neighbours on each
    /// side; a window of at least the sequence length is dense attention.
    pub window: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub tasks: Task,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 24 + SENSOR_CHANNELS,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            window: 8,
            ffn_dim: 128,
            dropout_rate: 0.1,
            tasks: Task::Both,
            max_seq_len: 512,
        }
    }
}

impl ModelConfig {
    /// Copy sized for a bottleneck of `k` concepts.
    pub fn with_concepts(&self, k: usize) -> Self {
        ModelConfig {
            input_dim: k + SENSOR_CHANNELS,
            ..self.clone()
        }
    }

    pub fn concepts(&self) -> usize {
        self.input_dim - SENSOR_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.input_dim <= SENSOR_CHANNELS {
            return bad(format!(
                "input_dim {} leaves no concept channels",
                self.input_dim
            ));
        }
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads)
        {
            return bad(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_seq_len < 2 {
            return bad("n_layers, ffn_dim must be positive and max_seq_len ≥ 2".into());
        }
        if self.window == 0 || (!self.window.is_multiple_of(2) && self.window != self.max_seq_len) {
            return bad(format!(
                "window {} must be even or equal to max_seq_len",
                self.window
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Attention pattern for a sequence of `frames` frames.
    pub fn mask_for(&self, frames: usize) -> AttentionMask {
        if self.window >= frames {
            AttentionMask::Dense
        } else {
            AttentionMask::SlidingGlobalFirst {
                radius: self.window / 2,
            }
        }
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let (i, d, f) = (self.input_dim, self.model_dim, self.ffn_dim);
        let embed = i * d + d + d + (self.max_seq_len + 1) * d;
        let layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
        let head = 2 * d + (d * f + f) + (f + 1);
        embed + self.n_layers * layer + self.tasks.targets().len() * head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub ln_gain: T,
    pub ln_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// All learnable weights, generic over storage so the same layout holds
/// tensors or tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<T> {
    pub input_w: T,
    pub input_b: T,
    pub cls: T,
    pub pos: T,
    pub layers: Vec<LayerParams<T>>,
    pub heads: Vec<HeadParams<T>>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, ffn_w1, ffn_b1,
            ffn_w2, ffn_b2
        )
    };
}

impl<T> ParamTree<T> {
    /// References in declaration order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = vec![&self.input_w, &self.input_b, &self.cls, &self.pos];
        for l in &self.layers {
            macro_rules! push { ($($f:ident),*) => { $(out.push(&l.$f);)* } }
            layer_fields!(push);
        }
        for h in &self.heads {
            out.extend([&h.ln_gain, &h.ln_bias, &h.w1, &h.b1, &h.w2, &h.b2]);
        }
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.input_w,
            &mut self.input_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for l in &mut self.layers {
            macro_rules! push { ($($f:ident),*) => { $(out.push(&mut l.$f);)* } }
            layer_fields!(push);
        }
        for h in &mut self.heads {
            out.extend([
                &mut h.ln_gain,
                &mut h.ln_bias,
                &mut h.w1,
                &mut h.b1,
                &mut h.w2,
                &mut h.b2,
            ]);
        }
        out
    }

    /// Names matching [`ParamTree::iter`].
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["input_w", "input_b", "cls", "pos"]
            .map(String::from)
            .to_vec();
        for (i, _) in self.layers.iter().enumerate() {
            macro_rules! push { ($($f:ident),*) => { $(out.push(format!("layers.{i}.{}", stringify!($f)));)* } }
            layer_fields!(push);
        }
        for (i, _) in self.heads.iter().enumerate() {
            for f in ["ln_gain", "ln_bias", "w1", "b1", "w2", "b2"] {
                out.push(format!("heads.{i}.{f}"));
            }
        }
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamTree<U> {
        ParamTree {
            input_w: f(&self.input_w),
            input_b: f(&self.input_b),
            cls: f(&self.cls),
            pos: f(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    macro_rules! build { ($($fl:ident),*) => { LayerParams { $($fl: f(&l.$fl)),* } } }
                    layer_fields!(build)
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    ln_gain: f(&h.ln_gain),
                    ln_bias: f(&h.ln_bias),
                    w1: f(&h.w1),
                    b1: f(&h.b1),
                    w2: f(&h.w2),
                    b2: f(&h.b2),
                })
                .collect(),
        }
    }
}

impl ParamTree<Tensor> {
    pub fn parameter_count(&self) -> usize {
        self.iter().iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamTree<Var> {
        self.map(|t| tape.param(t.clone()))
    }

    /// Puts every tensor on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamTree<Var> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Learnable weights plus the input/target standardization they were
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub weights: ParamTree<Tensor>,
    pub normalizer: Normalizer,
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape product")
}

fn linear(rng: &mut Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let b = 1.0 / (fan_in as f64).sqrt();
    (
        uniform(rng, &[fan_in, fan_out], b),
        uniform(rng, &[fan_out], b),
    )
}

impl ModelParams {
    /// Seeded initialization: linear layers uniform in ±1/√fan_in, layer
    /// norms at identity, embeddings uniform in ±0.1, head output weights zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(seed, "model-init");
        let (d, f) = (config.model_dim, config.ffn_dim);
        let (input_w, input_b) = linear(&mut rng, config.input_dim, d);
        let cls = uniform(&mut rng, &[1, d], 0.1);
        let pos = uniform(&mut rng, &[config.max_seq_len + 1, d], 0.1);
        let layers = (0..config.n_layers)
            .map(|_| {
                let (wq, bq) = linear(&mut rng, d, d);
                let (wk, bk) = linear(&mut rng, d, d);
                let (wv, bv) = linear(&mut rng, d, d);
                let (wo, bo) = linear(&mut rng, d, d);
                let (ffn_w1, ffn_b1) = linear(&mut rng, d, f);
                let (ffn_w2, ffn_b2) = linear(&mut rng, f, d);
                LayerParams {
                    ln1_gain: Tensor::ones(&[d]),
                    ln1_bias: Tensor::zeros(&[d]),
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln2_gain: Tensor::ones(&[d]),
                    ln2_bias: Tensor::zeros(&[d]),
                    ffn_w1,
                    ffn_b1,
                    ffn_w2,
                    ffn_b2,
                }
            })
            .collect();
        let heads = config
            .tasks
            .targets()
            .iter()
            .map(|_| {
                let (w1, b1) = linear(&mut rng, d, f);
                let (_, b2) = linear(&mut rng, f, 1);
                let w2 = Tensor::zeros(&[f, 1]);
                HeadParams {
                    ln_gain: Tensor::ones(&[d]),
                    ln_bias: Tensor::zeros(&[d]),
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        Ok(ModelParams {
            weights: ParamTree {
                input_w,
                input_b,
                cls,
                pos,
                layers,
                heads,
            },
            normalizer: Normalizer::default(),
        })
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::init(config, 0)?;
        let names = expected.weights.names();
        if self.weights.iter().len() != names.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                self.weights.iter().len()
            )));
        }
        for ((a, b), name) in self
            .weights
            .iter()
            .into_iter()
            .zip(expected.weights.iter())
            .zip(names)
        {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Attention probabilities recorded during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// `layers[l][h]`: sparse rows for every query position (CLS is row 0).
    pub layers: Vec<Vec<AttentionWeights>>,
    pub frames: usize,
}

impl AttentionTrace {
    /// CLS attention over all `T+1` positions (self weight first).
    pub fn cls_row(&self, layer: usize, head: usize) -> Vec<f64> {
        self.layers[layer][head].dense_row(0, self.frames + 1)
    }

    /// Final layer, head-averaged CLS→frame weights (length `T`, CLS self
    /// weight excluded).
    pub fn aggregate(&self) -> Result<Vec<f64>> {
        let last = self
            .layers
            .last()
            .filter(|heads| !heads.is_empty())
            .ok_or_else(|| Error::Contract("attention trace is empty".into()))?;
        let mut out = vec![0.0; self.frames];
        for head in last {
            for &(j, p) in &head.rows[0] {
                if j > 0 {
                    out[j - 1] += p / last.len() as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Per-sequence predictions in target units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub angle: Option<f64>,
    pub distance: Option<f64>,
}

impl Prediction {
    pub fn get(&self, t: Target) -> Option<f64> {
        match t {
            Target::Angle => self.angle,
            Target::Distance => self.distance,
        }
    }

    fn set(&mut self, t: Target, v: f64) {
        match t {
            Target::Angle => self.angle = Some(v),
            Target::Distance => self.distance = Some(v),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: Prediction,
    pub trace: AttentionTrace,
}

/// Everything the encoder produced on a tape.
pub struct Encoded {
    /// One `1×1` output per head, in standardized target units.
    pub heads: Vec<Var>,
    /// Per layer: hidden state right after the attention residual.
    pub post_attention: Vec<Var>,
    /// Per layer: output of the block.
    pub layer_outputs: Vec<Var>,
    pub trace: AttentionTrace,
}

/// Dropout context: `None` means evaluation mode.
pub type Dropout<'a> = Option<&'a mut Rng>;

/// Fused frame features `[scores | sensors of the previous frame]`, `T×(k+3)`.
/// Sensors are standardized; frame 0 gets the standardized zero vector.
pub fn frame_features(
    scores: &ConceptScoreMatrix,
    sensors: &Tensor,
    normalizer: &Normalizer,
) -> Result<Tensor> {
    let t = scores.frames();
    if sensors.rows() != t || sensors.cols() != SENSOR_CHANNELS {
        return Err(Error::Shape(format!(
            "{t} score rows but sensor matrix has shape {:?}",
            sensors.shape()
        )));
    }
    let k = scores.concepts();
    let sensors = normalizer.transform_sensors(sensors);
    let mut data = Vec::with_capacity(t * (k + SENSOR_CHANNELS));
    for f in 0..t {
        data.extend_from_slice(scores.row(f));
        if f == 0 {
            data.extend([0.0; SENSOR_CHANNELS]);
        } else {
            data.extend_from_slice(sensors.row(f - 1));
        }
    }
    Tensor::matrix(t, k + SENSOR_CHANNELS, data)
}

fn linear_on(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn dropout_on(tape: &mut Tape, x: Var, rate: f64, drop: &mut Dropout<'_>) -> Result<Var> {
    match drop {
        Some(rng) => tape.dropout(x, rate, rng, true),
        None => Ok(x),
    }
}

/// Projects features, prepends CLS and adds positional embeddings:
/// `(T+1)×model_dim`.
pub fn embed_on(
    tape: &mut Tape,
    p: &ParamTree<Var>,
    features: Var,
    config: &ModelConfig,
) -> Result<Var> {
    let f = tape.value(features);
    let t = f.rows();
    if f.cols() != config.input_dim {
        return Err(Error::Shape(format!(
            "features have width {} but model expects {}",
            f.cols(),
            config.input_dim
        )));
    }
    if t > config.max_seq_len {
        return Err(Error::Shape(format!(
            "{t} frames exceed max_seq_len {}",
            config.max_seq_len
        )));
    }
    let x = linear_on(tape, features, p.input_w, p.input_b)?;
    let h = tape.concat_rows(&[p.cls, x])?;
    let pos = tape.slice_rows(p.pos, 0, t + 1)?;
    tape.add(h, pos)
}

/// One pre-norm block: attention residual then feed-forward residual.
pub fn layer_on(
    tape: &mut Tape,
    lp: &LayerParams<Var>,
    h: Var,
    config: &ModelConfig,
    drop: &mut Dropout<'_>,
) -> Result<(Var, Var, Vec<AttentionWeights>)> {
    let frames = tape.value(h).rows() - 1;
    let n = tape.layer_norm(h, lp.ln1_gain, lp.ln1_bias, LAYER_NORM_EPS)?;
    let q = linear_on(tape, n, lp.wq, lp.bq)?;
    let k = linear_on(tape, n, lp.wk, lp.bk)?;
    let v = linear_on(tape, n, lp.wv, lp.bv)?;
    let (att, weights) = tape.attention(q, k, v, config.n_heads, config.mask_for(frames))?;
    let att = linear_on(tape, att, lp.wo, lp.bo)?;
    let att = dropout_on(tape, att, config.dropout_rate, drop)?;
    let h = tape.add(h, att)?;
    let post_attention = h;
    let n = tape.layer_norm(h, lp.ln2_gain, lp.ln2_bias, LAYER_NORM_EPS)?;
    let f = linear_on(tape, n, lp.ffn_w1, lp.ffn_b1)?;
    let f = tape.gelu(f);
    let f = linear_on(tape, f, lp.ffn_w2, lp.ffn_b2)?;
    let f = dropout_on(tape, f, config.dropout_rate, drop)?;
    Ok((tape.add(h, f)?, post_attention, weights))
}

/// LN → linear → GELU → dropout → linear, giving a `1×1` output.
pub fn head_on(
    tape: &mut Tape,
    hp: &HeadParams<Var>,
    cls_state: Var,
    rate: f64,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let n = tape.layer_norm(cls_state, hp.ln_gain, hp.ln_bias, LAYER_NORM_EPS)?;
    let x = linear_on(tape, n, hp.w1, hp.b1)?;
    let x = tape.gelu(x);
    let x = dropout_on(tape, x, rate, drop)?;
    linear_on(tape, x, hp.w2, hp.b2)
}

/// Runs the encoder and heads on fused features already on `tape`.
pub fn encode_on(
    tape: &mut Tape,
    p: &ParamTree<Var>,
    features: Var,
    config: &ModelConfig,
    mut drop: Dropout<'_>,
) -> Result<Encoded> {
    let frames = tape.value(features).rows();
    let mut h = embed_on(tape, p, features, config)?;
    let mut post_attention = Vec::with_capacity(config.n_layers);
    let mut layer_outputs = Vec::with_capacity(config.n_layers);
    let mut layers = Vec::with_capacity(config.n_layers);
    for lp in &p.layers {
        let (out, post, weights) = layer_on(tape, lp, h, config, &mut drop)?;
        h = out;
        post_attention.push(post);
        layer_outputs.push(out);
        layers.push(weights);
    }
    let cls = tape.row(h, 0)?;
    let heads = p
        .heads
        .iter()
        .map(|hp| head_on(tape, hp, cls, config.dropout_rate, &mut drop))
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        heads,
        post_attention,
        layer_outputs,
        trace: AttentionTrace { layers, frames },
    })
}

/// Embedded sequence `(T+1)×model_dim` for the given scores and raw sensors.
pub fn embed_frames(
    scores: &ConceptScoreMatrix,
    sensors: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.weights.bind_frozen(&mut tape);
    let f = tape.constant(frame_features(scores, sensors, &params.normalizer)?);
    let out = embed_on(&mut tape, &p, f, config)?;
    Ok(tape.value(out).clone())
}

/// Hidden states after each layer's attention residual, for fused features.
pub fn post_attention_states(
    features: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let p = params.weights.bind_frozen(&mut tape);
    let f = tape.constant(features.clone());
    let enc = encode_on(&mut tape, &p, f, config, None)?;
    Ok(enc
        .post_attention
        .iter()
        .map(|v| tape.value(*v).clone())
        .collect())
}

/// Prediction from precomputed concept scores. `drop` enables dropout.
pub fn forward_scores(
    scores: &ConceptScoreMatrix,
    sensors: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    drop: Dropout<'_>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let p = params.weights.bind_frozen(&mut tape);
    let f = tape.constant(frame_features(scores, sensors, &params.normalizer)?);
    let enc = encode_on(&mut tape, &p, f, config, drop)?;
    let mut prediction = Prediction::default();
    for (target, head) in config.tasks.targets().iter().zip(&enc.heads) {
        let z = tape.value(*head).item()?;
        if !z.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite {} prediction",
                target.as_str()
            )));
        }
        prediction.set(
            *target,
            params.normalizer.denormalize_target(target.index(), z),
        );
    }
    Ok(ForwardOutput {
        prediction,
        trace: enc.trace,
    })
}

/// Scores the sequence against `set` and predicts its targets.
pub fn forward(
    seq: &DriveSequence,
    set: &ConceptSet,
    params: &ModelParams,
    config: &ModelConfig,
    drop: Dropout<'_>,
) -> Result<ForwardOutput> {
    if set.len() != config.concepts() {
        return Err(Error::Shape(format!(
            "model expects {} concepts, set has {}",
            config.concepts(),
            set.len()
        )));
    }
    let scores = concept_scores(&seq.frame_embeddings, set)?;
    forward_scores(&scores, &seq.sensors, params, config, drop)
}

/// Scalar output of one MLP head on a `1×model_dim` state.
pub fn mlp_head(
    cls_state: &Tensor,
    head: &HeadParams<Tensor>,
    rate: f64,
    drop: Dropout<'_>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let hp = HeadParams {
        ln_gain: tape.constant(head.ln_gain.clone()),
        ln_bias: tape.constant(head.ln_bias.clone()),
        w1: tape.constant(head.w1.clone()),
        b1: tape.constant(head.b1.clone()),
        w2: tape.constant(head.w2.clone()),
        b2: tape.constant(head.b2.clone()),
    };
    let x = tape.constant(cls_state.clone());
    let mut drop = drop;
    let y = head_on(&mut tape, &hp, x, rate, &mut drop)?;
    tape.value(y).item()
}

fn push_tensor(w: &mut Writer, t: &Tensor) -> Result<()> {
    w.len_u32(t.shape().len())?;
    for &d in t.shape() {
        w.len_u32(d)?;
    }
    for &v in t.data() {
        w.f64(v);
    }
    Ok(())
}

fn pull_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(r.fail(format!("implausible rank {ndim}")));
    }
    let shape = (0..ndim)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.fail("shape overflows"))?;
    Tensor::new(shape, r.f64s(n)?)
}

/// Serializes config, weights, then normalizer buffers.
pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CGCK_MAGIC);
    w.u32(CGCK_VERSION);
    let json = crate::data::canonical_json(config)?;
    w.len_u32(json.len())?;
    w.bytes(json.as_bytes());
    for t in params.weights.iter() {
        push_tensor(&mut w, t)?;
    }
    let n = &params.normalizer;
    for buf in [
        &n.sensor_mean[..],
        &n.sensor_std[..],
        &n.target_mean[..],
        &n.target_std[..],
    ] {
        push_tensor(&mut w, &Tensor::vector(buf.to_vec()))?;
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader::new(bytes);
    r.magic(CGCK_MAGIC)?;
    r.version(CGCK_VERSION)?;
    let len = r.u32()? as usize;
    let at = r.offset();
    let config: ModelConfig = serde_json::from_slice(r.bytes(len)?).map_err(|e| Error::Format {
        offset: at,
        message: format!("bad config JSON: {e}"),
    })?;
    config.validate()?;
    let mut params = ModelParams::init(&config, 0)?;
    for slot in params.weights.iter_mut() {
        let at = r.offset();
        let t = pull_tensor(&mut r)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format {
                offset: at,
                message: format!("tensor shape {:?}, expected {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    let mut bufs = Vec::with_capacity(4);
    for expected in [3, 3, 2, 2] {
        let at = r.offset();
        let t = pull_tensor(&mut r)?;
        if t.len() != expected {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "normalizer buffer of length {}, expected {expected}",
                    t.len()
                ),
            });
        }
        bufs.push(t.into_data());
    }
    r.finish()?;
    params.normalizer = Normalizer {
        sensor_mean: bufs[0].clone().try_into().expect("len 3"),
        sensor_std: bufs[1].clone().try_into().expect("len 3"),
        target_mean: bufs[2].clone().try_into().expect("len 2"),
        target_std: bufs[3].clone().try_into().expect("len 2"),
    };
    Ok((config, params))
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    write_file(path, &encode_checkpoint(config, params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    decode_checkpoint(&read_file(path)?)
}
