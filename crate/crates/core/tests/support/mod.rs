//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerics.
#![allow(dead_code)]

use cbdrive_core::data::Normalizer;
use cbdrive_core::model::{ModelConfig, ModelParams, ParamTree};
use cbdrive_core::rng::rng_from_seed;
use cbdrive_core::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

/// erf from its Maclaurin series for |x| ≤ 3 and a continued fraction for
/// erfc beyond.
pub fn erf_oracle(x: f64) -> f64 {
    if x.abs() <= 3.0 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        let a = x.abs();
        let mut frac = 0.0;
        for k in (1..=80).rev() {
            frac = (k as f64 / 2.0) / (a + frac);
        }
        let erfc = (-a * a).exp() / std::f64::consts::PI.sqrt() / (a + frac);
        (1.0 - erfc).copysign(x)
    }
}

pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_oracle(x / std::f64::consts::SQRT_2))
}

fn to_mat(t: &Tensor) -> Mat {
    let cols = t.cols();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vecof(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let bd = b.data();
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fan_in);
            (0..fan_out)
                .map(|o| {
                    bd[o]
                        + (0..fan_in)
                            .map(|i| row[i] * wd[i * fan_out + o])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / s * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Whether query position `i` may look at key position `j` in a sequence of
/// `n = T+1` positions (CLS at 0).
pub fn allowed(config: &ModelConfig, n: usize, i: usize, j: usize) -> bool {
    let frames = n - 1;
    if config.window >= frames || i == 0 || j == 0 {
        return true;
    }
    i.abs_diff(j) <= config.window / 2
}

/// Dense attention with an explicit mask: masked logits are skipped, the
/// rest go through a max-shifted softmax.
fn masked_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    mask: impl Fn(usize, usize) -> bool,
) -> (Mat, Vec<Mat>) {
    let n = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    let mut probs = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = vec![vec![0.0; n]; n];
        for i in 0..n {
            let logits: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    mask(i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let m = logits
                .iter()
                .flatten()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().flatten().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                if let Some(l) = logits[j] {
                    p[i][j] = (l - m).exp() / z;
                }
            }
            for c in cols.clone() {
                out[i][c] = (0..n).map(|j| p[i][j] * v[j][c]).sum();
            }
        }
        probs.push(p);
    }
    (out, probs)
}

pub struct OracleOutput {
    /// Head outputs in standardized units.
    pub heads: Vec<f64>,
    pub post_attention: Vec<Mat>,
    /// `attention[layer][head]`, dense `(T+1)×(T+1)`.
    pub attention: Vec<Vec<Mat>>,
}

/// `[scores | standardized sensors of the previous frame]`.
pub fn oracle_features(scores: &Mat, sensors: &Mat, norm: &Normalizer) -> Mat {
    scores
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut row = s.clone();
            if t == 0 {
                row.extend([0.0; 3]);
            } else {
                row.extend(
                    (0..3).map(|c| (sensors[t - 1][c] - norm.sensor_mean[c]) / norm.sensor_std[c]),
                );
            }
            row
        })
        .collect()
}

pub fn oracle_forward(features: &Mat, w: &ParamTree<Tensor>, config: &ModelConfig) -> OracleOutput {
    let x = linear(features, &w.input_w, &w.input_b);
    let mut h: Mat = std::iter::once(vecof(&w.cls)).chain(x).collect();
    let pos = to_mat(&w.pos);
    for (i, row) in h.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += pos[i][c];
        }
    }
    let n = h.len();
    let mut post_attention = Vec::new();
    let mut attention = Vec::new();
    for l in &w.layers {
        let a = layer_norm(&h, &l.ln1_gain, &l.ln1_bias);
        let q = linear(&a, &l.wq, &l.bq);
        let k = linear(&a, &l.wk, &l.bk);
        let v = linear(&a, &l.wv, &l.bv);
        let (att, probs) =
            masked_attention(&q, &k, &v, config.n_heads, |i, j| allowed(config, n, i, j));
        h = add(&h, &linear(&att, &l.wo, &l.bo));
        post_attention.push(h.clone());
        attention.push(probs);
        let f = layer_norm(&h, &l.ln2_gain, &l.ln2_bias);
        let f: Mat = linear(&f, &l.ffn_w1, &l.ffn_b1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu_oracle).collect())
            .collect();
        h = add(&h, &linear(&f, &l.ffn_w2, &l.ffn_b2));
    }
    let cls = vec![h[0].clone()];
    let heads = w
        .heads
        .iter()
        .map(|hp| {
            let a = layer_norm(&cls, &hp.ln_gain, &hp.ln_bias);
            let a: Mat = linear(&a, &hp.w1, &hp.b1)
                .into_iter()
                .map(|r| r.into_iter().map(gelu_oracle).collect())
                .collect();
            linear(&a, &hp.w2, &hp.b2)[0][0]
        })
        .collect();
    OracleOutput {
        heads,
        post_attention,
        attention,
    }
}

/// Parameters with every tensor (layer norms and zero-initialized outputs
/// included) redrawn uniformly, so no gradient path is trivially zero.
pub fn random_params(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut params = ModelParams::init(config, seed).unwrap();
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    for t in params.weights.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    params
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(lo..hi)).collect())
        .collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// Brute-force window aggregation: full sort per frame, count, then order by
/// (count desc, summed score desc, index asc).
pub fn aggregate_oracle(
    scores: &Mat,
    window: usize,
    k_per_frame: usize,
) -> Vec<(usize, usize, Vec<(usize, f64)>)> {
    let k = scores[0].len();
    let kk = k_per_frame.min(k);
    let mut out = Vec::new();
    let mut start = 0;
    while start < scores.len() {
        let end = (start + window).min(scores.len());
        let mut counts = vec![0usize; k];
        let mut totals = vec![0.0; k];
        for row in &scores[start..end] {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            for &c in &idx[..kk] {
                counts[c] += 1;
            }
            for c in 0..k {
                totals[c] += row[c];
            }
        }
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| {
            counts[b]
                .cmp(&counts[a])
                .then(totals[b].partial_cmp(&totals[a]).unwrap())
                .then(a.cmp(&b))
        });
        let n = (end - start) as f64;
        out.push((
            start,
            end,
            idx[..3.min(k)]
                .iter()
                .map(|&c| (c, counts[c] as f64 / n))
                .collect(),
        ));
        start = end;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}
