//! Slide classifier: handcrafted tile features, mean pooling and a small
//! fully connected network with independent per-class sigmoid outputs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::{ClassLabel, N_CLASSES};
use crate::seed::rng_for;
use crate::tiling::{luminance, Tile};

pub const N_FEATURES: usize = 64;
pub const N_HIDDEN: usize = 32;
const COLOR_BINS: usize = 16;
const GRAD_BINS: usize = 16;
/// Width of one gradient-magnitude bin; the last bin is open-ended.
const GRAD_BIN_WIDTH: f64 = 6.0;
pub const DEFAULT_KEEP_PROB: f64 = 0.30;
const NET_HEADER: &str = "wsi-triage-net v1";
const SCALE_FLOOR: f64 = 1e-3;

pub type FeatureVector = [f64; N_FEATURES];
pub type SlideEmbedding = [f64; N_FEATURES];
pub type Prediction = [f64; N_CLASSES];

/// Color histograms (16 bins per channel) and a gradient-magnitude
/// histogram over the tile's tissue pixels, each group L1-normalized.
pub fn featurize(tile: &Tile) -> FeatureVector {
    let px = &tile.pixels;
    let (h, w) = (px.height(), px.width());
    let mut color = [0u32; 3 * COLOR_BINS];
    let mut grad = [0u32; GRAD_BINS];
    let luma: Vec<f64> = px.pixels().map(|p| luminance(p) * 255.0).collect();
    let mut n_tissue = 0u32;
    for r in 0..h {
        for c in 0..w {
            if !tile.tissue.get(r, c) {
                continue;
            }
            n_tissue += 1;
            let p = px.get(r, c);
            for k in 0..3 {
                color[k * COLOR_BINS + usize::from(p[k]) * COLOR_BINS / 256] += 1;
            }
            // central differences, one-sided at the border
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let gx = (luma[r * w + cr] - luma[r * w + cl]) / (cr - cl).max(1) as f64;
            let gy = (luma[rd * w + c] - luma[ru * w + c]) / (rd - ru).max(1) as f64;
            let bin = (((gx * gx + gy * gy).sqrt() / GRAD_BIN_WIDTH) as usize).min(GRAD_BINS - 1);
            grad[bin] += 1;
        }
    }
    let mut out = [0.0; N_FEATURES];
    if n_tissue == 0 {
        out.iter_mut().for_each(|v| *v = 1.0 / 16.0);
        return out;
    }
    let n = f64::from(n_tissue);
    for (o, &c) in out.iter_mut().zip(color.iter().chain(grad.iter())) {
        *o = f64::from(c) / n;
    }
    out
}

/// Componentwise mean; callers must handle empty selections upstream.
pub fn pool(vectors: &[FeatureVector]) -> SlideEmbedding {
    assert!(!vectors.is_empty(), "pool requires at least one feature vector");
    let mut out = [0.0; N_FEATURES];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Hidden-unit keep mask for one stochastic forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticMask {
    pub keep: [bool; N_HIDDEN],
    pub keep_prob: f64,
}

impl StochasticMask {
    pub fn full() -> Self {
        Self {
            keep: [true; N_HIDDEN],
            keep_prob: 1.0,
        }
    }

    pub fn draw<R: Rng>(rng: &mut R, keep_prob: f64) -> Self {
        let mut keep = [false; N_HIDDEN];
        for k in keep.iter_mut() {
            *k = rng.gen_bool(keep_prob);
        }
        Self { keep, keep_prob }
    }

    #[inline]
    fn factor(&self, j: usize) -> f64 {
        if self.keep[j] {
            1.0 / self.keep_prob
        } else {
            0.0
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Network weights plus the input standardization fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Row-major `N_HIDDEN x N_FEATURES`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `N_CLASSES x N_HIDDEN`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct Forward {
    z: [f64; N_FEATURES],
    h: [f64; N_HIDDEN],
    p: Prediction,
}

impl NetParams {
    pub fn zeros() -> Self {
        Self {
            input_mean: vec![0.0; N_FEATURES],
            input_scale: vec![1.0; N_FEATURES],
            w1: vec![0.0; N_HIDDEN * N_FEATURES],
            b1: vec![0.0; N_HIDDEN],
            w2: vec![0.0; N_CLASSES * N_HIDDEN],
            b2: vec![0.0; N_CLASSES],
        }
    }

    /// Uniform Glorot initialization.
    pub fn init(seed: u64) -> Self {
        let mut rng = rng_for(seed, "classifier/init");
        let mut p = Self::zeros();
        let a1 = (6.0 / (N_FEATURES + N_HIDDEN) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        let a2 = (6.0 / (N_HIDDEN + N_CLASSES) as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        p
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.input_mean.iter().chain(&self.input_scale).all(|x| x.is_finite())
    }

    fn trainable(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn trainable_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn forward(&self, x: &SlideEmbedding, mask: Option<&StochasticMask>) -> Forward {
        let mut z = [0.0; N_FEATURES];
        for i in 0..N_FEATURES {
            z[i] = (x[i] - self.input_mean[i]) * self.input_scale[i];
        }
        let mut h = [0.0; N_HIDDEN];
        for j in 0..N_HIDDEN {
            let row = &self.w1[j * N_FEATURES..(j + 1) * N_FEATURES];
            let a: f64 = self.b1[j] + row.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>();
            h[j] = a.tanh();
        }
        let mut p = [0.0; N_CLASSES];
        for c in 0..N_CLASSES {
            let row = &self.w2[c * N_HIDDEN..(c + 1) * N_HIDDEN];
            let mut o = self.b2[c];
            for j in 0..N_HIDDEN {
                let f = mask.map_or(1.0, |m| m.factor(j));
                o += row[j] * h[j] * f;
            }
            p[c] = sigmoid(o);
        }
        Forward { z, h, p }
    }

    /// Summed per-class binary cross-entropy averaged over `batch`, and its
    /// gradient with respect to (w1, b1, w2, b2).
    pub fn loss_and_grad(
        &self,
        batch: &[(SlideEmbedding, ClassLabel)],
        masks: &[Option<StochasticMask>],
    ) -> (f64, [Vec<f64>; 4]) {
        assert_eq!(batch.len(), masks.len());
        let mut g = [
            vec![0.0; self.w1.len()],
            vec![0.0; self.b1.len()],
            vec![0.0; self.w2.len()],
            vec![0.0; self.b2.len()],
        ];
        let mut loss = 0.0;
        for ((x, label), mask) in batch.iter().zip(masks) {
            let fw = self.forward(x, mask.as_ref());
            let factor = |j: usize| mask.as_ref().map_or(1.0, |m| m.factor(j));
            let mut d_out = [0.0; N_CLASSES];
            for c in 0..N_CLASSES {
                let y = if label.index() == c { 1.0 } else { 0.0 };
                let p = fw.p[c].clamp(1e-15, 1.0 - 1e-15);
                loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                d_out[c] = fw.p[c] - y;
            }
            let mut d_h = [0.0; N_HIDDEN];
            for c in 0..N_CLASSES {
                g[3][c] += d_out[c];
                for j in 0..N_HIDDEN {
                    let hm = fw.h[j] * factor(j);
                    g[2][c * N_HIDDEN + j] += d_out[c] * hm;
                    d_h[j] += self.w2[c * N_HIDDEN + j] * d_out[c];
                }
            }
            for j in 0..N_HIDDEN {
                let d_pre = d_h[j] * factor(j) * (1.0 - fw.h[j] * fw.h[j]);
                g[1][j] += d_pre;
                for i in 0..N_FEATURES {
                    g[0][j * N_FEATURES + i] += d_pre * fw.z[i];
                }
            }
        }
        let n = batch.len().max(1) as f64;
        for v in g.iter_mut() {
            v.iter_mut().for_each(|x| *x /= n);
        }
        (loss / n, g)
    }

    pub fn to_text(&self) -> String {
        let row = |name: &str, v: &[f64]| {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("{name} {}\n", vals.join(" "))
        };
        let mut s = format!("{NET_HEADER}\nshape {N_FEATURES} {N_HIDDEN} {N_CLASSES}\nactivation tanh\n");
        s += &row("input_mean", &self.input_mean);
        s += &row("input_scale", &self.input_scale);
        s += &row("w1", &self.w1);
        s += &row("b1", &self.b1);
        s += &row("w2", &self.w2);
        s += &row("b2", &self.b2);
        s
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == NET_HEADER => {}
            _ => return Err(Error::parse(name, 1, format!("expected header `{NET_HEADER}`"))),
        }
        let mut next = |key: &str| -> Result<(usize, Vec<String>)> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(name, 0, format!("missing `{key}`")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::parse(name, i + 1, format!("expected `{key}`")));
            }
            Ok((i + 1, parts.map(str::to_string).collect()))
        };
        let (ln, shape) = next("shape")?;
        let want = [N_FEATURES, N_HIDDEN, N_CLASSES].map(|v| v.to_string());
        if shape != want {
            return Err(Error::parse(name, ln, format!("unsupported shape {}", shape.join("x"))));
        }
        let (ln, act) = next("activation")?;
        if act != ["tanh"] {
            return Err(Error::parse(name, ln, "unsupported activation"));
        }
        let mut vector = |key: &str, len: usize| -> Result<Vec<f64>> {
            let (ln, vals) = next(key)?;
            if vals.len() != len {
                return Err(Error::parse(name, ln, format!("`{key}` needs {len} values, found {}", vals.len())));
            }
            vals.iter()
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(name, ln, e.to_string())))
                .collect()
        };
        let params = NetParams {
            input_mean: vector("input_mean", N_FEATURES)?,
            input_scale: vector("input_scale", N_FEATURES)?,
            w1: vector("w1", N_HIDDEN * N_FEATURES)?,
            b1: vector("b1", N_HIDDEN)?,
            w2: vector("w2", N_CLASSES * N_HIDDEN)?,
            b2: vector("b2", N_CLASSES)?,
        };
        if !params.is_finite() {
            return Err(Error::parse(name, 0, "non-finite parameter"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Forward pass. Without a mask all hidden units are used unscaled.
pub fn predict(embedding: &SlideEmbedding, params: &NetParams, mask: Option<&StochasticMask>) -> Prediction {
    params.forward(embedding, mask).p
}

/// Argmax with ties resolved by canonical class order.
pub fn argmax(p: &Prediction) -> ClassLabel {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    ClassLabel::from_index(best).expect("class index in range")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub keep_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.003,
            batch_size: 32,
            seed: 0,
            keep_prob: DEFAULT_KEEP_PROB,
        }
    }
}

fn validate(data: &[(SlideEmbedding, ClassLabel)], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("classifier training set is empty"));
    }
    if !(cfg.keep_prob > 0.0 && cfg.keep_prob <= 1.0) {
        return Err(Error::invalid(format!("keep probability {} outside (0, 1]", cfg.keep_prob)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    for class in ClassLabel::ALL {
        if !data.iter().any(|(_, c)| *c == class) {
            log::warn!("class {class} absent from classifier training data");
        }
    }
    Ok(())
}

fn run_adam(params: &mut NetParams, data: &[(SlideEmbedding, ClassLabel)], cfg: &TrainConfig, stream: &str) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let mut shuffle_rng = rng_for(cfg.seed, &format!("{stream}/shuffle"));
    let mut mask_rng: ChaCha8Rng = rng_for(cfg.seed, &format!("{stream}/dropout"));
    let sizes = params.trainable().map(|v| v.len());
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(SlideEmbedding, ClassLabel)> = chunk.iter().map(|&i| data[i]).collect();
            let masks: Vec<Option<StochasticMask>> = chunk
                .iter()
                .map(|_| Some(StochasticMask::draw(&mut mask_rng, cfg.keep_prob)))
                .collect();
            let (_, grads) = params.loss_and_grad(&batch, &masks);
            step += 1;
            let (c1, c2) = (1.0 - B1.powi(step), 1.0 - B2.powi(step));
            for (k, p) in params.trainable_mut().into_iter().enumerate() {
                for (i, w) in p.iter_mut().enumerate() {
                    let g = grads[k][i];
                    m[k][i] = B1 * m[k][i] + (1.0 - B1) * g;
                    v[k][i] = B2 * v[k][i] + (1.0 - B2) * g * g;
                    *w -= cfg.learning_rate * (m[k][i] / c1) / ((v[k][i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Trains from a fresh seeded initialization. Input standardization is
/// fitted on the training embeddings.
pub fn train(data: &[(SlideEmbedding, ClassLabel)], cfg: &TrainConfig) -> Result<NetParams> {
    validate(data, cfg)?;
    let mut params = NetParams::init(cfg.seed);
    let n = data.len() as f64;
    for i in 0..N_FEATURES {
        let mean = data.iter().map(|(x, _)| x[i]).sum::<f64>() / n;
        let var = data.iter().map(|(x, _)| (x[i] - mean).powi(2)).sum::<f64>() / n;
        params.input_mean[i] = mean;
        params.input_scale[i] = 1.0 / var.sqrt().max(SCALE_FLOOR);
    }
    run_adam(&mut params, data, cfg, "classifier");
    if !params.is_finite() {
        return Err(Error::invalid("classifier training diverged"));
    }
    Ok(params)
}

/// Continues training from `base` at `lr_scale` times the configured rate,
/// keeping the base input standardization.
pub fn fine_tune(base: &NetParams, data: &[(SlideEmbedding, ClassLabel)], cfg: &TrainConfig, lr_scale: f64) -> Result<NetParams> {
    validate(data, cfg)?;
    let mut params = base.clone();
    let scaled = TrainConfig {
        learning_rate: cfg.learning_rate * lr_scale,
        ..*cfg
    };
    run_adam(&mut params, data, &scaled, "classifier/finetune");
    if !params.is_finite() {
        return Err(Error::invalid("fine-tuning diverged"));
    }
    Ok(params)
}

/// Fraction of embeddings whose unmasked argmax matches the label.
pub fn accuracy(params: &NetParams, data: &[(SlideEmbedding, ClassLabel)]) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let correct = data
        .iter()
        .filter(|(x, c)| argmax(&predict(x, params, None)) == *c)
        .count();
    correct as f64 / data.len() as f64
}
