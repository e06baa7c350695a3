//! Flat parameter storage and the bag-of-embeddings network shared by the
//! policy and the reward model.
//!
//! Layout of the flat array: `embed[V×d] | w1[d×H] | b1[H] | w2[H×O] | b2[O]`,
//! row-major, where `O` is the output width (`V` for the policy, 3 for the
//! reward model).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Dims {
    pub fn policy(vocab: usize) -> Self {
        Self { vocab, embed: 16, hidden: 32, output: vocab }
    }

    pub fn reward_model(vocab: usize) -> Self {
        Self { vocab, embed: 16, hidden: 32, output: 3 }
    }

    pub fn segments(&self) -> Vec<Segment> {
        let spans = [
            ("embed", self.vocab * self.embed),
            ("w1", self.embed * self.hidden),
            ("b1", self.hidden),
            ("w2", self.hidden * self.output),
            ("b2", self.output),
        ];
        let mut offset = 0;
        spans
            .iter()
            .map(|(name, len)| {
                let s = Segment { name: name.to_string(), offset, len: *len };
                offset += len;
                s
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.segments().iter().map(|s| s.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Network parameters as one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub dims: Dims,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(dims: Dims) -> Self {
        Self { dims, values: vec![0.0; dims.total()] }
    }

    /// Uniform(-0.1, 0.1) from a seeded generator.
    pub fn init(seed: u64, dims: Dims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dims.total()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self { dims, values }
    }

    pub fn from_values(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.total() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                dims.total(),
                values.len()
            )));
        }
        let p = Self { dims, values };
        p.check_finite()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.dims.segments()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "non-finite value {} at index {i} ({})",
                self.values[i],
                self.segment_of(i)
            ))),
            None => Ok(()),
        }
    }

    /// Name of the segment holding flat index `i`.
    pub fn segment_of(&self, i: usize) -> String {
        self.segments()
            .into_iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
            .map(|s| format!("{}[{}]", s.name, i - s.offset))
            .unwrap_or_else(|| "out of range".into())
    }

    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn offsets(&self) -> [usize; 5] {
        let d = self.dims;
        let e = 0;
        let w1 = e + d.vocab * d.embed;
        let b1 = w1 + d.embed * d.hidden;
        let w2 = b1 + d.hidden;
        let b2 = w2 + d.hidden * d.output;
        [e, w1, b1, w2, b2]
    }

    pub fn embedding(&self, t: Token) -> &[f64] {
        let d = self.dims.embed;
        &self.values[t.index() * d..(t.index() + 1) * d]
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub feature: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Mean embedding of `tokens`; zero vector for an empty bag.
pub fn mean_embedding(params: &ParamVector, tokens: &[Token]) -> Vec<f64> {
    let d = params.dims.embed;
    let mut f = vec![0.0; d];
    if tokens.is_empty() {
        return f;
    }
    for t in tokens {
        for (acc, e) in f.iter_mut().zip(params.embedding(*t)) {
            *acc += e;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    f.iter_mut().for_each(|v| *v *= inv);
    f
}

/// `W2ᵀ·tanh(W1ᵀ·feature + b1) + b2`.
pub fn forward(params: &ParamVector, feature: Vec<f64>) -> Activations {
    let Dims { embed, hidden, output, .. } = params.dims;
    let [_, w1, b1, w2, b2] = params.offsets();
    let v = &params.values;
    let mut h = v[b1..b1 + hidden].to_vec();
    for (i, fi) in feature.iter().enumerate().take(embed) {
        if *fi == 0.0 {
            continue;
        }
        let row = &v[w1 + i * hidden..w1 + (i + 1) * hidden];
        for (hj, wij) in h.iter_mut().zip(row) {
            *hj += fi * wij;
        }
    }
    h.iter_mut().for_each(|x| *x = x.tanh());
    let mut z = v[b2..b2 + output].to_vec();
    for (j, hj) in h.iter().enumerate() {
        let row = &v[w2 + j * output..w2 + (j + 1) * output];
        for (zk, w) in z.iter_mut().zip(row) {
            *zk += hj * w;
        }
    }
    Activations { feature, hidden: h, logits: z }
}

/// Backpropagate `dlogits` through one forward pass into `grad`, where the
/// feature was the mean embedding of `tokens`.
pub fn backward(
    params: &ParamVector,
    act: &Activations,
    tokens: &[Token],
    dlogits: &[f64],
    grad: &mut ParamVector,
) {
    let Dims { embed, hidden, output, .. } = params.dims;
    let [_, w1, b1, w2, b2] = params.offsets();
    let v = &params.values;
    let g = &mut grad.values;

    for (k, dz) in dlogits.iter().enumerate() {
        g[b2 + k] += dz;
    }
    let mut dh = vec![0.0; hidden];
    for j in 0..hidden {
        let hj = act.hidden[j];
        let row = w2 + j * output;
        let mut acc = 0.0;
        for (k, dz) in dlogits.iter().enumerate() {
            g[row + k] += hj * dz;
            acc += v[row + k] * dz;
        }
        dh[j] = acc * (1.0 - hj * hj);
    }
    for (j, da) in dh.iter().enumerate() {
        g[b1 + j] += da;
    }
    let mut df = vec![0.0; embed];
    for i in 0..embed {
        let fi = act.feature[i];
        let row = w1 + i * hidden;
        let mut acc = 0.0;
        for (j, da) in dh.iter().enumerate() {
            g[row + j] += fi * da;
            acc += v[row + j] * da;
        }
        df[i] = acc;
    }
    if tokens.is_empty() {
        return;
    }
    let inv = 1.0 / tokens.len() as f64;
    for t in tokens {
        let base = t.index() * embed;
        for (i, dfi) in df.iter().enumerate() {
            g[base + i] += dfi * inv;
        }
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
