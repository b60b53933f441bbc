//! Parameterized similarity functions `E_w(x, y)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Projections with a norm below this are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-8;

/// Anything that scores an (anchor, target) pair.
pub trait Similarity<T: Scalar> {
    fn similarity(&self, x: &[T], y: &[T]) -> Result<T>;

    /// True when the scores are the generating model of the synthetic world,
    /// whose partition function is known in closed form.
    fn is_ground_truth(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityModel<T> {
    /// `E(x, y) = x·y`; parameter free.
    GroundTruthBilinear,
    LinearCosine(LinearCosine<T>),
}

impl<T: Scalar> SimilarityModel<T> {
    pub fn num_params(&self) -> usize {
        match self {
            Self::GroundTruthBilinear => 0,
            Self::LinearCosine(m) => m.params.len(),
        }
    }

    pub fn similarity_grad(&self, x: &[T], y: &[T]) -> Result<Vec<T>> {
        match self {
            Self::GroundTruthBilinear => Err(Error::NoParameters),
            Self::LinearCosine(m) => m.similarity_grad(x, y),
        }
    }

    pub fn as_linear_cosine(&self) -> Result<&LinearCosine<T>> {
        match self {
            Self::LinearCosine(m) => Ok(m),
            Self::GroundTruthBilinear => Err(Error::NoParameters),
        }
    }

    pub fn as_linear_cosine_mut(&mut self) -> Result<&mut LinearCosine<T>> {
        match self {
            Self::LinearCosine(m) => Ok(m),
            Self::GroundTruthBilinear => Err(Error::NoParameters),
        }
    }
}

impl<T: Scalar> Similarity<T> for SimilarityModel<T> {
    fn similarity(&self, x: &[T], y: &[T]) -> Result<T> {
        match self {
            Self::GroundTruthBilinear => {
                if x.len() != y.len() {
                    return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
                }
                Ok(dot(x, y))
            }
            Self::LinearCosine(m) => m.similarity(x, y),
        }
    }

    fn is_ground_truth(&self) -> bool {
        matches!(self, Self::GroundTruthBilinear)
    }
}

/// L2-normalized projection of one input, cached for batched evaluation.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub unit: Vec<T>,
    pub norm: T,
}

/// Two linear encoders followed by L2 normalization:
/// `E(x, y) = <W1 x / |W1 x|, W2 y / |W2 y|>`.
///
/// Parameters are stored flat: `W1` row-major (`latent × anchor_dim`) followed
/// by `W2` row-major (`latent × target_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCosine<T> {
    latent_dim: usize,
    anchor_dim: usize,
    target_dim: usize,
    params: Vec<T>,
}

impl<T: Scalar> LinearCosine<T> {
    pub fn new(latent_dim: usize, anchor_dim: usize, target_dim: usize, params: Vec<T>) -> Result<Self> {
        let expected = latent_dim * (anchor_dim + target_dim);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        if latent_dim == 0 || anchor_dim == 0 || target_dim == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        Ok(Self { latent_dim, anchor_dim, target_dim, params })
    }

    /// Entries i.i.d. uniform on `[-1/sqrt(d_in), 1/sqrt(d_in)]` per encoder.
    pub fn init<R: Rng + ?Sized>(latent_dim: usize, anchor_dim: usize, target_dim: usize, rng: &mut R) -> Result<Self> {
        let mut params = Vec::with_capacity(latent_dim * (anchor_dim + target_dim));
        for (rows, cols) in [(latent_dim, anchor_dim), (latent_dim, target_dim)] {
            let bound = 1.0 / (cols as f64).sqrt();
            for _ in 0..rows * cols {
                params.push(T::lit(rng.gen_range(-bound..=bound)));
            }
        }
        Self::new(latent_dim, anchor_dim, target_dim, params)
    }

    /// Both encoders set to the identity (requires equal dimensions).
    pub fn identity(dim: usize) -> Self {
        let mut params = vec![T::zero(); 2 * dim * dim];
        for k in 0..dim {
            params[k * dim + k] = T::one();
            params[dim * dim + k * dim + k] = T::one();
        }
        Self { latent_dim: dim, anchor_dim: dim, target_dim: dim, params }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    pub fn anchor_dim(&self) -> usize {
        self.anchor_dim
    }
    pub fn target_dim(&self) -> usize {
        self.target_dim
    }
    pub fn params(&self) -> &[T] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }
    fn split(&self) -> usize {
        self.latent_dim * self.anchor_dim
    }
    pub fn anchor_weights(&self) -> &[T] {
        &self.params[..self.split()]
    }
    pub fn target_weights(&self) -> &[T] {
        &self.params[self.split()..]
    }

    fn embed(weights: &[T], rows: usize, v: &[T]) -> Result<Embedding<T>> {
        let cols = v.len();
        let mut unit: Vec<T> = (0..rows).map(|r| dot(&weights[r * cols..(r + 1) * cols], v)).collect();
        let norm = unit.iter().map(|&a| a * a).sum::<T>().sqrt();
        if !(norm.as_f64() >= NORM_FLOOR) {
            return Err(Error::DegenerateNorm { norm: norm.as_f64(), floor: NORM_FLOOR });
        }
        unit.iter_mut().for_each(|a| *a /= norm);
        Ok(Embedding { unit, norm })
    }

    pub fn embed_anchor(&self, x: &[T]) -> Result<Embedding<T>> {
        if x.len() != self.anchor_dim {
            return Err(Error::DimensionMismatch { expected: self.anchor_dim, got: x.len() });
        }
        Self::embed(self.anchor_weights(), self.latent_dim, x)
    }

    pub fn embed_target(&self, y: &[T]) -> Result<Embedding<T>> {
        if y.len() != self.target_dim {
            return Err(Error::DimensionMismatch { expected: self.target_dim, got: y.len() });
        }
        Self::embed(self.target_weights(), self.latent_dim, y)
    }

    /// Cosine of two cached embeddings, clamped to `[-1, 1]` against rounding.
    pub fn score(a: &Embedding<T>, b: &Embedding<T>) -> T {
        dot(&a.unit, &b.unit).max(-T::one()).min(T::one())
    }

    pub fn similarity(&self, x: &[T], y: &[T]) -> Result<T> {
        Ok(Self::score(&self.embed_anchor(x)?, &self.embed_target(y)?))
    }

    pub fn similarity_grad(&self, x: &[T], y: &[T]) -> Result<Vec<T>> {
        let ea = self.embed_anchor(x)?;
        let eb = self.embed_target(y)?;
        let mut out = vec![T::zero(); self.params.len()];
        self.accumulate_pair_grad(x, &ea, y, &eb, T::one(), &mut out);
        Ok(out)
    }

    /// Adds `coef · ∇_w E(x, y)` into `out`.
    ///
    /// With `a = W1 x`, `â = a/|a|` and `c = <â, b̂>`, the chain rule through the
    /// normalization gives `∂c/∂a = (b̂ − c â)/|a|` and `∂c/∂W1 = (∂c/∂a) xᵀ`;
    /// symmetrically for `W2`.
    pub fn accumulate_pair_grad(&self, x: &[T], ea: &Embedding<T>, y: &[T], eb: &Embedding<T>, coef: T, out: &mut [T]) {
        let c = dot(&ea.unit, &eb.unit);
        let split = self.split();
        let (g1, g2) = out.split_at_mut(split);
        for r in 0..self.latent_dim {
            let da = coef * (eb.unit[r] - c * ea.unit[r]) / ea.norm;
            let db = coef * (ea.unit[r] - c * eb.unit[r]) / eb.norm;
            let row1 = &mut g1[r * self.anchor_dim..(r + 1) * self.anchor_dim];
            for (g, &xc) in row1.iter_mut().zip(x) {
                *g += da * xc;
            }
            let row2 = &mut g2[r * self.target_dim..(r + 1) * self.target_dim];
            for (g, &yc) in row2.iter_mut().zip(y) {
                *g += db * yc;
            }
        }
    }

    /// Adds `Σ_pq coef[p·cols + q] · ∇_w E(x_p, y_q)` into `out`.
    ///
    /// Equivalent to calling [`Self::accumulate_pair_grad`] on every pair, but
    /// gathers the upstream gradient per embedding first, so the cost is
    /// `O(rows·cols·latent + (rows + cols)·latent·dim)`.
    pub fn accumulate_block_grad(
        &self,
        anchors: &[&[T]],
        anchor_emb: &[Embedding<T>],
        targets: &[&[T]],
        target_emb: &[Embedding<T>],
        coef: &[T],
        out: &mut [T],
    ) {
        let (rows, cols) = (anchors.len(), targets.len());
        debug_assert_eq!(coef.len(), rows * cols);
        let split = self.split();
        let (g1, g2) = out.split_at_mut(split);
        let mut upstream = vec![T::zero(); self.latent_dim];
        for p in 0..rows {
            upstream.iter_mut().for_each(|v| *v = T::zero());
            for q in 0..cols {
                let c = coef[p * cols + q];
                for (u, &b) in upstream.iter_mut().zip(&target_emb[q].unit) {
                    *u += c * b;
                }
            }
            Self::project_into(&upstream, &anchor_emb[p], anchors[p], self.anchor_dim, g1);
        }
        for q in 0..cols {
            upstream.iter_mut().for_each(|v| *v = T::zero());
            for p in 0..rows {
                let c = coef[p * cols + q];
                for (u, &a) in upstream.iter_mut().zip(&anchor_emb[p].unit) {
                    *u += c * a;
                }
            }
            Self::project_into(&upstream, &target_emb[q], targets[q], self.target_dim, g2);
        }
    }

    // Chain rule through v ↦ v/|v| then v = W·input.
    fn project_into(upstream: &[T], emb: &Embedding<T>, input: &[T], dim: usize, out: &mut [T]) {
        let along = dot(upstream, &emb.unit);
        for (r, (&u, &e)) in upstream.iter().zip(&emb.unit).enumerate() {
            let d = (u - along * e) / emb.norm;
            for (g, &v) in out[r * dim..(r + 1) * dim].iter_mut().zip(input) {
                *g += d * v;
            }
        }
    }
}

/// Checkpoint document. Parameters are written row-major with 17 significant digits.
#[derive(Serialize)]
struct CheckpointOut<'a> {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    latent_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layout: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<&'a RawValue>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    kind: String,
    latent_dim: Option<usize>,
    anchor_dim: Option<usize>,
    target_dim: Option<usize>,
    params: Option<Vec<f64>>,
}

/// `[v0, v1, ...]` with every value printed to 17 significant digits.
pub fn format_real_array<T: Scalar>(values: &[T]) -> String {
    let body: Vec<String> = values.iter().map(|v| format_real(v.as_f64())).collect();
    format!("[{}]", body.join(","))
}

/// Decimal rendering with 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

impl<T: Scalar> SimilarityModel<T> {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let doc = match self {
            Self::GroundTruthBilinear => serde_json::to_string_pretty(&CheckpointOut {
                kind: "ground_truth_bilinear",
                latent_dim: None,
                anchor_dim: None,
                target_dim: None,
                layout: None,
                params: None,
            })?,
            Self::LinearCosine(m) => {
                let raw = RawValue::from_string(format_real_array(&m.params))?;
                serde_json::to_string_pretty(&CheckpointOut {
                    kind: "linear_cosine",
                    latent_dim: Some(m.latent_dim),
                    anchor_dim: Some(m.anchor_dim),
                    target_dim: Some(m.target_dim),
                    layout: Some("row-major W1[latent_dim x anchor_dim] then W2[latent_dim x target_dim]"),
                    params: Some(&raw),
                })?
            }
        };
        Ok(doc)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: CheckpointIn = serde_json::from_str(text)?;
        match doc.kind.as_str() {
            "ground_truth_bilinear" => Ok(Self::GroundTruthBilinear),
            "linear_cosine" => {
                let missing = |f: &str| Error::Malformed(format!("checkpoint missing `{f}`"));
                let params = doc.params.ok_or_else(|| missing("params"))?;
                Ok(Self::LinearCosine(LinearCosine::new(
                    doc.latent_dim.ok_or_else(|| missing("latent_dim"))?,
                    doc.anchor_dim.ok_or_else(|| missing("anchor_dim"))?,
                    doc.target_dim.ok_or_else(|| missing("target_dim"))?,
                    params.into_iter().map(T::lit).collect(),
                )?))
            }
            other => Err(Error::Malformed(format!("unknown model kind `{other}`"))),
        }
    }
}
