use crate::error::{Error, Result};
use crate::model::{LinearCosine, Similarity, SimilarityModel};
use crate::scalar::Scalar;
use crate::world::{check_tau, PairedSample};

/// Scores `K[i][j] = E(x_i, y_j)` of every anchor against every target,
/// stored row-major, together with the temperature they are used at.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    tau: T,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>, tau: T) -> Result<Self> {
        check_tau(tau)?;
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("similarity matrix"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data, tau })
    }

    pub fn from_fn(n: usize, tau: T, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self::new(n, n, data, tau)
    }

    pub fn from_model<M: Similarity<T> + ?Sized>(model: &M, anchors: &[Vec<T>], targets: &[Vec<T>], tau: T) -> Result<Self> {
        let mut data = Vec::with_capacity(anchors.len() * targets.len());
        for x in anchors {
            for y in targets {
                data.push(model.similarity(x, y)?);
            }
        }
        Self::new(anchors.len(), targets.len(), data, tau)
    }

    /// Like [`from_model`](Self::from_model) but embeds each input once.
    pub fn from_similarity_model(model: &SimilarityModel<T>, anchors: &[Vec<T>], targets: &[Vec<T>], tau: T) -> Result<Self> {
        match model {
            SimilarityModel::GroundTruthBilinear => Self::from_model(model, anchors, targets, tau),
            SimilarityModel::LinearCosine(m) => {
                let ea = anchors.iter().map(|x| m.embed_anchor(x)).collect::<Result<Vec<_>>>()?;
                let eb = targets.iter().map(|y| m.embed_target(y)).collect::<Result<Vec<_>>>()?;
                let mut data = Vec::with_capacity(ea.len() * eb.len());
                for a in &ea {
                    for b in &eb {
                        data.push(LinearCosine::score(a, b));
                    }
                }
                Self::new(ea.len(), eb.len(), data, tau)
            }
        }
    }

    pub fn from_sample(model: &SimilarityModel<T>, sample: &PairedSample<T>) -> Result<Self> {
        Self::from_similarity_model(model, &sample.anchors, &sample.targets, sample.tau)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn tau(&self) -> T {
        self.tau
    }
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// `K[j][i]`: scores with the roles of anchors and targets swapped.
    pub fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, data, tau: self.tau }
    }

    pub(crate) fn require_square(&self) -> Result<usize> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(Error::DimensionMismatch { expected: self.rows, got: self.cols })
        }
    }
}
