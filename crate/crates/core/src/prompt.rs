//! Continuous and discrete prompts, and the projection between them.
//!
//! Unembedding is an exhaustive nearest-neighbor scan over the embedding
//! table; ties resolve to the lowest token id.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{decode, encode, PayloadKind};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    SquaredEuclidean,
    CosineDistance,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-euclidean" => Ok(Self::SquaredEuclidean),
            "cosine-distance" | "cosine" => Ok(Self::CosineDistance),
            other => Err(Error::Config(format!("unknown distance metric {other:?}"))),
        }
    }
}

/// Token-id prompt; serializes as a bare JSON array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HardPrompt {
    pub token_ids: Vec<usize>,
}

impl HardPrompt {
    pub fn new(token_ids: Vec<usize>) -> Self {
        Self { token_ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::Input("prompt must hold at least one token".into()));
        }
        match self.token_ids.iter().find(|&&t| t >= vocab_size) {
            Some(&bad) => Err(Error::Index {
                what: "prompt token",
                index: bad,
                bound: vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Semicolon-joined ids, as used in trace CSVs.
    pub fn joined(&self) -> String {
        self.token_ids
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// `L × d` matrix of continuous prompt rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt<S> {
    pub matrix: Tensor<S>,
}

impl<S: Scalar> SoftPrompt<S> {
    pub fn new(matrix: Tensor<S>) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "soft_prompt",
                lhs: matrix.shape().to_vec(),
                rhs: vec![],
            });
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("soft_prompt"));
        }
        Ok(Self { matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        self.matrix.row(i)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = encode(
            PayloadKind::SoftPrompt,
            None,
            false,
            &[("prompt".to_string(), &self.matrix)],
        )?;
        let path = path.as_ref();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, mut tensors) = decode::<S>(&bytes)?;
        if meta.kind != PayloadKind::SoftPrompt || tensors.len() != 1 {
            return Err(Error::Format("file does not hold a soft prompt".into()));
        }
        Self::new(tensors.remove(0).1)
    }
}

fn sq_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum()
}

/// `D(a, b)` under `metric`; cosine distance is `1 − cos θ`, clamped to `[0, 2]`.
pub fn distance<S: Scalar>(a: &[S], b: &[S], metric: DistanceMetric) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "distance",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    match metric {
        DistanceMetric::SquaredEuclidean => {
            Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum())
        }
        DistanceMetric::CosineDistance => {
            let (na, nb) = (sq_norm(a), sq_norm(b));
            if na <= S::zero() || nb <= S::zero() {
                return Err(Error::Degenerate("cosine distance of a zero vector".into()));
            }
            let dot: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            let d = S::one() - dot / (na * nb).sqrt();
            Ok(d.max(S::zero()).min(S::lit(2.0)))
        }
    }
}

/// Nearest vocabulary row to `v` and its distance.
pub fn nearest<S: Scalar>(
    table: &Tensor<S>,
    v: &[S],
    metric: DistanceMetric,
) -> Result<(usize, S)> {
    if table.shape().len() != 2 || table.last_dim() != v.len() {
        return Err(Error::Dimension {
            op: "unembed",
            lhs: table.shape().to_vec(),
            rhs: vec![v.len()],
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("unembed"));
    }
    let mut best = (0, S::infinity());
    for id in 0..table.rows() {
        let d = distance(table.row(id), v, metric)?;
        if d < best.1 {
            best = (id, d);
        }
    }
    Ok(best)
}

/// Token whose embedding minimizes `D(table[y], v)`; lowest id on ties.
pub fn unembed<S: Scalar>(table: &Tensor<S>, v: &[S], metric: DistanceMetric) -> Result<usize> {
    nearest(table, v, metric).map(|(id, _)| id)
}

pub fn unembed_prompt<S: Scalar>(
    table: &Tensor<S>,
    soft: &SoftPrompt<S>,
    metric: DistanceMetric,
) -> Result<HardPrompt> {
    let ids = (0..soft.len())
        .map(|i| unembed(table, soft.row(i), metric))
        .collect::<Result<_>>()?;
    Ok(HardPrompt::new(ids))
}

/// Rows `table[ids[i]]`; the result requests gradients only if `trainable`.
pub fn embed_prompt<S: Scalar>(
    table: &Tensor<S>,
    hard: &HardPrompt,
    trainable: bool,
) -> Result<SoftPrompt<S>> {
    hard.validate(table.rows())?;
    let d = table.last_dim();
    let mut data = Vec::with_capacity(hard.len() * d);
    for &id in &hard.token_ids {
        data.extend_from_slice(table.row(id));
    }
    let matrix = Tensor::matrix(hard.len(), d, data)?.with_requires_grad(trainable);
    Ok(SoftPrompt { matrix })
}
