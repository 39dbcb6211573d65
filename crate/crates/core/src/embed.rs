//! Embedding layer: learnable student rows, content-derived question vectors
//! and concept vectors pooled from their questions.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DomainDataset, Question};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

/// Maps question text to a fixed-size vector.
///
/// Implementations must be deterministic; question vectors are never trained
/// and are recomputed from text whenever a checkpoint is reloaded.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Signed feature hashing over lowercase alphanumeric tokens (FNV-1a 64).
#[derive(Debug, Clone, Copy)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        Ok(Self { dim })
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        encode_question_text(text, self.dim)
    }
}

fn token_hash(token: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    h.finish()
}

/// Feature-hashed, L2-normalized bag of tokens. Empty text gives the zero vector.
pub fn encode_question_text(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let h = token_hash(&token.to_lowercase());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Row `c` is the mean of the vectors of every question tagged with concept `c`.
pub fn build_concept_vecs(
    questions: &[Question],
    question_vecs: &Matrix,
    concepts: &[String],
) -> Result<Matrix> {
    if questions.len() != question_vecs.rows() {
        return Err(Error::Dimension(format!(
            "{} questions but {} question vectors",
            questions.len(),
            question_vecs.rows()
        )));
    }
    let index: std::collections::HashMap<&str, usize> =
        concepts.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let dim = question_vecs.cols();
    let mut out = Matrix::zeros(concepts.len(), dim);
    let mut counts = vec![0usize; concepts.len()];
    for (q, row) in questions.iter().zip(question_vecs.iter_rows()) {
        for c in &q.concept_ids {
            let &ci = index.get(c.as_str()).ok_or_else(|| {
                Error::Validation(format!(
                    "question `{}` references unknown concept `{c}`",
                    q.question_id
                ))
            })?;
            counts[ci] += 1;
            for (o, x) in out.row_mut(ci).iter_mut().zip(row) {
                *o += x;
            }
        }
    }
    for (ci, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Validation(format!(
                "concept `{}` has no associated question",
                concepts[ci]
            )));
        }
        out.row_mut(ci).iter_mut().for_each(|x| *x /= n as f64);
    }
    Ok(out)
}

/// Uniform in `[-a, a]` with `a = sqrt(6 / dim)`.
pub fn init_student_vecs(n: usize, dim: usize, seed: u64) -> Matrix {
    let a = (6.0 / dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| rng.gen_range(-a..=a)).collect();
    Matrix::from_vec(n, dim, data)
}

/// Question and concept vectors of one domain plus its concept masks.
#[derive(Debug, Clone)]
pub struct DomainEmbedding {
    pub domain_id: String,
    pub question_vecs: Matrix,
    pub concept_vecs: Matrix,
    /// Mean concept vector, used by the unidimensional fusion.
    pub concept_mean: Vec<f64>,
    /// Concept indices associated with each question.
    pub question_concepts: Vec<Vec<usize>>,
}

impl DomainEmbedding {
    pub fn build(dataset: &DomainDataset, encoder: &dyn TextEncoder) -> Result<Self> {
        let dim = encoder.dim();
        let mut question_vecs = Matrix::zeros(dataset.questions.len(), dim);
        for (i, q) in dataset.questions.iter().enumerate() {
            question_vecs.row_mut(i).copy_from_slice(&encoder.encode(&q.text));
        }
        let concept_vecs = build_concept_vecs(&dataset.questions, &question_vecs, &dataset.concepts)?;
        let index = dataset.concept_index();
        let question_concepts = dataset
            .questions
            .iter()
            .map(|q| {
                let mut idx: Vec<usize> = q.concept_ids.iter().map(|c| index[c]).collect();
                idx.sort_unstable();
                idx.dedup();
                idx
            })
            .collect();
        Ok(Self {
            domain_id: dataset.domain_id.clone(),
            concept_mean: concept_vecs.mean_row(),
            question_vecs,
            concept_vecs,
            question_concepts,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_vecs.rows()
    }

    pub fn question_mask(&self, q: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.n_concepts()];
        for &c in &self.question_concepts[q] {
            m[c] = 1.0;
        }
        m
    }
}
