//! Text stage: tokenizer, vocabulary, mean-pooled word embeddings and the linear
//! projection into the model dimension. Precomputed embeddings (e.g. exported from
//! an external language model) can replace the built-in encoder.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::params::{init_bias, init_matrix, push_mat, push_vec, TensorRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    /// Minimum number of training occurrences for a word to enter the vocabulary.
    pub min_count: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            min_count: 2,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("text embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabWords")]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct VocabWords {
    words: Vec<String>,
}

impl From<VocabWords> for Vocab {
    fn from(v: VocabWords) -> Self {
        Vocab::from_words(v.words)
    }
}

impl Vocab {
    /// Words with at least `min_count` occurrences, sorted for a platform-independent order.
    pub fn fit<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(w, _)| w)
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Token ids of in-vocabulary words; out-of-vocabulary words are dropped.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().filter_map(|w| self.id(w)).collect()
    }
}

/// Trainable parameters of the text stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextParams {
    /// (vocab × embed_dim); zero rows when embeddings come from a file.
    pub embedding: Matrix,
    /// (out_dim × embed_dim).
    pub proj_weight: Matrix,
    pub proj_bias: Vec<f64>,
}

impl TextParams {
    pub fn init<R: Rng>(rng: &mut R, vocab_size: usize, embed_dim: usize, out_dim: usize) -> Self {
        let mut embedding = Matrix::zeros(vocab_size, embed_dim);
        for v in embedding.as_mut_slice() {
            *v = rng.gen_range(-1.0..=1.0);
        }
        Self {
            embedding,
            proj_weight: init_matrix(rng, out_dim, embed_dim),
            proj_bias: init_bias(rng, out_dim, embed_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.proj_weight.rows()
    }

    /// Mean of the embedding rows of `ids`; the zero vector when there are none.
    pub fn encode_ids(&self, ids: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.embed_dim()];
        if ids.is_empty() {
            return h;
        }
        for &id in ids {
            axpy(&mut h, 1.0, self.embedding.row(id));
        }
        let inv = 1.0 / ids.len() as f64;
        h.iter_mut().for_each(|x| *x *= inv);
        h
    }

    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.embed_dim() {
            return Err(Error::Shape {
                context: "text projection input",
                expected: self.embed_dim(),
                actual: h.len(),
            });
        }
        let mut z = self.proj_weight.matvec(h);
        axpy(&mut z, 1.0, &self.proj_bias);
        Ok(z)
    }

    /// Accumulates gradients for a projected embedding. `ids` is `None` for precomputed input.
    pub fn backward(&self, h: &[f64], ids: Option<&[usize]>, dz: &[f64], grads: &mut TextGrads) {
        grads.proj_weight.add_outer(dz, h);
        axpy(&mut grads.proj_bias, 1.0, dz);
        if let Some(ids) = ids.filter(|ids| !ids.is_empty()) {
            let mut dh = self.proj_weight.matvec_t(dz);
            let inv = 1.0 / ids.len() as f64;
            dh.iter_mut().for_each(|x| *x *= inv);
            for &id in ids {
                grads.add_embedding_row(id, &dh);
            }
        }
    }

    pub(crate) fn tensors_into<'a>(&'a self, out: &mut Vec<TensorRef<'a>>) {
        push_mat(out, "text.embedding".into(), &self.embedding);
        push_mat(out, "text.proj.weight".into(), &self.proj_weight);
        push_vec(out, "text.proj.bias".into(), &self.proj_bias);
    }

    pub(crate) fn tensors_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.embedding.as_mut_slice());
        out.push(self.proj_weight.as_mut_slice());
        out.push(&mut self.proj_bias);
    }
}

/// Per-sample text gradients; embedding rows are kept sparse.
#[derive(Debug, Clone)]
pub struct TextGrads {
    pub embedding_rows: Vec<(usize, Vec<f64>)>,
    pub proj_weight: Matrix,
    pub proj_bias: Vec<f64>,
}

impl TextGrads {
    pub fn zeros(params: &TextParams) -> Self {
        Self {
            embedding_rows: Vec::new(),
            proj_weight: Matrix::zeros(params.proj_weight.rows(), params.proj_weight.cols()),
            proj_bias: vec![0.0; params.proj_bias.len()],
        }
    }

    fn add_embedding_row(&mut self, id: usize, g: &[f64]) {
        match self.embedding_rows.iter_mut().find(|(i, _)| *i == id) {
            Some((_, row)) => axpy(row, 1.0, g),
            None => self.embedding_rows.push((id, g.to_vec())),
        }
    }

    pub fn accumulate_into(&self, dense: &mut TextParams) {
        for (id, row) in &self.embedding_rows {
            axpy(dense.embedding.row_mut(*id), 1.0, row);
        }
        dense.proj_weight.add_assign(&self.proj_weight);
        axpy(&mut dense.proj_bias, 1.0, &self.proj_bias);
    }
}

/// Text embeddings supplied from a CSV file, keyed by (patient_id, 1-based visit index).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    rows: HashMap<(String, usize), Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, patient_id: &str, visit_index: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape {
                context: "precomputed embedding",
                expected: self.dim,
                actual: v.len(),
            });
        }
        self.rows.insert((patient_id.to_string(), visit_index), v);
        Ok(())
    }

    /// Reads `patient_id,visit_index,e0..e{n-1}`. When `expected_dim` is given the
    /// header width must match it.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)?;
        let header = rdr.headers()?.clone();
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if header.len() < 3 || &header[0] != "patient_id" || &header[1] != "visit_index" {
            return Err(parse_err(
                1,
                "header must start with patient_id,visit_index".into(),
            ));
        }
        for (i, h) in header.iter().skip(2).enumerate() {
            if h != format!("e{i}") {
                return Err(parse_err(1, format!("expected column e{i}, found {h}")));
            }
        }
        let dim = header.len() - 2;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(Error::Shape {
                    context: "precomputed embedding file",
                    expected,
                    actual: dim,
                });
            }
        }
        let mut out = Self::new(dim);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let visit: usize = rec[1]
                .parse()
                .map_err(|e| parse_err(line, format!("visit_index: {e}")))?;
            let v = rec
                .iter()
                .skip(2)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| parse_err(line, format!("value {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(&rec[0], visit, v)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["patient_id".to_string(), "visit_index".to_string()];
        header.extend((0..self.dim).map(|i| format!("e{i}")));
        w.write_record(&header)?;
        let mut keys: Vec<_> = self.rows.keys().collect();
        keys.sort();
        for k in keys {
            let mut rec = vec![k.0.clone(), k.1.to_string()];
            rec.extend(self.rows[k].iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn lookup(&self, patient_id: &str, visit_index: usize) -> Result<&[f64]> {
        self.rows
            .get(&(patient_id.to_string(), visit_index))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding {
                patient_id: patient_id.to_string(),
                visit_index,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(vocab: usize, e: usize, out: usize) -> TextParams {
        TextParams::init(&mut ChaCha8Rng::seed_from_u64(3), vocab, e, out)
    }

    #[test]
    fn tokenizer_lowercases_and_splits_on_punctuation() {
        assert_eq!(tokenize("Chest pain; SOB."), vec!["chest", "pain", "sob"]);
        assert!(tokenize("  ;; ").is_empty());
    }

    #[test]
    fn vocab_keeps_words_seen_twice() {
        let v = Vocab::fit(["a b c", "a b", "z"], 2);
        assert_eq!(v.words(), &["a".to_string(), "b".to_string()]);
        assert_eq!(v.encode("A q b"), vec![0, 1]);
    }

    #[test]
    fn encode_edge_cases() {
        let p = params(3, 4, 2);
        assert_eq!(p.encode_ids(&[]), vec![0.0; 4]);
        assert_eq!(p.encode_ids(&[1]), p.embedding.row(1).to_vec());
        assert_eq!(p.encode_ids(&[2, 2]), p.encode_ids(&[2]));
    }

    #[test]
    fn projection_edge_cases() {
        let mut p = params(1, 3, 3);
        p.proj_weight = Matrix::zeros(3, 3);
        p.proj_bias = vec![1.0, -2.0, 0.5];
        assert_eq!(p.project(&[4.0, 5.0, 6.0]).unwrap(), p.proj_bias);
        p.proj_weight = Matrix::identity(3);
        p.proj_bias = vec![0.0; 3];
        assert_eq!(p.project(&[4.0, 5.0, 6.0]).unwrap(), vec![4.0, 5.0, 6.0]);
        assert!(matches!(p.project(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn projection_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = params(0, 7, 5);
        let h: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = p.project(&h).unwrap();
        for i in 0..5 {
            let mut acc = p.proj_bias[i];
            for j in 0..7 {
                acc += p.proj_weight.get(i, j) * h[j];
            }
            assert!((z[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn precomputed_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let mut e = PrecomputedEmbeddings::new(3);
        let v = vec![0.1, -1.0 / 3.0, 1e-300];
        e.insert("p1", 1, v.clone()).unwrap();
        e.save(&path).unwrap();
        let loaded = PrecomputedEmbeddings::load(&path, Some(3)).unwrap();
        assert_eq!(loaded.lookup("p1", 1).unwrap(), v.as_slice());
        assert!(matches!(
            loaded.lookup("p1", 2),
            Err(Error::MissingEmbedding { visit_index: 2, .. })
        ));
        assert!(matches!(
            PrecomputedEmbeddings::load(&path, Some(2)),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn encode_is_permutation_invariant(ids in prop::collection::vec(0usize..6, 0..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let p = params(6, 5, 2);
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = p.encode_ids(&ids);
            let b = p.encode_ids(&shuffled);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn projection_is_affine(
            x in prop::collection::vec(-3.0f64..3.0, 4),
            y in prop::collection::vec(-3.0f64..3.0, 4),
            a in 0.0f64..1.0,
        ) {
            let p = params(0, 4, 3);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + (1.0 - a) * v).collect();
            let lhs = p.project(&mix).unwrap();
            let px = p.project(&x).unwrap();
            let py = p.project(&y).unwrap();
            for i in 0..3 {
                prop_assert!((lhs[i] - (a * px[i] + (1.0 - a) * py[i])).abs() < 1e-12);
            }
        }
    }
}
