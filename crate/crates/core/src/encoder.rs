//! Semantic node encoder.
//!
//! The built-in encoder is an embedding bag: a node phrase is tokenized, its
//! token rows are averaged (mean pooling) and optionally passed through a
//! linear projection head. Precomputed vectors from an external model can be
//! loaded instead through [`load_precomputed`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kg::Vocab;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Lowercases and splits on every non-alphanumeric character.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    /// Builds a vocabulary in first-appearance order. Ids 0 and 1 are
    /// reserved for PAD and UNK.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = TokenVocab {
            tokens: vec!["<pad>".into(), "<unk>".into()],
            index: HashMap::new(),
        };
        for text in texts {
            for tok in split_tokens(text) {
                if !vocab.index.contains_key(&tok) {
                    vocab.index.insert(tok.clone(), vocab.tokens.len());
                    vocab.tokens.push(tok);
                }
            }
        }
        vocab
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Format("token vocabulary lacks PAD/UNK".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(TokenVocab { tokens, index })
    }

    /// Never returns an empty list: phrases without known structure map to
    /// a single UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = split_tokens(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingRole {
    Semantic,
    Structural,
    Fused,
}

/// Dense per-node vectors; row `i` belongs to node id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f64>,
    role: EmbeddingRole,
}

impl EmbeddingMatrix {
    pub fn new(rows: Array2<f64>, role: EmbeddingRole) -> Result<Self> {
        if let Some(bad) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite embedding entry at row {}",
                bad / rows.ncols().max(1)
            )));
        }
        Ok(EmbeddingMatrix { rows, role })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn role(&self) -> EmbeddingRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub projection_head: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 200,
            projection_head: false,
        }
    }
}

/// Gradient buffers matching a [`TextEncoder`]'s parameters.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub table: Array2<f64>,
    pub head: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: TokenVocab,
    table: Array2<f64>,
    head: Option<Array2<f64>>,
}

impl TextEncoder {
    /// Token rows are drawn uniformly from `[-0.5/dim, 0.5/dim]`; the PAD row
    /// is zero. The projection head, when enabled, starts as the identity.
    pub fn new(vocab: TokenVocab, cfg: EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::Argument("encoder dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / cfg.dim as f64;
        let mut table = Array2::zeros((vocab.len(), cfg.dim));
        for mut row in table.rows_mut().into_iter().skip(1) {
            row.mapv_inplace(|_| loop {
                let v: f64 = rng.gen_range(-bound..bound);
                if v != 0.0 {
                    break v;
                }
            });
        }
        let head = cfg.projection_head.then(|| Array2::eye(cfg.dim));
        Ok(TextEncoder { vocab, table, head })
    }

    /// Builds the token vocabulary from `texts` and initializes the encoder.
    pub fn from_texts<'a, I>(texts: I, cfg: EncoderConfig, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        TextEncoder::new(TokenVocab::build(texts), cfg, seed)
    }

    pub fn vocab(&self) -> &TokenVocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Array2<f64> {
        &mut self.table
    }

    pub fn head(&self) -> Option<&Array2<f64>> {
        self.head.as_ref()
    }

    pub fn head_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.head.as_mut()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text)
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            table: Array2::zeros(self.table.dim()),
            head: self.head.as_ref().map(|h| Array2::zeros(h.dim())),
        }
    }

    fn pool(&self, ids: &[usize]) -> Array1<f64> {
        let mut sum = Array1::zeros(self.dim());
        let mut count = 0usize;
        for &id in ids.iter().filter(|&&id| id != PAD) {
            sum += &self.table.row(id);
            count += 1;
        }
        if count > 0 {
            sum /= count as f64;
        }
        sum
    }

    /// Mean of the token rows (PAD excluded), then the optional head.
    pub fn encode_ids(&self, ids: &[usize]) -> Array1<f64> {
        let pooled = self.pool(ids);
        match &self.head {
            Some(h) => pooled.dot(h),
            None => pooled,
        }
    }

    pub fn encode_node(&self, text: &str) -> Array1<f64> {
        self.encode_ids(&self.tokenize(text))
    }

    /// Accumulates the gradient of a scalar loss into `grads`, given the
    /// loss gradient with respect to `encode_ids(ids)`.
    pub fn backward(&self, ids: &[usize], grad_out: ArrayView1<f64>, grads: &mut EncoderGrads) {
        let grad_pooled = match (&self.head, grads.head.as_mut()) {
            (Some(h), Some(gh)) => {
                let pooled = self.pool(ids);
                for (i, &p) in pooled.iter().enumerate() {
                    gh.row_mut(i).scaled_add(p, &grad_out);
                }
                h.dot(&grad_out)
            }
            _ => grad_out.to_owned(),
        };
        let count = ids.iter().filter(|&&id| id != PAD).count();
        if count == 0 {
            return;
        }
        let scale = 1.0 / count as f64;
        for &id in ids.iter().filter(|&&id| id != PAD) {
            grads.table.row_mut(id).scaled_add(scale, &grad_pooled);
        }
    }

    /// Encodes every node; row `i` is node `i`.
    pub fn encode_all(&self, nodes: &Vocab) -> EmbeddingMatrix {
        let rows: Vec<Array1<f64>> = nodes
            .texts()
            .par_iter()
            .map(|t| self.encode_node(t))
            .collect();
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(&rows) {
            dst.assign(src);
        }
        EmbeddingMatrix {
            rows: out,
            role: EmbeddingRole::Semantic,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "text-encoder",
            "dim": self.dim(),
            "projection_head": self.head.is_some(),
            "tokens": self.vocab.tokens,
        }));
        ck.push("table", self.table.clone());
        if let Some(h) = &self.head {
            ck.push("head", h.clone());
        }
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "text-encoder" {
            return Err(Error::Format("checkpoint is not a text encoder".into()));
        }
        let tokens: Vec<String> = serde_json::from_value(ck.meta["tokens"].clone())?;
        let vocab = TokenVocab::from_tokens(tokens)?;
        let table = ck.take("table")?;
        if table.nrows() != vocab.len() {
            return Err(Error::Format("token table does not match vocabulary".into()));
        }
        let head = if ck.meta["projection_head"] == true {
            Some(ck.take("head")?)
        } else {
            None
        };
        Ok(TextEncoder { vocab, table, head })
    }
}

/// Reads the embedding text format: a `<count> <dim>` header followed by
/// `<text>\t<v1> ... <vdim>` lines.
pub fn read_embedding_text<R: BufRead>(reader: R) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::Format(e.to_string()))?,
        None => return Err(Error::Format("empty embedding file".into())),
    };
    let parts: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad embedding header {header:?}")))
    };
    if parts.len() != 2 {
        return Err(Error::Format(format!("bad embedding header {header:?}")));
    }
    let (count, dim) = (parse_usize(parts[0])?, parse_usize(parts[1])?);
    let mut entries = Vec::with_capacity(count);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (text, values) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("line {}: missing tab after node text", i + 1))
        })?;
        let vec = values
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad float {v:?}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vec.len() != dim {
            return Err(Error::Format(format!(
                "line {}: expected {dim} values, found {}",
                i + 1,
                vec.len()
            )));
        }
        entries.push((text.to_string(), vec));
    }
    if entries.len() != count {
        return Err(Error::Format(format!(
            "header declares {count} rows, found {}",
            entries.len()
        )));
    }
    Ok((dim, entries))
}

pub fn write_embedding_text<'a, W, I>(mut out: W, names: I, rows: &Array2<f64>) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a str>,
{
    writeln!(out, "{} {}", rows.nrows(), rows.ncols())?;
    for (name, row) in names.into_iter().zip(rows.rows()) {
        write!(out, "{name}\t")?;
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                write!(out, " ")?;
            }
            write!(out, "{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Aligns precomputed vectors to node ids. Texts are normalized the same
/// way as the node vocabulary; lines for unknown nodes are ignored.
pub fn embeddings_from_reader<R: BufRead>(reader: R, nodes: &Vocab) -> Result<EmbeddingMatrix> {
    let (dim, entries) = read_embedding_text(reader)?;
    let mut rows = Array2::zeros((nodes.len(), dim));
    let mut covered = vec![false; nodes.len()];
    for (text, vec) in entries {
        if let Some(id) = nodes.get(&text) {
            rows.row_mut(id).assign(&ArrayView1::from(&vec));
            covered[id] = true;
        }
    }
    let missing: Vec<String> = covered
        .iter()
        .enumerate()
        .filter(|(_, &c)| !c)
        .map(|(i, _)| nodes.text(i).to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage {
            count: missing.len(),
            examples: missing.into_iter().take(10).collect(),
        });
    }
    EmbeddingMatrix::new(rows, EmbeddingRole::Semantic)
}

pub fn load_precomputed(path: impl AsRef<Path>, nodes: &Vocab) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    embeddings_from_reader(BufReader::new(file), nodes)
}
