//! Attribute embeddings learned with skip-gram and negative sampling, where
//! every portrait's attribute values form one context window.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, Record};
use crate::error::{Error, Result};
use crate::schema::{AttributeSchema, AttributeSet};
use crate::seed::derive_seed;

/// One bag of attribute values per portrait.
#[derive(Debug, Clone)]
pub struct AttributeBagCorpus {
    schema: AttributeSchema,
    bags: Vec<Vec<usize>>,
}

impl AttributeBagCorpus {
    pub fn new(schema: &AttributeSchema, bags: &[AttributeSet]) -> Result<Self> {
        let mut slots = Vec::with_capacity(bags.len());
        for bag in bags {
            if bag.is_empty() {
                return Err(Error::Empty("attribute bag"));
            }
            let mut s: Vec<usize> = bag
                .iter()
                .map(|(t, v)| schema.slot(t, v))
                .collect::<Result<_>>()?;
            s.sort_unstable();
            slots.push(s);
        }
        Ok(Self { schema: schema.clone(), bags: slots })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    fn pair_count(&self) -> usize {
        self.bags.iter().map(|b| b.len() * b.len().saturating_sub(1)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self { dim: 16, epochs: 50, negatives: 5, learning_rate: 0.025, seed: 0 }
    }
}

/// A `dim`-length vector per (type, value) pair, in schema slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    pairs: Vec<(String, String)>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<(String, String), usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableManifest {
    format: String,
    dim: usize,
    pair_count: usize,
    pairs: Vec<String>,
}

impl EmbeddingTable {
    pub fn from_parts(dim: usize, pairs: Vec<(String, String)>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be ≥ 1".into()));
        }
        if pairs.len() != vectors.len() {
            return Err(Error::LengthMismatch { expected: pairs.len(), actual: vectors.len() });
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, actual: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig("non-finite embedding value".into()));
            }
        }
        let index = pairs.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Ok(Self { dim, pairs, vectors, index })
    }

    /// Uniform `[-0.5/dim, 0.5/dim]` initialization for every schema pair.
    pub fn initialized(schema: &AttributeSchema, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE1]));
        let bound = 0.5 / dim as f64;
        let pairs = all_pairs(schema);
        let vectors = pairs
            .iter()
            .map(|_| (0..dim).map(|_| rng.gen_range(-bound..=bound) as f32).collect())
            .collect();
        Self::from_parts(dim, pairs, vectors)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, ty: &str, value: &str) -> Option<&[f32]> {
        self.index
            .get(&(ty.to_string(), value.to_string()))
            .map(|&i| self.vectors[i].as_slice())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Checks the table covers every pair of `schema`.
    pub fn covers(&self, schema: &AttributeSchema) -> Result<()> {
        for (t, v) in all_pairs(schema) {
            if self.get(&t, &v).is_none() {
                return Err(Error::MissingEmbedding { ty: t, value: v });
            }
        }
        Ok(())
    }

    /// Rows in schema slot order, as a `K × dim` row-major buffer.
    pub fn slot_matrix(&self, schema: &AttributeSchema) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(schema.slot_count() * self.dim);
        for (t, v) in all_pairs(schema) {
            let row = self
                .get(&t, &v)
                .ok_or_else(|| Error::MissingEmbedding { ty: t.clone(), value: v.clone() })?;
            out.extend_from_slice(row);
        }
        Ok(out)
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let records: Vec<Record> = self
            .pairs
            .iter()
            .zip(&self.vectors)
            .map(|((t, v), x)| Record { key: t.clone(), sub: v.clone(), values: x.clone() })
            .collect();
        write_archive(w, self.dim as u32, &records)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let (width, records) = read_archive(r)?;
        let mut pairs = Vec::with_capacity(records.len());
        let mut vectors = Vec::with_capacity(records.len());
        for rec in records {
            pairs.push((rec.key, rec.sub));
            vectors.push(rec.values);
        }
        Self::from_parts(width as usize, pairs, vectors)
    }

    /// Writes the binary table plus a human-readable `<path>.toml` manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))?;
        let manifest = TableManifest {
            format: "PRTA embedding table v1".into(),
            dim: self.dim,
            pair_count: self.pairs.len(),
            pairs: self.pairs.iter().map(|(t, v)| format!("{t}={v}")).collect(),
        };
        let sidecar = sidecar_path(path);
        let text = toml::to_string(&manifest).expect("manifest serializes");
        std::fs::write(&sidecar, text).map_err(|e| Error::io(sidecar, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".toml");
    name.into()
}

fn all_pairs(schema: &AttributeSchema) -> Vec<(String, String)> {
    schema
        .types()
        .iter()
        .flat_map(|t| t.values.iter().map(move |v| (t.name.clone(), v.clone())))
        .collect()
}

/// Concatenates one block per schema type (canonical order); unspecified
/// types contribute a zero block. Output length is `types · dim`.
pub fn embed_set(attrs: &AttributeSet, table: &EmbeddingTable, schema: &AttributeSchema) -> Result<Vec<f32>> {
    let selection = schema.resolve(attrs)?;
    let d = table.dim();
    let mut out = vec![0.0f32; schema.type_count() * d];
    for (t, sel) in selection.iter().enumerate() {
        if let Some(v) = sel {
            let spec = &schema.types()[t];
            let row = table.get(&spec.name, &spec.values[*v]).ok_or_else(|| Error::MissingEmbedding {
                ty: spec.name.clone(),
                value: spec.values[*v].clone(),
            })?;
            out[t * d..(t + 1) * d].copy_from_slice(row);
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn train_embeddings(corpus: &AttributeBagCorpus, config: &SkipGramConfig) -> Result<EmbeddingTable> {
    train_embeddings_traced(corpus, config).map(|(t, _)| t)
}

/// Trains the table and returns the mean per-pair loss of every epoch.
pub fn train_embeddings_traced(
    corpus: &AttributeBagCorpus,
    config: &SkipGramConfig,
) -> Result<(EmbeddingTable, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("attribute bag corpus"));
    }
    let schema = corpus.schema();
    let dim = config.dim;
    let initial = EmbeddingTable::initialized(schema, dim, config.seed)?;
    let k = schema.slot_count();
    let mut input: Vec<f64> = initial.vectors.iter().flatten().map(|&x| x as f64).collect();
    let mut output = vec![0.0f64; k * dim];

    // unigram^0.75 negative-sampling distribution
    let mut counts = vec![0usize; k];
    for bag in &corpus.bags {
        for &s in bag {
            counts[s] += 1;
        }
    }
    let mut cumulative = Vec::with_capacity(k);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }

    let pairs_per_epoch = corpus.pair_count();
    let total = (pairs_per_epoch * config.epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut grad_in = vec![0.0f64; dim];

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x5C, epoch as u64]));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &b in &order {
            let bag = &corpus.bags[b];
            for &center in bag {
                for &context in bag {
                    if center == context {
                        continue;
                    }
                    let lr = config.learning_rate * (1.0 - processed as f64 / total).max(1e-4);
                    processed += 1;
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let cin = center * dim;
                    epoch_loss += sgns_update(&input[cin..cin + dim], &mut output, context, 1.0, lr, &mut grad_in);
                    for _ in 0..config.negatives {
                        let u = rng.gen::<f64>() * acc;
                        let neg = cumulative.partition_point(|&c| c <= u).min(k - 1);
                        if neg == context {
                            continue;
                        }
                        epoch_loss += sgns_update(&input[cin..cin + dim], &mut output, neg, 0.0, lr, &mut grad_in);
                    }
                    for (x, g) in input[cin..cin + dim].iter_mut().zip(&grad_in) {
                        *x += g;
                    }
                }
            }
        }
        losses.push(if pairs_per_epoch == 0 { 0.0 } else { epoch_loss / pairs_per_epoch as f64 });
    }

    let vectors = input.chunks(dim).map(|c| c.iter().map(|&x| x as f32).collect()).collect();
    let table = EmbeddingTable::from_parts(dim, initial.pairs, vectors)?;
    Ok((table, losses))
}

/// One logistic update of `output[target]` against the center vector;
/// accumulates the center's gradient step into `grad_in` and returns the loss.
fn sgns_update(center: &[f64], output: &mut [f64], target: usize, label: f64, lr: f64, grad_in: &mut [f64]) -> f64 {
    let dim = center.len();
    let out = &mut output[target * dim..(target + 1) * dim];
    let score: f64 = center.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
    let p = sigmoid(score);
    let g = (label - p) * lr;
    for ((gi, o), c) in grad_in.iter_mut().zip(out.iter_mut()).zip(center) {
        *gi += g * *o;
        *o += g * c;
    }
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if label > 0.5 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn planted_corpus(seed: u64, bags_per_cluster: usize) -> Vec<AttributeSet> {
        // Cluster A: Rainy + Coat with sombre moods; cluster B: Sunny + Dress
        // with cheerful moods. Age and Gender are drawn independently.
        let schema = AttributeSchema::portrait_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ages = &schema.types()[0].values;
        let genders = &schema.types()[3].values;
        let mut bags = Vec::new();
        for i in 0..2 * bags_per_cluster {
            let rainy = i % 2 == 0;
            let mood = if rainy {
                ["Sad", "Calm"][rng.gen_range(0..2)]
            } else {
                ["Happy", "Excited"][rng.gen_range(0..2)]
            };
            bags.push(
                AttributeSet::new()
                    .with("Weather", if rainy { "Rainy" } else { "Sunny" })
                    .with("Clothing", if rainy { "Coat and Jacket" } else { "Dress" })
                    .with("Mood", mood)
                    .with("Age", ages[rng.gen_range(0..ages.len())].clone())
                    .with("Gender", genders[rng.gen_range(0..genders.len())].clone()),
            );
        }
        bags
    }

    #[test]
    fn planted_cooccurrence_is_reflected() {
        let schema = AttributeSchema::portrait_default();
        let corpus = AttributeBagCorpus::new(&schema, &planted_corpus(7, 200)).unwrap();
        let cfg = SkipGramConfig { epochs: 30, seed: 3, ..Default::default() };
        let table = train_embeddings(&corpus, &cfg).unwrap();
        let rainy = table.get("Weather", "Rainy").unwrap();
        let coat = table.get("Clothing", "Coat and Jacket").unwrap();
        let dress = table.get("Clothing", "Dress").unwrap();
        assert!(cosine(rainy, coat) > cosine(rainy, dress));
    }

    #[test]
    fn loss_trends_down_over_epoch_windows() {
        let schema = AttributeSchema::portrait_default();
        let corpus = AttributeBagCorpus::new(&schema, &planted_corpus(11, 200)).unwrap();
        let cfg = SkipGramConfig { epochs: 30, seed: 1, ..Default::default() };
        let (_, losses) = train_embeddings_traced(&corpus, &cfg).unwrap();
        let windows: Vec<f64> = losses.chunks(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        for pair in windows.windows(2) {
            assert!(pair[1] <= pair[0], "{windows:?}");
        }
    }

    #[test]
    fn single_assignment_corpus_returns_initial_table() {
        let schema = AttributeSchema::portrait_default();
        let corpus = AttributeBagCorpus::new(&schema, &[AttributeSet::new().with("Time", "After 1970")]).unwrap();
        let cfg = SkipGramConfig { epochs: 3, seed: 9, ..Default::default() };
        let (table, losses) = train_embeddings_traced(&corpus, &cfg).unwrap();
        assert_eq!(table, EmbeddingTable::initialized(&schema, 16, 9).unwrap());
        assert!(losses.iter().all(|&l| l == 0.0));
        let bound = 0.5 / 16.0;
        for (t, v) in table.pairs() {
            assert!(table.get(t, v).unwrap().iter().all(|x| x.abs() <= bound as f32));
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let schema = AttributeSchema::portrait_default();
        let corpus = AttributeBagCorpus::new(&schema, &planted_corpus(5, 30)).unwrap();
        let cfg = SkipGramConfig { epochs: 4, seed: 42, ..Default::default() };
        let a = train_embeddings(&corpus, &cfg).unwrap();
        let b = train_embeddings(&corpus, &cfg).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = train_embeddings(&corpus, &SkipGramConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let schema = AttributeSchema::portrait_default();
        let empty = AttributeBagCorpus::new(&schema, &[]).unwrap();
        assert!(matches!(
            train_embeddings(&empty, &SkipGramConfig::default()),
            Err(Error::Empty(_))
        ));
        let corpus = AttributeBagCorpus::new(&schema, &planted_corpus(1, 2)).unwrap();
        assert!(train_embeddings(&corpus, &SkipGramConfig { dim: 0, ..Default::default() }).is_err());
        assert!(AttributeBagCorpus::new(&schema, &[AttributeSet::new()]).is_err());
        assert!(AttributeBagCorpus::new(&schema, &[AttributeSet::new().with("Gender", "Robot")]).is_err());
    }

    #[test]
    fn embed_set_layout() {
        let schema = AttributeSchema::portrait_default();
        let table = EmbeddingTable::initialized(&schema, 16, 0).unwrap();
        let full: AttributeSet = schema
            .types()
            .iter()
            .map(|t| (t.name.clone(), t.values[1].clone()))
            .collect();
        let v = embed_set(&full, &table, &schema).unwrap();
        assert_eq!(v.len(), 176);
        let gender = schema.type_index("Gender").unwrap();
        assert_eq!(&v[gender * 16..(gender + 1) * 16], table.get("Gender", "Female").unwrap());

        let zero = embed_set(&AttributeSet::new(), &table, &schema).unwrap();
        assert_eq!(zero, vec![0.0; 176]);

        let a = AttributeSet::new().with("Mood", "Calm").with("Age", "Child");
        let mut b = AttributeSet::new();
        b.insert("Age", "Child");
        b.insert("Mood", "Calm");
        assert_eq!(embed_set(&a, &table, &schema).unwrap(), embed_set(&b, &table, &schema).unwrap());
    }

    #[test]
    fn embed_set_reports_missing_pair() {
        let schema = AttributeSchema::portrait_default();
        let toy = EmbeddingTable::initialized(&AttributeSchema::toy(), 4, 0).unwrap();
        assert!(matches!(
            embed_set(&AttributeSet::new().with("Mood", "Calm"), &toy, &schema),
            Err(Error::MissingEmbedding { .. })
        ));
        assert!(toy.covers(&schema).is_err());
    }

    #[test]
    fn file_roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let schema = AttributeSchema::toy();
        let table = EmbeddingTable::initialized(&schema, 8, 3).unwrap();
        let path = dir.path().join("emb.bin");
        table.save(&path).unwrap();
        assert_eq!(EmbeddingTable::load(&path).unwrap(), table);
        let sidecar = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(sidecar.contains("HairColor=Blond"));
        assert!(EmbeddingTable::load(dir.path().join("missing.bin")).is_err());
    }
}
