//! Checkpoint directories.
//!
//! ```text
//! manifest.json  format version, schema hash, counters, configs, λ values
//! schema.toml    the schema the model was trained with
//! params.bin     archive (width 0) of named arrays:
//!                generator/…, discriminator/…, opt_g/{m,v}/…, opt_d/{m,v}/…
//! ```
//!
//! The model id is the SHA-256 of `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{read_archive, write_archive, Record};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::LossWeights;
use crate::nn::{Adam, Params};
use crate::schema::AttributeSchema;
use crate::training::{ModelState, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub schema_hash: String,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub opt_g_steps: u64,
    pub opt_d_steps: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub schema: AttributeSchema,
    pub state: ModelState,
    pub model_id: String,
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

fn push_params<P: Params<f32>>(records: &mut Vec<Record>, prefix: &str, p: &P) {
    for (name, t) in p.named_tensors(prefix) {
        records.push(Record { key: name, sub: shape_string(t.shape()), values: t.iter().copied().collect() });
    }
}

fn push_moments<P: Params<f32>>(records: &mut Vec<Record>, prefix: &str, p: &P, opt: &Adam<f32>) {
    let names = p.named_tensors("");
    for (kind, moments) in [("m", &opt.first), ("v", &opt.second)] {
        for ((name, _), t) in names.iter().zip(moments) {
            records.push(Record {
                key: format!("{prefix}/{kind}/{name}"),
                sub: shape_string(t.shape()),
                values: t.iter().copied().collect(),
            });
        }
    }
}

fn model_id(manifest_bytes: &[u8]) -> String {
    Sha256::digest(manifest_bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `dir` (created if needed) and returns the model id.
pub fn save_checkpoint(
    state: &ModelState,
    config: &TrainConfig,
    schema: &AttributeSchema,
    dir: impl AsRef<Path>,
) -> Result<String> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        schema_hash: schema.hash(),
        epoch: state.epoch,
        step: state.step,
        seed: config.seed,
        weights: config.weights,
        opt_g_steps: state.opt_g.steps,
        opt_d_steps: state.opt_d.steps,
        generator: state.generator.config.clone(),
        discriminator: state.discriminator.config.clone(),
        train: config.clone(),
    };
    let mut records = Vec::new();
    push_params(&mut records, "generator/", &state.generator);
    push_params(&mut records, "discriminator/", &state.discriminator);
    push_moments(&mut records, "opt_g", &state.generator, &state.opt_g);
    push_moments(&mut records, "opt_d", &state.discriminator, &state.opt_d);
    let mut params = Vec::new();
    write_archive(&mut params, 0, &records)?;
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write("params.bin", &params)?;
    write("schema.toml", schema.to_toml_string().as_bytes())?;
    write("manifest.json", &manifest_bytes)?;
    Ok(model_id(&manifest_bytes))
}

struct RecordSource {
    records: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl RecordSource {
    fn take(&mut self, key: &str, shape: &[usize]) -> Result<ArrayD<f32>> {
        let (found, values) = self
            .records
            .remove(key)
            .ok_or_else(|| Error::Archive(format!("checkpoint has no tensor `{key}`")))?;
        if found != shape {
            return Err(Error::ShapeMismatch { expected: shape.to_vec(), actual: found });
        }
        ArrayD::from_shape_vec(IxDyn(shape), values).map_err(|e| Error::Archive(e.to_string()))
    }

    fn fill<P: Params<f32>>(&mut self, prefix: &str, p: &mut P) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> =
            p.named_tensors(prefix).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for ((name, shape), mut dst) in names.into_iter().zip(p.tensors_mut()) {
            dst.assign(&self.take(&name, &shape)?);
        }
        Ok(())
    }

    fn moments<P: Params<f32>>(&mut self, prefix: &str, p: &P, opt: &mut Adam<f32>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> =
            p.named_tensors("").into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        opt.first = names.iter().map(|(n, s)| self.take(&format!("{prefix}/m/{n}"), s)).collect::<Result<_>>()?;
        opt.second = names.iter().map(|(n, s)| self.take(&format!("{prefix}/v/{n}"), s)).collect::<Result<_>>()?;
        Ok(())
    }
}

fn read_file(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected`, refuses one trained on another
/// schema.
pub fn load_checkpoint(dir: impl AsRef<Path>, expected: Option<&AttributeSchema>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest_bytes = read_file(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: manifest.format_version });
    }
    let schema = AttributeSchema::from_toml_str(
        std::str::from_utf8(&read_file(dir.join("schema.toml"))?)
            .map_err(|_| Error::MalformedSchema("schema.toml is not UTF-8".into()))?,
    )?;
    if schema.hash() != manifest.schema_hash {
        return Err(Error::SchemaMismatch { expected: manifest.schema_hash.clone(), found: schema.hash() });
    }
    if let Some(exp) = expected {
        if exp.hash() != manifest.schema_hash {
            return Err(Error::SchemaMismatch { expected: exp.hash(), found: manifest.schema_hash.clone() });
        }
    }
    let (_, records) = read_archive(read_file(dir.join("params.bin"))?.as_slice())?;
    let mut source = RecordSource { records: Default::default() };
    for r in records {
        let shape = parse_shape(&r.sub).ok_or_else(|| Error::Archive(format!("bad shape `{}`", r.sub)))?;
        source.records.insert(r.key, (shape, r.values));
    }
    let mut generator = Generator::<f32>::new(manifest.generator.clone(), 0)?;
    let mut discriminator = Discriminator::<f32>::new(manifest.discriminator.clone(), 0)?;
    source.fill("generator/", &mut generator)?;
    source.fill("discriminator/", &mut discriminator)?;
    let t = &manifest.train;
    let mut opt_g = Adam::new(&generator, t.lr_g(), t.adam_beta1, t.adam_beta2);
    let mut opt_d = Adam::new(&discriminator, t.lr_d(), t.adam_beta1, t.adam_beta2);
    source.moments("opt_g", &generator, &mut opt_g)?;
    source.moments("opt_d", &discriminator, &mut opt_d)?;
    opt_g.steps = manifest.opt_g_steps;
    opt_d.steps = manifest.opt_d_steps;
    if let Some(extra) = source.records.keys().next() {
        return Err(Error::Archive(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    let state = ModelState { generator, discriminator, opt_g, opt_d, epoch: manifest.epoch, step: manifest.step };
    Ok(Checkpoint { manifest, schema, state, model_id: model_id(&manifest_bytes) })
}
