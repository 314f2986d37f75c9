//! Attribute universe: types, their legal values, and the canonical slot
//! layout used by one-hot encodings and attribute embeddings.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DEFAULT_SCHEMA: &str = include_str!("../data/default_schema.toml");
const TOY_SCHEMA: &str = include_str!("../data/toy_schema.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTypeSpec {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SchemaDocument {
    types: Vec<AttributeTypeSpec>,
}

/// Ordered attribute types. Document order is the canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    types: Vec<AttributeTypeSpec>,
    offsets: Vec<usize>,
}

/// A subject's attribute assignments, keyed by type name. Types may be left
/// unspecified.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeSet(BTreeMap<String, String>);

impl AttributeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, ty: impl Into<String>, value: impl Into<String>) -> Self {
        self.insert(ty, value);
        self
    }

    /// Sets `ty` to `value`, replacing any earlier assignment of the type.
    pub fn insert(&mut self, ty: impl Into<String>, value: impl Into<String>) -> Option<String> {
        self.0.insert(ty.into(), value.into())
    }

    pub fn remove(&mut self, ty: &str) -> Option<String> {
        self.0.remove(ty)
    }

    pub fn get(&self, ty: &str) -> Option<&str> {
        self.0.get(ty).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for AttributeSet {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

impl fmt::Display for AttributeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// Resolved value index per schema type, in schema order.
pub type Selection = Vec<Option<usize>>;

/// Real vector of length K laid out in schema slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotVector(pub Vec<f64>);

impl OneHotVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AttributeSchema {
    pub fn new(types: Vec<AttributeTypeSpec>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::MalformedSchema("no attribute types".into()));
        }
        let mut names = HashSet::new();
        for spec in &types {
            if spec.name.trim().is_empty() {
                return Err(Error::MalformedSchema("empty type name".into()));
            }
            if !names.insert(spec.name.as_str()) {
                return Err(Error::DuplicateType(spec.name.clone()));
            }
            let mut seen = HashSet::new();
            for value in &spec.values {
                if !seen.insert(value.as_str()) {
                    return Err(Error::DuplicateValue {
                        ty: spec.name.clone(),
                        value: value.clone(),
                    });
                }
            }
            if spec.values.len() < 2 {
                return Err(Error::TooFewValues(spec.name.clone()));
            }
        }
        let mut offsets = Vec::with_capacity(types.len());
        let mut acc = 0;
        for spec in &types {
            offsets.push(acc);
            acc += spec.values.len();
        }
        Ok(Self { types, offsets })
    }

    /// Parses a schema document, preserving type and value order.
    pub fn load(mut source: impl Read) -> Result<Self> {
        let mut text = String::new();
        source
            .read_to_string(&mut text)
            .map_err(|e| Error::MalformedSchema(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: SchemaDocument =
            toml::from_str(text).map_err(|e| Error::MalformedSchema(e.message().to_string()))?;
        Self::new(doc.types)
    }

    pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The bundled 11-type portrait schema.
    pub fn portrait_default() -> Self {
        Self::from_toml_str(DEFAULT_SCHEMA).expect("bundled schema is valid")
    }

    /// The 3-type schema of the procedural toy dataset.
    pub fn toy() -> Self {
        Self::from_toml_str(TOY_SCHEMA).expect("bundled toy schema is valid")
    }

    pub fn to_toml_string(&self) -> String {
        let doc = SchemaDocument {
            types: self.types.clone(),
        };
        toml::to_string(&doc).expect("schema serializes")
    }

    /// Hex SHA-256 over the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn types(&self) -> &[AttributeTypeSpec] {
        &self.types
    }

    pub fn type_count(&self) -> usize {
        self.types.len()
    }

    /// Total number of one-hot slots K.
    pub fn slot_count(&self) -> usize {
        self.types.iter().map(|t| t.values.len()).sum()
    }

    /// Value counts per type in schema order.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.types.iter().map(|t| t.values.len()).collect()
    }

    pub fn offset(&self, type_index: usize) -> usize {
        self.offsets[type_index]
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t.name == name)
    }

    pub fn value_index(&self, type_index: usize, value: &str) -> Option<usize> {
        self.types[type_index].values.iter().position(|v| v == value)
    }

    /// Global slot index of a (type, value) pair.
    pub fn slot(&self, ty: &str, value: &str) -> Result<usize> {
        let t = self
            .type_index(ty)
            .ok_or_else(|| Error::UnknownType(ty.to_string()))?;
        let v = self.value_index(t, value).ok_or_else(|| Error::UnknownValue {
            ty: ty.to_string(),
            value: value.to_string(),
        })?;
        Ok(self.offsets[t] + v)
    }

    /// Maps a global slot index back to its (type, value) names.
    pub fn slot_names(&self, slot: usize) -> Option<(&str, &str)> {
        let t = self.offsets.iter().rposition(|&o| o <= slot)?;
        let spec = &self.types[t];
        spec.values
            .get(slot - self.offsets[t])
            .map(|v| (spec.name.as_str(), v.as_str()))
    }

    /// Validates an attribute set and returns the value index for each type.
    pub fn resolve(&self, attrs: &AttributeSet) -> Result<Selection> {
        let mut selection = vec![None; self.types.len()];
        for (ty, value) in attrs.iter() {
            let t = self
                .type_index(ty)
                .ok_or_else(|| Error::UnknownType(ty.to_string()))?;
            let v = self.value_index(t, value).ok_or_else(|| Error::UnknownValue {
                ty: ty.to_string(),
                value: value.to_string(),
            })?;
            selection[t] = Some(v);
        }
        Ok(selection)
    }

    pub fn selection_to_set(&self, selection: &[Option<usize>]) -> AttributeSet {
        self.types
            .iter()
            .zip(selection)
            .filter_map(|(spec, sel)| sel.map(|v| (spec.name.clone(), spec.values[v].clone())))
            .collect()
    }

    pub fn encode_onehot(&self, attrs: &AttributeSet) -> Result<OneHotVector> {
        let selection = self.resolve(attrs)?;
        let mut bits = vec![0.0; self.slot_count()];
        for (t, sel) in selection.iter().enumerate() {
            if let Some(v) = sel {
                bits[self.offsets[t] + v] = 1.0;
            }
        }
        Ok(OneHotVector(bits))
    }

    /// Argmax readout per type block; ties go to the lowest slot.
    pub fn decode_onehot(&self, bits: &[f64]) -> Result<AttributeSet> {
        let selection = self.argmax_selection(bits)?;
        Ok(self.selection_to_set(&selection))
    }

    pub fn argmax_selection(&self, bits: &[f64]) -> Result<Selection> {
        if bits.len() != self.slot_count() {
            return Err(Error::LengthMismatch {
                expected: self.slot_count(),
                actual: bits.len(),
            });
        }
        Ok(self
            .types
            .iter()
            .enumerate()
            .map(|(t, spec)| {
                let block = &bits[self.offsets[t]..self.offsets[t] + spec.values.len()];
                let mut best = 0;
                for (i, &x) in block.iter().enumerate() {
                    if x > block[best] {
                        best = i;
                    }
                }
                Some(best)
            })
            .collect())
    }

    /// Finds a type by name, ignoring case, spaces and underscores.
    pub fn find_type_loose(&self, name: &str) -> Option<&AttributeTypeSpec> {
        let want = normalize(name);
        self.types.iter().find(|t| normalize(&t.name) == want)
    }

    /// Builds an attribute set from shell-friendly `type=value` strings where
    /// underscores stand in for spaces.
    pub fn parse_assignment(&self, text: &str) -> Result<(String, String)> {
        let (ty, value) = text.split_once('=').ok_or_else(|| {
            Error::MalformedSchema(format!("attribute `{text}` must have the form type=value"))
        })?;
        let spec = self
            .find_type_loose(ty)
            .ok_or_else(|| Error::UnknownType(ty.to_string()))?;
        let want = normalize(value);
        let value = spec
            .values
            .iter()
            .find(|v| normalize(v) == want)
            .ok_or_else(|| Error::UnknownValue {
                ty: spec.name.clone(),
                value: value.to_string(),
            })?;
        Ok((spec.name.clone(), value.clone()))
    }
}

fn normalize(name: &str) -> String {
    name.chars().filter(|c| !c.is_whitespace() && *c != '_').flat_map(char::to_lowercase).collect()
}
