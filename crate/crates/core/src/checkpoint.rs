//! Named-parameter checkpoints and the `CPVK1` container format.
//!
//! Layout on disk:
//!
//! ```text
//! "CPVK1\n" | u64 LE index length | UTF-8 JSON index | raw f32 LE payload
//! ```
//!
//! The JSON index maps each tensor name to
//! `{"dtype":"f32","shape":[..],"offset":o,"nbytes":n}` with offsets relative
//! to the payload start, plus a `"__meta__"` object of string pairs. Keys are
//! sorted and the payload is laid out in key order with no gaps, so
//! re-saving a loaded checkpoint reproduces the file byte for byte. Swapping
//! the magic for a u64 header length gives a safetensors file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AlignmentConflict, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"CPVK1\n";
pub const META_KEY: &str = "__meta__";

/// Ordered map from parameter name to tensor, plus free-form provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set from `(name, tensor)` pairs, rejecting repeated names.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut p = Self::new();
        for (k, v) in entries {
            p.insert(k, v)?;
        }
        Ok(p)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == META_KEY {
            return Err(Error::Format(format!("{META_KEY} is a reserved name")));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateKey(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing tensor, keeping its name.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "replace",
                        left: slot.shape().to_vec(),
                        right: tensor.shape().to_vec(),
                    });
                }
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::Alignment(vec![AlignmentConflict::MissingLeft(
                name.to_string(),
            )])),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    /// SHA-256 over names, shapes and bit patterns; meta is not included.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same names, shapes and bit patterns (meta ignored).
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bits_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index: BTreeMap<String, serde_json::Value> = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let nbytes = t.numel() * 4;
            index.insert(
                name.clone(),
                serde_json::to_value(IndexEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes,
                })?,
            );
            offset += nbytes;
        }
        index.insert(META_KEY.into(), serde_json::to_value(&self.meta)?);
        let json = serde_json::to_vec(&index)?;

        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Format("bad magic".into()))?;
        if rest.len() < 8 {
            return Err(Error::Format("missing index length".into()));
        }
        let (len_bytes, rest) = rest.split_at(8);
        let index_len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        if index_len > rest.len() {
            return Err(Error::Format(format!(
                "index length {index_len} exceeds file size"
            )));
        }
        let (json, payload) = rest.split_at(index_len);
        let raw: RawIndex = serde_json::from_slice(json).map_err(|e| match e.classify() {
            serde_json::error::Category::Data
                if e.to_string().starts_with("duplicate key: ") =>
            {
                let msg = e.to_string();
                let name = msg
                    .trim_start_matches("duplicate key: ")
                    .split(" at line")
                    .next()
                    .unwrap_or_default()
                    .to_string();
                Error::DuplicateKey(name)
            }
            _ => Error::Format(format!("index: {e}")),
        })?;

        let mut meta = BTreeMap::new();
        let mut tensors: Vec<(String, IndexEntry)> = Vec::new();
        for (k, v) in raw.0 {
            if k == META_KEY {
                meta = serde_json::from_value(v)
                    .map_err(|e| Error::Format(format!("meta: {e}")))?;
            } else {
                let entry: IndexEntry = serde_json::from_value(v)
                    .map_err(|e| Error::Format(format!("entry {k}: {e}")))?;
                tensors.push((k, entry));
            }
        }

        tensors.sort_by_key(|(_, e)| e.offset);
        let mut cursor = 0usize;
        let mut entries = BTreeMap::new();
        for (name, e) in tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.nbytes != numel * 4 {
                return Err(Error::Format(format!(
                    "{name}: nbytes {} does not match shape {:?}",
                    e.nbytes, e.shape
                )));
            }
            if e.offset != cursor {
                return Err(Error::Format(format!(
                    "{name}: offset {} breaks contiguity (expected {cursor})",
                    e.offset
                )));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "{name}: payload truncated ({} < {end})",
                    payload.len()
                )));
            }
            let data: Vec<f32> = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if !opts.allow_nonfinite && data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            entries.insert(name, Tensor::new_allow_nonfinite(e.shape, data)?);
            cursor = end;
        }
        if cursor != payload.len() {
            return Err(Error::Format(format!(
                "payload has {} trailing bytes",
                payload.len() - cursor
            )));
        }
        Ok(ParamSet { entries, meta })
    }

    /// Writes the checkpoint through a temporary file and renames it in place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("cpvk.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, opts)
    }
}

/// Loader switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub allow_nonfinite: bool,
}

/// Convenience wrapper for [`ParamSet::load`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    ParamSet::load(path)
}

/// Convenience wrapper for [`ParamSet::save`].
pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    params.save(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

/// JSON object that refuses repeated keys instead of keeping the last one.
struct RawIndex(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawIndex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawIndex;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawIndex, A::Error> {
                let mut seen = BTreeSet::new();
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(de::Error::custom(format!("duplicate key: {k}")));
                    }
                    out.push((k, v));
                }
                Ok(RawIndex(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// How the key sets of two parameter sets relate.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KeyAlignment {
    pub shared: Vec<String>,
    /// Present on the right only.
    pub missing_left: Vec<String>,
    /// Present on the left only.
    pub missing_right: Vec<String>,
    pub shape_conflicts: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl KeyAlignment {
    pub fn is_exact(&self) -> bool {
        self.missing_left.is_empty()
            && self.missing_right.is_empty()
            && self.shape_conflicts.is_empty()
    }

    pub fn conflicts(&self) -> Vec<AlignmentConflict> {
        let mut out: Vec<AlignmentConflict> = self
            .shape_conflicts
            .iter()
            .map(|(n, l, r)| AlignmentConflict::Shape {
                name: n.clone(),
                left: l.clone(),
                right: r.clone(),
            })
            .collect();
        out.extend(
            self.missing_left
                .iter()
                .cloned()
                .map(AlignmentConflict::MissingLeft),
        );
        out.extend(
            self.missing_right
                .iter()
                .cloned()
                .map(AlignmentConflict::MissingRight),
        );
        out
    }

    /// `Ok` when both sides have identical keys and shapes.
    pub fn require_exact(&self) -> Result<()> {
        if self.is_exact() {
            Ok(())
        } else {
            Err(Error::Alignment(self.conflicts()))
        }
    }
}

pub fn align_keys(a: &ParamSet, b: &ParamSet) -> KeyAlignment {
    let mut al = KeyAlignment::default();
    for (name, ta) in a.iter() {
        match b.get(name) {
            Some(tb) if tb.shape() == ta.shape() => al.shared.push(name.clone()),
            Some(tb) => al.shape_conflicts.push((
                name.clone(),
                ta.shape().to_vec(),
                tb.shape().to_vec(),
            )),
            None => al.missing_right.push(name.clone()),
        }
    }
    al.missing_left = b.names().filter(|n| !a.contains(n)).cloned().collect();
    al
}

/// Keeps the entries whose name starts with any of `prefixes`.
pub fn select_keys(p: &ParamSet, prefixes: &[String]) -> Result<ParamSet> {
    let mut out = ParamSet::new().with_meta(p.meta.clone());
    for (name, t) in p.iter() {
        if matches_prefix(name, prefixes) {
            out.entries.insert(name.clone(), t.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySelection(prefixes.to_vec()));
    }
    let record = prefixes.join(",");
    let filters = match p.meta_value("filters") {
        Some(prev) => format!("{prev};{record}"),
        None => record,
    };
    out.set_meta("filters", filters);
    Ok(out)
}

pub(crate) fn matches_prefix(name: &str, prefixes: &[String]) -> bool {
    prefixes.iter().any(|pre| name.starts_with(pre.as_str()))
}
