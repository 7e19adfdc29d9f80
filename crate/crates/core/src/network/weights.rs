//! Named parameter storage, the parameter schema of a variant, and the
//! `.manifest` / `.bin` file pair.
//!
//! The manifest has one UTF-8 line per parameter, `name dim... offset`,
//! where `offset` is the byte offset of the parameter in the payload. The
//! payload is the concatenation of all parameters as little-endian `f32`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::spec::{ConvType, VariantSpec, STAGES};
use crate::attention::RelPosBias;
use crate::error::{Error, Result};
use crate::rng::{fill_trunc_normal, seeded};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// One entry of a variant's parameter schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct SchemaBuilder(Vec<ParamSpec>);

impl SchemaBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn dense(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.push(format!("{prefix}.weight"), vec![cin, cout], Init::TruncNormal);
        self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, k: usize, cin_per_group: usize, cout: usize) {
        self.push(format!("{prefix}.weight"), vec![k, k, cin_per_group, cout], Init::TruncNormal);
        self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{}.block{}", stage + 1, block)
}

/// Every parameter of `spec`, in declaration (and initialization) order.
pub fn schema(spec: &VariantSpec) -> Vec<ParamSpec> {
    let d = spec.dims;
    let mut s = SchemaBuilder(Vec::new());
    s.conv("embed", 3, 3, d[0]);
    for stage in 0..STAGES {
        match stage {
            1 => s.conv("down1", 3, d[0], d[1]),
            2 => s.conv("down2", 3, d[1], d[2]),
            3 => {
                s.dense("up1", d[2], 4 * d[3]);
                sk_schema(&mut s, "fusion1", d[1], d[3], spec.sk_reduction);
            }
            4 => {
                s.dense("up2", d[3], 4 * d[4]);
                sk_schema(&mut s, "fusion2", d[0], d[4], spec.sk_reduction);
            }
            _ => {}
        }
        let c = d[stage];
        for block in 0..spec.depths[stage] {
            let p = block_prefix(stage, block);
            let attn = spec.block_has_attention(stage, block);
            if attn {
                s.push(format!("{p}.norm.scale"), vec![c], Init::Ones);
                s.push(format!("{p}.norm.shift"), vec![c], Init::Zeros);
                s.push(format!("{p}.norm.w_gamma"), vec![c], Init::Zeros);
                s.push(format!("{p}.norm.b_gamma"), vec![c], Init::Ones);
                s.push(format!("{p}.norm.w_beta"), vec![c], Init::Zeros);
                s.push(format!("{p}.norm.b_beta"), vec![c], Init::Zeros);
                s.dense(&format!("{p}.attn.qkv"), c, 3 * c);
                let span = 2 * spec.window - 1;
                s.push(
                    format!("{p}.attn.rel_bias"),
                    vec![span * span, spec.heads[stage]],
                    Init::TruncNormal,
                );
            } else {
                s.dense(&format!("{p}.attn.v"), c, c);
            }
            match spec.conv {
                ConvType::DwConv => s.conv(&format!("{p}.attn.conv"), 5, 1, c),
                ConvType::ConvBlock => {
                    s.conv(&format!("{p}.attn.conv1"), 3, c, c);
                    s.conv(&format!("{p}.attn.conv2"), 3, c, c);
                }
            }
            s.dense(&format!("{p}.attn.proj"), c, c);
            let hidden = c * spec.mlp_ratios[stage];
            s.dense(&format!("{p}.mlp.fc1"), c, hidden);
            s.dense(&format!("{p}.mlp.fc2"), hidden, c);
        }
    }
    s.conv("head", 3, d[4], 4);
    debug_assert_eq!(
        s.0.iter()
            .filter(|p| p.name.ends_with("rel_bias"))
            .map(|p| p.len())
            .sum::<usize>(),
        (0..STAGES)
            .map(|st| spec.attention_blocks(st) * RelPosBias::table_len(spec.window, spec.heads[st]))
            .sum::<usize>()
    );
    s.0
}

fn sk_schema(s: &mut SchemaBuilder, prefix: &str, c_skip: usize, c: usize, reduction: usize) {
    s.dense(&format!("{prefix}.proj"), c_skip, c);
    s.dense(&format!("{prefix}.squeeze"), c, c / reduction);
    s.dense(&format!("{prefix}.expand"), c / reduction, 2 * c);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered name → parameter map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    params: IndexMap<String, Param>,
}

fn sibling(base: &Path, ext: &str) -> PathBuf {
    let mut s = OsString::from(base.as_os_str());
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn manifest_path(base: &Path) -> PathBuf {
    sibling(base, "manifest")
}

pub fn payload_path(base: &Path) -> PathBuf {
    sibling(base, "bin")
}

impl WeightStore {
    /// Deterministically initialized weights for `spec`.
    pub fn init(spec: &VariantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let mut params = IndexMap::new();
        for p in schema(spec) {
            let mut data = vec![0.0f32; p.len()];
            match p.init {
                Init::TruncNormal => fill_trunc_normal(&mut rng, INIT_STD, &mut data),
                Init::Zeros => {}
                Init::Ones => data.fill(1.0),
            }
            params.insert(p.name, Param { shape: p.shape, data });
        }
        Ok(Self { params })
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.data.fill(0.0);
            }
        }
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let mut offset = 0usize;
        for (name, p) in &self.params {
            out.push_str(name);
            for d in &p.shape {
                let _ = write!(out, " {d}");
            }
            let _ = writeln!(out, " {offset}");
            offset += p.data.len() * 4;
        }
        out
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.element_count() * 4);
        for p in self.params.values() {
            for v in &p.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Writes `<base>.manifest` and `<base>.bin`.
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        fs::write(manifest_path(base), self.manifest())?;
        fs::write(payload_path(base), self.payload())?;
        Ok(())
    }

    /// Reads `<base>.manifest` / `<base>.bin` and checks them against `spec`.
    pub fn load(base: impl AsRef<Path>, spec: &VariantSpec) -> Result<Self> {
        let base = base.as_ref();
        let manifest = fs::read_to_string(manifest_path(base))?;
        let payload = fs::read(payload_path(base))?;
        Self::from_parts(&manifest, &payload, spec)
    }

    pub fn from_parts(manifest: &str, payload: &[u8], spec: &VariantSpec) -> Result<Self> {
        let expected: IndexMap<String, ParamSpec> = schema(spec)
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        let mut params = IndexMap::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 2 {
                return Err(Error::format("manifest", format!("line {}: `{line}`", lineno + 1)));
            }
            let name = fields[0];
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format("manifest", format!("line {}: non-numeric field", lineno + 1)))?;
            let (offset, shape) = nums.split_last().expect("at least one number");
            let want = expected
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if shape != want.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: want.shape.clone(),
                    found: shape.to_vec(),
                });
            }
            let len = want.len();
            let end = offset + len * 4;
            if end > payload.len() {
                return Err(Error::Truncated {
                    expected: end,
                    found: payload.len(),
                });
            }
            let data = payload[*offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if params
                .insert(name.to_string(), Param { shape: shape.to_vec(), data })
                .is_some()
            {
                return Err(Error::format("manifest", format!("duplicate parameter `{name}`")));
            }
        }
        if let Some(missing) = expected.keys().find(|k| !params.contains_key(*k)) {
            return Err(Error::MissingParam(missing.clone()));
        }
        // keep declaration order regardless of manifest order
        let params = expected
            .keys()
            .map(|k| {
                let p = params.swap_remove(k).expect("checked above");
                (k.clone(), p)
            })
            .collect();
        Ok(Self { params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_names_unique() {
        for name in VariantSpec::NAMES {
            let spec = VariantSpec::named(name).unwrap();
            let s = schema(&spec);
            let unique: std::collections::HashSet<_> = s.iter().map(|p| &p.name).collect();
            assert_eq!(unique.len(), s.len(), "{name}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = VariantSpec::named("T").unwrap();
        let a = WeightStore::init(&spec, 3).unwrap();
        let b = WeightStore::init(&spec, 3).unwrap();
        assert_eq!(a.payload(), b.payload());
        assert_eq!(a.manifest(), b.manifest());
        let c = WeightStore::init(&spec, 4).unwrap();
        assert_ne!(a.payload(), c.payload());
    }

    #[test]
    fn rescale_init_values() {
        let spec = VariantSpec::named("T").unwrap();
        let w = WeightStore::init(&spec, 0).unwrap();
        let p = block_prefix(0, 3);
        assert!(w.get(&format!("{p}.norm.b_gamma")).unwrap().data.iter().all(|&v| v == 1.0));
        assert!(w.get(&format!("{p}.norm.w_gamma")).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(w.get(&format!("{p}.norm.b_beta")).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(w.get(&format!("{}.norm.scale", block_prefix(0, 2))).is_err());
    }

    #[test]
    fn manifest_offsets() {
        let spec = VariantSpec::named("T").unwrap();
        let w = WeightStore::init(&spec, 0).unwrap();
        let m = w.manifest();
        let mut lines = m.lines();
        assert_eq!(lines.next().unwrap(), "embed.weight 3 3 3 24 0");
        assert_eq!(lines.next().unwrap(), "embed.bias 24 2592");
        assert_eq!(w.payload().len(), w.element_count() * 4);
    }

    #[test]
    fn out_of_order_manifest_loads_in_declaration_order() {
        let spec = VariantSpec::named("T").unwrap();
        let w = WeightStore::init(&spec, 0).unwrap();
        let manifest: String = w.manifest().lines().rev().map(|l| format!("{l}\n")).collect();
        let back = WeightStore::from_parts(&manifest, &w.payload(), &spec).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn missing_parameter() {
        let spec = VariantSpec::named("T").unwrap();
        let w = WeightStore::init(&spec, 0).unwrap();
        let manifest: String = w.manifest().lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            WeightStore::from_parts(&manifest, &w.payload(), &spec),
            Err(Error::MissingParam(n)) if n == "embed.weight"
        ));
    }
}
