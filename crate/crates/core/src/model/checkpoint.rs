//! Checkpoint files.
//!
//! ```text
//! hytrec-checkpoint 1
//! config = {"vocab_size":20,...}
//! meta.epoch = 3
//! tensor item_embedding 20x8 0 1280
//! tensor adam.m.item_embedding 20x8 1280 1280
//! end
//! <payload: little-endian f64, byte offsets relative to the payload start>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::model::config::ModelConfig;
use crate::model::network::HyTRecModel;
use crate::params::ParamStore;

const MAGIC: &str = "hytrec-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Non-parameter tensors such as optimizer moments.
    pub extra: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &HyTRecModel) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            extra: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_model(&self) -> Result<HyTRecModel> {
        let mut model = HyTRecModel::new(self.config.clone(), 0)?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }

    /// Refuses a checkpoint whose architecture differs from `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if &self.config != config {
            let a = serde_json::to_value(&self.config).map_err(|e| bad(e.to_string()))?;
            let b = serde_json::to_value(config).map_err(|e| bad(e.to_string()))?;
            let diffs: Vec<String> = a
                .as_object()
                .into_iter()
                .flatten()
                .filter(|(k, v)| b.get(k.as_str()) != Some(v))
                .map(|(k, v)| format!("{k}: checkpoint {v}, config {}", b.get(k.as_str()).cloned().unwrap_or_default()))
                .collect();
            return Err(bad(format!("checkpoint does not match the model config ({})", diffs.join("; "))));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        let cfg = serde_json::to_string(&self.config).map_err(|e| bad(e.to_string()))?;
        header.push_str(&format!("config = {cfg}\n"));
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("meta entry {k:?} cannot be stored")));
            }
            header.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut payload = Vec::new();
        let tensors = self.params.iter().map(|(_, n, t)| (n, t)).chain(self.extra.iter().map(|(n, t)| (n.as_str(), t)));
        for (name, t) in tensors {
            if name.contains(char::is_whitespace) {
                return Err(bad(format!("tensor name {name:?} contains whitespace")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let len = t.len() * 8;
            header.push_str(&format!("tensor {name} {} {} {len}\n", dims.join("x"), payload.len()));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))
        };
        let first = next_line()?;
        if first != format!("{MAGIC} {VERSION}") {
            return Err(bad(format!("unsupported checkpoint header {first:?}")));
        }
        let mut config = None;
        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("malformed manifest line {line:?}")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                let offset: usize = f[2].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                let len: usize = f[3].parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
                manifest.push((f[0].to_string(), shape, offset, len));
            } else if let Some((k, v)) = line.split_once(" = ") {
                if k == "config" {
                    config = Some(serde_json::from_str::<ModelConfig>(v).map_err(|e| bad(format!("config: {e}")))?);
                } else if let Some(k) = k.strip_prefix("meta.") {
                    meta.insert(k.to_string(), v.to_string());
                } else {
                    return Err(bad(format!("unknown header key {k:?}")));
                }
            } else {
                return Err(bad(format!("malformed header line {line:?}")));
            }
        }
        let payload = &bytes[pos..];
        let config = config.ok_or_else(|| bad("missing config"))?;
        let expected = HyTRecModel::new(config.clone(), 0)?;
        let n_params = expected.params().len();
        let mut params = ParamStore::new();
        let mut extra = Vec::new();
        for (i, (name, shape, offset, len)) in manifest.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            if len != n * 8 || offset + len > payload.len() {
                return Err(bad(format!("tensor {name} has inconsistent extent")));
            }
            let data = payload[offset..offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if i < n_params {
                params.add(name, t)?;
            } else {
                extra.push((name, t));
            }
        }
        let mut check = expected;
        check.load_params(params.clone())?;
        Ok(Checkpoint {
            config,
            params,
            extra,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}
