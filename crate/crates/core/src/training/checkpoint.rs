use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::DtmiNet;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Parameters plus everything needed to continue training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: HashMap<String, Tensor>,
    pub adam_v: HashMap<String, Tensor>,
    pub rng: RngState,
    pub best_score: Option<f64>,
}

fn ckpt_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Configuration fields that determine the parameter layout.
pub fn architecture_mismatches(a: &RunConfig, b: &RunConfig) -> Vec<&'static str> {
    let mut out = Vec::new();
    let mut check = |name, same: bool| {
        if !same {
            out.push(name);
        }
    };
    check("input_size", a.input_size == b.input_size);
    check("patch_size", a.patch_size == b.patch_size);
    check("embed_dim", a.embed_dim == b.embed_dim);
    check("depths", a.depths == b.depths);
    check("num_heads", a.num_heads == b.num_heads);
    check("window_size", a.window_size == b.window_size);
    check("mlp_ratio", a.mlp_ratio == b.mlp_ratio);
    check("cmi_stages", a.cmi_stages == b.cmi_stages);
    check("cmi_blocks", a.cmi_blocks == b.cmi_blocks);
    check("decoder_width", a.decoder_width == b.decoder_width);
    check("variant", a.variant == b.variant);
    out
}

impl Checkpoint {
    /// Error unless `cfg` describes the same architecture as the stored config.
    pub fn check_config(&self, cfg: &RunConfig, path: &Path) -> Result<()> {
        let diff = architecture_mismatches(&self.config, cfg);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(ckpt_error(path, format!("config mismatch in {}", diff.join(", "))))
        }
    }

    /// Copy the stored parameters into `net`.
    pub fn apply(&self, net: &DtmiNet) -> Result<()> {
        let stored: HashMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if stored.len() != net.params().len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} parameter tensors, model has {}",
                stored.len(),
                net.params().len()
            )));
        }
        for (name, var) in net.params().iter() {
            let t = stored
                .get(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Snapshot of the current parameters of `net`.
pub fn snapshot_params(net: &DtmiNet) -> Result<Vec<(String, Tensor)>> {
    net.params()
        .iter()
        .map(|(n, v)| Ok((n.to_string(), v.as_tensor().detach().copy()?)))
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (n, t) in &ckpt.params {
        tensors.push((format!("{PARAM}{n}"), t.contiguous()?));
    }
    for (prefix, map) in [(ADAM_M, &ckpt.adam_m), (ADAM_V, &ckpt.adam_v)] {
        for (n, t) in map {
            tensors.push((format!("{prefix}{n}"), t.contiguous()?));
        }
    }
    let hex: String = ckpt.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
    let order: Vec<&str> = ckpt.params.iter().map(|(n, _)| n.as_str()).collect();
    let mut meta = HashMap::new();
    meta.insert("config".to_string(), ckpt.config.to_json_string());
    meta.insert("epoch".to_string(), ckpt.epoch.to_string());
    meta.insert("step".to_string(), ckpt.step.to_string());
    meta.insert("rng_seed".to_string(), hex);
    meta.insert("rng_stream".to_string(), ckpt.rng.stream.to_string());
    meta.insert("rng_word_pos".to_string(), ckpt.rng.word_pos.to_string());
    meta.insert("param_order".to_string(), serde_json::to_string(&order)?);
    if let Some(best) = ckpt.best_score {
        meta.insert("best_score".to_string(), format!("{best:e}"));
    }
    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    safetensors::serialize_to_file(tensors, Some(meta), &tmp).map_err(|e| ckpt_error(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn meta_field<'a>(meta: &'a HashMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| ckpt_error(path, format!("missing metadata field `{key}`")))
}

fn parse<T: std::str::FromStr>(s: &str, key: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| ckpt_error(path, format!("malformed metadata field `{key}`")))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_error(path, e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_error(path, "no metadata"))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device).map_err(|e| ckpt_error(path, e.to_string()))?;

    let config = RunConfig::from_json_str(meta_field(&meta, "config", path)?)
        .map_err(|e| ckpt_error(path, format!("stored config: {e}")))?;
    let hex = meta_field(&meta, "rng_seed", path)?;
    if hex.len() != 64 {
        return Err(ckpt_error(path, "malformed metadata field `rng_seed`"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| ckpt_error(path, "malformed metadata field `rng_seed`"))?;
    }
    let order: Vec<String> = serde_json::from_str(meta_field(&meta, "param_order", path)?)
        .map_err(|_| ckpt_error(path, "malformed metadata field `param_order`"))?;
    let mut params = Vec::with_capacity(order.len());
    for name in order {
        let t = tensors
            .get(&format!("{PARAM}{name}"))
            .ok_or_else(|| ckpt_error(path, format!("missing tensor for parameter {name}")))?;
        params.push((name, t.clone()));
    }
    let mut adam_m = HashMap::new();
    let mut adam_v = HashMap::new();
    for (key, t) in tensors {
        if let Some(n) = key.strip_prefix(ADAM_M) {
            adam_m.insert(n.to_string(), t);
        } else if let Some(n) = key.strip_prefix(ADAM_V) {
            adam_v.insert(n.to_string(), t);
        }
    }
    let best_score = match meta.get("best_score") {
        Some(s) => Some(parse::<f64>(s, "best_score", path)?),
        None => None,
    };
    Ok(Checkpoint {
        config,
        epoch: parse(meta_field(&meta, "epoch", path)?, "epoch", path)?,
        step: parse(meta_field(&meta, "step", path)?, "step", path)?,
        params,
        adam_m,
        adam_v,
        rng: RngState {
            seed,
            stream: parse(meta_field(&meta, "rng_stream", path)?, "rng_stream", path)?,
            word_pos: parse(meta_field(&meta, "rng_word_pos", path)?, "rng_word_pos", path)?,
        },
        best_score,
    })
}
