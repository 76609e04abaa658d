//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDXT" | u32 version
//! u64 len + UTF-8   model config (JSON)
//! u64 len + UTF-8   encoder vocabulary (one token per line)
//! u64 len + UTF-8   decoder vocabulary
//! u64 len + UTF-8   training state (JSON)
//! u32 entry count, then per entry:
//!     u32 len + UTF-8 name | u8 dtype (0 = f32) | u32 rank | u64 dims.. | u64 offset
//! raw f32 arrays; offsets count from the first byte after the table
//! ```
//!
//! Parameters are stored under their model names; Adam moments under
//! `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use ddxt_core::model::{ModelConfig, ModelParams};
use ddxt_core::optim::AdamState;
use ddxt_core::train::Optimizer;
use ddxt_core::vocab::Vocabulary;
use ddxt_core::{Rng, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab_file;

pub const MAGIC: &[u8; 4] = b"DDXT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Generator position, enough to resume the exact random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<Rng, String> {
        if self.seed.len() != 64 {
            return Err("rng seed must be 64 hex digits".into());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| "bad rng word position".to_string())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u32,
    pub best_val_loss: Option<f64>,
    pub rng: Option<RngState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub enc_vocab: Vocabulary,
    pub dec_vocab: Vocabulary,
    pub optimizer: Option<Optimizer<f32>>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut arrays: Vec<(String, &Tensor<f32>)> = ck.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    let mut moments: Vec<(String, Tensor<f32>)> = Vec::new();
    if let Some(opt) = &ck.optimizer {
        for ((name, t), st) in ck.params.iter().zip(&opt.states) {
            let m = Tensor::new(t.shape().to_vec(), st.m.clone()).expect("moment shape");
            let v = Tensor::new(t.shape().to_vec(), st.v.clone()).expect("moment shape");
            moments.push((format!("adam.m.{name}"), m));
            moments.push((format!("adam.v.{name}"), v));
        }
    }
    arrays.extend(moments.iter().map(|(n, t)| (n.clone(), t)));

    let mut state = serde_json::to_value(&ck.state).expect("state json");
    if let Some(opt) = &ck.optimizer {
        let s = &opt.states[0];
        state["adam"] = serde_json::json!({ "t": s.t, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps });
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_block(&mut out, serde_json::to_string(ck.config()).expect("config json").as_bytes());
    put_block(&mut out, vocab_file::to_text(&ck.enc_vocab).as_bytes());
    put_block(&mut out, vocab_file::to_text(&ck.dec_vocab).as_bytes());
    put_block(&mut out, state.to_string().as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in &arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, len: u64) -> std::result::Result<&'a str, String> {
        let len = usize::try_from(len).map_err(|_| "block too large")?;
        std::str::from_utf8(self.take(len)?).map_err(|e| format!("invalid UTF-8: {e}"))
    }

    fn block(&mut self) -> std::result::Result<&'a str, String> {
        let len = self.u64()?;
        self.text(len)
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn from_bytes(path: &Path, buf: &[u8]) -> Result<Checkpoint> {
    let fail = |msg: String| Error::format(path, msg);
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(fail)? != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig =
        serde_json::from_str(r.block().map_err(fail)?).map_err(|e| fail(format!("model config: {e}")))?;
    config.validate()?;
    let enc_vocab = vocab_file::from_text(path, r.block().map_err(fail)?)?;
    let dec_vocab = vocab_file::from_text(path, r.block().map_err(fail)?)?;
    let state_json: serde_json::Value =
        serde_json::from_str(r.block().map_err(fail)?).map_err(|e| fail(format!("training state: {e}")))?;
    let state: TrainState =
        serde_json::from_value(state_json.clone()).map_err(|e| fail(format!("training state: {e}")))?;

    let n = r.u32().map_err(fail)? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32().map_err(fail)?;
        let name = r.text(len as u64).map_err(fail)?.to_string();
        let dtype = r.u8().map_err(fail)?;
        if dtype != DTYPE_F32 {
            return Err(fail(format!("{name}: unsupported dtype code {dtype}")));
        }
        let rank = r.u32().map_err(fail)?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        let offset = r.u64().map_err(fail)? as usize;
        entries.push(Entry { name, shape, offset });
    }
    let data = &buf[r.pos..];
    let mut expected = 0usize;
    let mut arrays = Vec::with_capacity(entries.len());
    for e in entries {
        let count: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(fail(format!("{}: offset {} out of order", e.name, e.offset)));
        }
        let end = e.offset + 4 * count;
        let bytes = data.get(e.offset..end).ok_or_else(|| fail("truncated file".into()))?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(e.shape, values).map_err(|err| fail(format!("{}: {err}", e.name)))?;
        arrays.push((e.name, t));
        expected = end;
    }
    if expected != data.len() {
        return Err(fail(format!("{} trailing bytes", data.len() - expected)));
    }

    let n_params = arrays.iter().take_while(|(n, _)| !n.starts_with("adam.")).count();
    if arrays.len() != n_params && arrays.len() != 3 * n_params {
        return Err(fail(format!(
            "{} arrays, expected {n_params} parameters with or without optimizer moments",
            arrays.len()
        )));
    }
    let moments = arrays.split_off(n_params);
    let params = ModelParams::from_named(&config, arrays).map_err(|e| fail(e.to_string()))?;
    if enc_vocab.len() != config.enc_vocab_size || dec_vocab.len() != config.dec_vocab_size {
        return Err(fail("vocabulary sizes disagree with the model config".into()));
    }
    let optimizer = if moments.is_empty() {
        None
    } else {
        let adam = &state_json["adam"];
        let t = adam["t"].as_u64().ok_or_else(|| fail("missing adam step count".into()))?;
        let hyper = |k: &str| adam[k].as_f64().ok_or_else(|| fail(format!("missing adam {k}")));
        let (b1, b2, eps) = (hyper("beta1")?, hyper("beta2")?, hyper("eps")?);
        let mut states = Vec::with_capacity(n_params);
        for (i, (name, p)) in params.iter().enumerate() {
            let (mn, m) = &moments[2 * i];
            let (vn, v) = &moments[2 * i + 1];
            if *mn != format!("adam.m.{name}") || *vn != format!("adam.v.{name}") || m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(fail(format!("optimizer moments for {name} are missing or misshapen")));
            }
            let mut st = AdamState::with_hyper(p.numel(), b1, b2, eps);
            st.m = m.data().to_vec();
            st.v = v.data().to_vec();
            st.t = t;
            states.push(st);
        }
        Some(Optimizer { states })
    };
    Ok(Checkpoint {
        params,
        enc_vocab,
        dec_vocab,
        optimizer,
        state,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, to_bytes(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &buf)
}
