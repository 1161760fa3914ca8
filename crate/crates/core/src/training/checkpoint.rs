//! Binary checkpoints and JSON-lines training history.
//!
//! Checkpoint layout, integers little-endian:
//!
//! ```text
//! magic     8  "FRNCKPT\0"
//! version   u32
//! precision u32   evaluation precision tag (1 = f32, 2 = f64)
//! head      u32   1 frn, 2 proto, 3 dsn, 4 ctx
//! step      u64   optimizer steps taken
//! seed      u64   run seed
//! hash      u32 length + UTF-8 config hash
//! rng       32-byte seed, u64 stream, u128 word position (ChaCha8)
//! settings  u32 length + UTF-8 JSON of the non-tensor model settings
//! tensors   u32 count, then per tensor:
//!           u32 name length + UTF-8 name, u32 rank, u32 dims, f64 payload
//! crc       u32 CRC32 of everything before it
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{CtxParams, ProjectionConfig};
use crate::error::{Error, Result};
use crate::frn::{FormulationChoice, LearnableMask};
use crate::heads::HeadKind;
use crate::linalg::{Matrix, Precision};

use super::meta::HistoryEntry;
use super::model::{EmbeddingModel, HeadState, ParamSet, TrainedModel, EMBED_WEIGHT};

pub const MAGIC: &[u8; 8] = b"FRNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
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

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub config_hash: String,
    pub rng: RngState,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Settings {
    formulation: FormulationChoice,
    output_scale: f64,
    learnable: Option<LearnableMask>,
    projection: Option<ProjectionConfig>,
    ctx_identity: Option<bool>,
}

fn settings(model: &TrainedModel) -> Settings {
    let mut s = Settings {
        formulation: model.formulation,
        output_scale: model.embedding.output_scale,
        learnable: None,
        projection: None,
        ctx_identity: None,
    };
    match &model.head {
        HeadState::Frn { params } => s.learnable = Some(params.learnable),
        HeadState::Dsn { cfg, .. } => s.projection = Some(*cfg),
        HeadState::Ctx { params, .. } => s.ctx_identity = Some(params.identity_mode),
        HeadState::Proto { .. } => {}
    }
    s
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, ck.model.precision.tag());
    put_u32(&mut out, ck.model.kind().tag());
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    put_str(&mut out, &ck.config_hash);
    out.extend_from_slice(&ck.rng.seed);
    out.extend_from_slice(&ck.rng.stream.to_le_bytes());
    out.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    put_str(&mut out, &serde_json::to_string(&settings(&ck.model))?);
    let params = ck.model.params();
    put_u32(&mut out, params.len() as u32);
    for (name, m) in &params {
        put_str(&mut out, name);
        put_u32(&mut out, 2);
        put_u32(&mut out, m.rows() as u32);
        put_u32(&mut out, m.cols() as u32);
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.at;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 at byte {at}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: &bytes[..body],
        at: 8,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let tag = r.u32()?;
    let precision = Precision::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown precision tag {tag}")))?;
    let tag = r.u32()?;
    let kind = HeadKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown head tag {tag}")))?;
    let step = r.u64()?;
    let seed_value = r.u64()?;
    let config_hash = r.string()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let settings: Settings = serde_json::from_str(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}, expected 2")));
        }
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_vec_checked(rows, cols, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        params.insert(name, m);
    }
    if r.at != body {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body - r.at)));
    }
    let weight = params
        .get(EMBED_WEIGHT)
        .ok_or_else(|| Error::Checkpoint("missing embedding weight".into()))?;
    let (d_in, d) = weight.shape();
    let mut head = HeadState::initial(kind, d);
    match &mut head {
        HeadState::Frn { params } => params.learnable = settings.learnable.unwrap_or_default(),
        HeadState::Dsn { cfg, .. } => *cfg = settings.projection.unwrap_or_default(),
        HeadState::Ctx { params, .. } if settings.ctx_identity == Some(true) => *params = CtxParams::identity(d),
        _ => {}
    }
    if let HeadState::Ctx { params: ctx, .. } = &mut head {
        // Projection widths come from the stored tensors.
        if let (Some(k), Some(v)) = (params.get(super::model::CTX_KEY), params.get(super::model::CTX_VALUE)) {
            *ctx = CtxParams::new(k.clone(), v.clone())?;
        }
    }
    let mut embedding = EmbeddingModel::identity(d_in, d);
    embedding.output_scale = settings.output_scale;
    let mut model = TrainedModel::new(embedding, head);
    model.formulation = settings.formulation;
    model.precision = precision;
    model.set_params(&params)?;
    Ok(Checkpoint {
        model,
        config_hash,
        rng: RngState { seed, stream, word_pos },
        step,
        seed: seed_value,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

pub fn write_history(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for h in history {
        writeln!(f, "{}", serde_json::to_string(h)?)?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryEntry>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
