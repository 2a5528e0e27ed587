//! Binary checkpoint formats. Every integer and float is little-endian and
//! strings are a `u32` byte length followed by UTF-8.
//!
//! Language model (`WLMC`): magic, version, the eleven [`LmConfig`] fields
//! as `u32` (vocab, embed, layers, heads, ffn, positions, CLS, SEP, MASK,
//! PAD, identity head), the array count, then per array its name, rank,
//! dims (`u32` each) and `f32` data in [`FrozenLm::tensors`] order.
//!
//! Prompt parameters (`WARP`): magic, version, `E`, `K`, `C` as `u32`, head
//! kind `u8` (0 verbalizer, 1 regression), template, task name, the clip
//! range as two `f64` for a regression head, then the prompt rows and the
//! head (verbalizer rows, or weight row and bias) as `f32` row-major.

use std::path::Path;

use warp_core::lm::{FrozenLm, LmConfig};
use warp_core::trainer::{Head, WarpParameters};
use warp_core::Tensor;

use crate::error::{format_err, io_err, Result};

pub const LM_MAGIC: &[u8; 4] = b"WLMC";
pub const WARP_MAGIC: &[u8; 4] = b"WARP";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f32s(&mut self, xs: &[f32]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| format!("invalid UTF-8: {e}"))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("array size overflows")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        if self.take(4)? != magic {
            return Err(format!("not a {} file", String::from_utf8_lossy(magic)));
        }
        match self.u32()? {
            v if v as u32 == VERSION => Ok(()),
            v => Err(format!("unsupported version {v}")),
        }
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.at != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.at));
        }
        Ok(())
    }
}

pub fn encode_lm(model: &FrozenLm<f32>) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer(LM_MAGIC.to_vec());
    w.u32(VERSION as usize);
    for v in [c.vocab_size, c.embed_dim, c.num_layers, c.num_heads, c.ffn_dim, c.max_positions] {
        w.u32(v);
    }
    for id in [c.cls_id, c.sep_id, c.mask_id, c.pad_id] {
        w.u32(id as usize);
    }
    w.u32(c.identity_head as usize);
    let tensors = model.tensors();
    w.u32(tensors.len());
    for (name, t) in tensors {
        w.str(&name);
        w.u32(t.shape().len());
        for &d in t.shape() {
            w.u32(d);
        }
        w.f32s(t.data());
    }
    w.0
}

pub fn decode_lm(bytes: &[u8]) -> std::result::Result<FrozenLm<f32>, String> {
    let mut r = Reader { buf: bytes, at: 0 };
    r.header(LM_MAGIC)?;
    let mut f = [0usize; 11];
    for v in &mut f {
        *v = r.u32()?;
    }
    let id = |v: usize| v as u32;
    let config = LmConfig {
        vocab_size: f[0],
        embed_dim: f[1],
        num_layers: f[2],
        num_heads: f[3],
        ffn_dim: f[4],
        max_positions: f[5],
        cls_id: id(f[6]),
        sep_id: id(f[7]),
        mask_id: id(f[8]),
        pad_id: id(f[9]),
        identity_head: match f[10] {
            0 => false,
            1 => true,
            v => return Err(format!("identity-head flag {v}")),
        },
    };
    config.validate().map_err(|e| e.to_string())?;
    let expected = FrozenLm::<f32>::expected_shapes(&config);
    let count = r.u32()?;
    if count != expected.len() {
        return Err(format!("{count} arrays, configuration needs {}", expected.len()));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for shape in &expected {
        let name = r.str()?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(format!("array `{name}` has shape {dims:?}, expected {shape:?}"));
        }
        let data = r.f32s(shape.iter().product())?;
        tensors.push(Tensor::new(dims, data).map_err(|e| e.to_string())?);
        names.push(name);
    }
    r.finish()?;
    let model = FrozenLm::from_tensors(config, tensors).map_err(|e| e.to_string())?;
    for (got, (want, _)) in names.iter().zip(model.tensors()) {
        if *got != want {
            return Err(format!("array `{got}` where `{want}` was expected"));
        }
    }
    Ok(model)
}

/// A prompt checkpoint: trained parameters plus what is needed to apply
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpCheckpoint {
    pub task: String,
    pub template: String,
    pub params: WarpParameters<f32>,
}

pub fn encode_warp(ckpt: &WarpCheckpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let mut w = Writer(WARP_MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.u32(p.embed_dim());
    w.u32(p.prompt_count());
    let c = if p.is_regression() { 0 } else { p.num_outputs() };
    w.u32(c);
    w.0.push(u8::from(p.is_regression()));
    w.str(&ckpt.template);
    w.str(&ckpt.task);
    if let Head::Regression { clip, .. } = &p.head {
        w.0.extend_from_slice(&clip.0.to_le_bytes());
        w.0.extend_from_slice(&clip.1.to_le_bytes());
    }
    w.f32s(p.prompts.data());
    match &p.head {
        Head::Verbalizer(v) => w.f32s(v.data()),
        Head::Regression { weight, bias, .. } => {
            w.f32s(weight.data());
            w.f32s(bias.data());
        }
    }
    w.0
}

pub fn decode_warp(bytes: &[u8]) -> std::result::Result<WarpCheckpoint, String> {
    let mut r = Reader { buf: bytes, at: 0 };
    r.header(WARP_MAGIC)?;
    let (e, k, c) = (r.u32()?, r.u32()?, r.u32()?);
    if e == 0 {
        return Err("embedding size 0".into());
    }
    let kind = r.u8()?;
    let template = r.str()?;
    let task = r.str()?;
    let tensor = |shape: Vec<usize>, data| Tensor::new(shape, data).map_err(|e| e.to_string());
    let (prompts, head) = match kind {
        0 => {
            let prompts = tensor(vec![k, e], r.f32s(k * e)?)?;
            (prompts, Head::Verbalizer(tensor(vec![c, e], r.f32s(c * e)?)?))
        }
        1 => {
            if c != 0 {
                return Err(format!("regression head with C={c}"));
            }
            let clip = (r.f64()?, r.f64()?);
            let prompts = tensor(vec![k, e], r.f32s(k * e)?)?;
            let weight = tensor(vec![1, e], r.f32s(e)?)?;
            let bias = tensor(vec![1], r.f32s(1)?)?;
            (prompts, Head::Regression { weight, bias, clip })
        }
        v => return Err(format!("unknown head kind {v}")),
    };
    r.finish()?;
    let params = WarpParameters::new(prompts, head).map_err(|e| e.to_string())?;
    Ok(WarpCheckpoint { task, template, params })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn save_lm(path: &Path, model: &FrozenLm<f32>) -> Result<()> {
    write(path, &encode_lm(model))
}

pub fn load_lm(path: &Path) -> Result<FrozenLm<f32>> {
    decode_lm(&read(path)?).map_err(|m| format_err(path, m))
}

pub fn save_warp(path: &Path, ckpt: &WarpCheckpoint) -> Result<()> {
    write(path, &encode_warp(ckpt))
}

pub fn load_warp(path: &Path) -> Result<WarpCheckpoint> {
    decode_warp(&read(path)?).map_err(|m| format_err(path, m))
}
