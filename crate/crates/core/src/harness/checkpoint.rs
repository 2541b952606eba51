//! Binary tensor archive.
//!
//! Layout: `KVPSN1`, tensor count (u32), then per tensor the name length
//! (u16), UTF-8 name, rank (u8), dims (u32 each) and the f32 payload. All
//! integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{KvpsnConfig, Model, ModelConfig};
use crate::numcore::Tensor;
use crate::train::SyntheticTaskSpec;

pub const MAGIC: &[u8; 6] = b"KVPSN1";

const META_CONFIG: &str = "meta.config";
const META_TASK: &str = "meta.task";
const META_TRAIN: &str = "meta.train";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| bad("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| bad(format!("rank of {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad(format!("dimension of {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("bad magic"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("{name}: size overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Optimizer-independent training progress.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainState {
    pub step: usize,
    pub gate_open: bool,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct SavedRun {
    pub model: Model,
    pub task: SyntheticTaskSpec,
    pub train: Option<TrainState>,
}

fn meta(values: Vec<f32>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n], values).expect("vector shape")
}

fn u64_parts(seed: u64) -> [f32; 4] {
    [0, 16, 32, 48].map(|s| ((seed >> s) & 0xffff) as f32)
}

fn u64_from(parts: &[f32]) -> u64 {
    parts
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &p)| acc | ((p as u64) << (16 * i)))
}

fn config_values(cfg: &ModelConfig) -> Vec<f32> {
    let kv = cfg.kvpsn.unwrap_or(KvpsnConfig {
        n_groups: 0,
        tie_output: true,
    });
    [
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.n_layers,
        cfg.n_enc_speech,
        cfg.n_enc_text,
        cfg.d_feat,
        cfg.v_content,
        cfg.max_len,
        kv.n_groups,
        usize::from(kv.tie_output),
        cfg.medusa_blocks,
    ]
    .iter()
    .map(|&v| v as f32)
    .collect()
}

fn config_from(v: &[f32]) -> Result<ModelConfig> {
    if v.len() != 12 {
        return Err(bad(format!("{META_CONFIG} has {} values", v.len())));
    }
    let u = |i: usize| v[i] as usize;
    let cfg = ModelConfig {
        d_model: u(0),
        n_heads: u(1),
        d_ff: u(2),
        n_layers: u(3),
        n_enc_speech: u(4),
        n_enc_text: u(5),
        d_feat: u(6),
        v_content: u(7),
        max_len: u(8),
        kvpsn: (u(9) > 0).then(|| KvpsnConfig {
            n_groups: u(9),
            tie_output: u(10) != 0,
        }),
        medusa_blocks: u(11),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Packs weights, the model and task configuration, and training progress.
pub fn pack(model: &Model, task: &SyntheticTaskSpec, train: Option<TrainState>) -> Checkpoint {
    let mut tensors = vec![(META_CONFIG.to_string(), meta(config_values(&model.cfg)))];
    let mut t = vec![task.min_len as f32, task.max_len as f32, task.frame_repeat as f32];
    t.extend(u64_parts(task.noise_sigma.to_bits()));
    t.extend(u64_parts(task.feature_seed));
    tensors.push((META_TASK.to_string(), meta(t)));
    if let Some(s) = train {
        tensors.push((
            META_TRAIN.to_string(),
            meta(vec![s.step as f32, f32::from(u8::from(s.gate_open))]),
        ));
    }
    for (_, name, value) in model.params.iter() {
        tensors.push((name.to_string(), value.clone()));
    }
    Checkpoint { tensors }
}

/// Rebuilds a model from a checkpoint. Unknown names, shape mismatches and
/// missing parameters are errors.
pub fn unpack(ck: &Checkpoint) -> Result<SavedRun> {
    let cfg = config_from(
        ck.get(META_CONFIG)
            .ok_or_else(|| bad(format!("missing {META_CONFIG}")))?
            .data(),
    )?;
    let t = ck
        .get(META_TASK)
        .ok_or_else(|| bad(format!("missing {META_TASK}")))?
        .data();
    if t.len() != 11 {
        return Err(bad(format!("{META_TASK} has {} values", t.len())));
    }
    let task = SyntheticTaskSpec {
        v_content: cfg.v_content,
        d_feat: cfg.d_feat,
        min_len: t[0] as usize,
        max_len: t[1] as usize,
        noise_sigma: f64::from_bits(u64_from(&t[3..7])),
        frame_repeat: t[2] as usize,
        feature_seed: u64_from(&t[7..11]),
    };
    let train = match ck.get(META_TRAIN) {
        Some(m) if m.len() == 2 => Some(TrainState {
            step: m.data()[0] as usize,
            gate_open: m.data()[1] != 0.0,
        }),
        Some(_) => return Err(bad(format!("malformed {META_TRAIN}"))),
        None => None,
    };
    let mut model = Model::new(cfg, 0)?;
    let mut seen = vec![false; model.params.len()];
    for (name, value) in &ck.tensors {
        if name.starts_with("meta.") {
            if ![META_CONFIG, META_TASK, META_TRAIN].contains(&name.as_str()) {
                return Err(bad(format!("unknown tensor {name}")));
            }
            continue;
        }
        let id = model
            .params
            .id(name)
            .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(bad(format!(
                "{name}: shape {:?}, model expects {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.clone();
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model
            .params
            .iter()
            .nth(i)
            .map(|(_, n, _)| n.to_string())
            .unwrap_or_default();
        return Err(bad(format!("missing tensor {name}")));
    }
    Ok(SavedRun { model, task, train })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Model, SyntheticTaskSpec) {
        let cfg = ModelConfig::tiny();
        let task = SyntheticTaskSpec::for_model(&cfg, 0xdead_beef_1234_5678);
        (Model::new(cfg, 3).unwrap(), task)
    }

    #[test]
    fn bytes_round_trip() {
        let (m, task) = tiny();
        let ck = pack(
            &m,
            &task,
            Some(TrainState {
                step: 17,
                gate_open: true,
            }),
        );
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let run = unpack(&back).unwrap();
        assert_eq!(run.task, task);
        assert_eq!(
            run.train,
            Some(TrainState {
                step: 17,
                gate_open: true
            })
        );
        assert_eq!(pack(&run.model, &run.task, run.train).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            tensors: vec![("ab".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())],
        };
        let b = ck.to_bytes().unwrap();
        let mut want = b"KVPSN1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn unknown_name_is_reported() {
        let (m, task) = tiny();
        let mut ck = pack(&m, &task, None);
        ck.tensors
            .push(("dec.layer99.extra".into(), Tensor::zeros(vec![1])));
        let err = unpack(&ck).unwrap_err().to_string();
        assert!(err.contains("dec.layer99.extra"), "{err}");
    }

    #[test]
    fn missing_tensor_is_reported() {
        let (m, task) = tiny();
        let mut ck = pack(&m, &task, None);
        ck.tensors.retain(|(n, _)| !n.starts_with("kvpsn.block1.w_q"));
        let err = unpack(&ck).unwrap_err().to_string();
        assert!(err.contains("kvpsn.block1.w_q"), "{err}");
    }

    #[test]
    fn truncated_file_fails() {
        let (m, task) = tiny();
        let bytes = pack(&m, &task, None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"KVPSN2\0\0\0\0").is_err());
    }
}
