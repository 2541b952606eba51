//! Flat `key = value` run configuration with dotted keys and `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::engine::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{KvpsnConfig, ModelConfig};
use crate::train::{LossWeights, SyntheticTaskSpec, TrainConfig};

/// Task settings that are not implied by the model shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSettings {
    pub feature_seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
    pub frame_repeat: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        let t = SyntheticTaskSpec::for_model(&ModelConfig::default(), 0);
        Self {
            feature_seed: 7,
            min_len: t.min_len,
            max_len: t.max_len,
            noise_sigma: t.noise_sigma,
            frame_repeat: t.frame_repeat,
        }
    }
}

impl TaskSettings {
    pub fn spec(&self, model: &ModelConfig) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            v_content: model.v_content,
            d_feat: model.d_feat,
            min_len: self.min_len,
            max_len: self.max_len,
            noise_sigma: self.noise_sigma,
            frame_repeat: self.frame_repeat,
            feature_seed: self.feature_seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSettings,
    pub decode: DecodeConfig,
}

/// Keys that must appear in every config file.
pub const REQUIRED_KEYS: &[&str] = &[
    "model.d_model",
    "model.n_heads",
    "model.d_ff",
    "model.N_l",
    "model.N_enc_speech",
    "model.N_enc_text",
    "model.d_feat",
    "model.V_content",
    "model.max_len",
    "kvpsn.N_g",
    "kvpsn.tie_output",
    "medusa.blocks",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.warmup",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.clip_norm",
    "train.seed",
    "train.gate_window",
    "loss.w_st",
    "loss.w_mt",
    "loss.w_kl",
    "loss.w_spec",
    "task.feature_seed",
    "task.min_len",
    "task.max_len",
    "task.noise_sigma",
    "task.frame_repeat",
];

/// Keys that fall back to [`DecodeConfig::default`] when absent.
pub const OPTIONAL_KEYS: &[&str] = &[
    "decode.mode",
    "decode.k",
    "decode.beam",
    "decode.max_new_tokens",
    "decode.drafting",
];

struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (line, v) = self
            .0
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing config key {key}")))?;
        v.parse()
            .map_err(|e| Error::Config(format!("line {line}: {key} = {v:?}: {e}")))
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if self.0.contains_key(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }
}

fn parse_entries(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Config(format!("line {line_no}: expected key = value")));
        };
        let (k, v) = (k.trim(), v.trim());
        if !REQUIRED_KEYS.contains(&k) && !OPTIONAL_KEYS.contains(&k) {
            return Err(Error::Config(format!("line {line_no}: unknown key {k}")));
        }
        if map.insert(k.to_string(), (line_no, v.to_string())).is_some() {
            return Err(Error::Config(format!("line {line_no}: duplicate key {k}")));
        }
    }
    Ok(Entries(map))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let e = parse_entries(text)?;
        let n_groups: usize = e.get("kvpsn.N_g")?;
        let model = ModelConfig {
            d_model: e.get("model.d_model")?,
            n_heads: e.get("model.n_heads")?,
            d_ff: e.get("model.d_ff")?,
            n_layers: e.get("model.N_l")?,
            n_enc_speech: e.get("model.N_enc_speech")?,
            n_enc_text: e.get("model.N_enc_text")?,
            d_feat: e.get("model.d_feat")?,
            v_content: e.get("model.V_content")?,
            max_len: e.get("model.max_len")?,
            kvpsn: None,
            medusa_blocks: e.get("medusa.blocks")?,
        };
        let tie_output: bool = e.get("kvpsn.tie_output")?;
        let model = ModelConfig {
            kvpsn: (n_groups > 0).then_some(KvpsnConfig { n_groups, tie_output }),
            ..model
        };
        model.validate().map_err(|err| Error::Config(err.to_string()))?;
        let train = TrainConfig {
            steps: e.get("train.steps")?,
            batch_size: e.get("train.batch_size")?,
            lr: e.get("train.lr")?,
            warmup: e.get("train.warmup")?,
            weight_decay: e.get("train.weight_decay")?,
            beta1: e.get("train.beta1")?,
            beta2: e.get("train.beta2")?,
            clip_norm: e.get("train.clip_norm")?,
            seed: e.get("train.seed")?,
            gate_window: e.get("train.gate_window")?,
            weights: LossWeights {
                w_st: e.get("loss.w_st")?,
                w_mt: e.get("loss.w_mt")?,
                w_kl: e.get("loss.w_kl")?,
                w_spec: e.get("loss.w_spec")?,
            },
        };
        train.validate().map_err(|err| Error::Config(err.to_string()))?;
        let task = TaskSettings {
            feature_seed: e.get("task.feature_seed")?,
            min_len: e.get("task.min_len")?,
            max_len: e.get("task.max_len")?,
            noise_sigma: e.get("task.noise_sigma")?,
            frame_repeat: e.get("task.frame_repeat")?,
        };
        if task.min_len == 0 || task.min_len > task.max_len {
            return Err(Error::Config(format!(
                "task lengths {}..={} are empty",
                task.min_len, task.max_len
            )));
        }
        let d = DecodeConfig::default();
        let decode = DecodeConfig {
            mode: e.get_or("decode.mode", d.mode)?,
            k: e.get_or("decode.k", d.k)?,
            beam_width: e.get_or("decode.beam", d.beam_width)?,
            max_new_tokens: e.get_or("decode.max_new_tokens", d.max_new_tokens)?,
            drafting: e.get_or("decode.drafting", d.drafting)?,
            ..d
        };
        decode.validate().map_err(|err| Error::Config(err.to_string()))?;
        Ok(Self {
            model,
            train,
            task,
            decode,
        })
    }

    /// Applies `KVPSN_SEED`-style overrides of the training seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self
    }

    /// Serializes every key; `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let kv = m.kvpsn.unwrap_or(KvpsnConfig {
            n_groups: 0,
            tie_output: true,
        });
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.d_model", m.d_model.to_string());
        put("model.n_heads", m.n_heads.to_string());
        put("model.d_ff", m.d_ff.to_string());
        put("model.N_l", m.n_layers.to_string());
        put("model.N_enc_speech", m.n_enc_speech.to_string());
        put("model.N_enc_text", m.n_enc_text.to_string());
        put("model.d_feat", m.d_feat.to_string());
        put("model.V_content", m.v_content.to_string());
        put("model.max_len", m.max_len.to_string());
        put("kvpsn.N_g", kv.n_groups.to_string());
        put("kvpsn.tie_output", kv.tie_output.to_string());
        put("medusa.blocks", m.medusa_blocks.to_string());
        put("train.steps", t.steps.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", t.lr.to_string());
        put("train.warmup", t.warmup.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.beta1", t.beta1.to_string());
        put("train.beta2", t.beta2.to_string());
        put("train.clip_norm", t.clip_norm.to_string());
        put("train.seed", t.seed.to_string());
        put("train.gate_window", t.gate_window.to_string());
        put("loss.w_st", t.weights.w_st.to_string());
        put("loss.w_mt", t.weights.w_mt.to_string());
        put("loss.w_kl", t.weights.w_kl.to_string());
        put("loss.w_spec", t.weights.w_spec.to_string());
        put("task.feature_seed", self.task.feature_seed.to_string());
        put("task.min_len", self.task.min_len.to_string());
        put("task.max_len", self.task.max_len.to_string());
        put("task.noise_sigma", self.task.noise_sigma.to_string());
        put("task.frame_repeat", self.task.frame_repeat.to_string());
        put("decode.mode", self.decode.mode.to_string());
        put("decode.k", self.decode.k.to_string());
        put("decode.beam", self.decode.beam_width.to_string());
        put("decode.max_new_tokens", self.decode.max_new_tokens.to_string());
        put("decode.drafting", self.decode.drafting.to_string());
        s
    }
}
