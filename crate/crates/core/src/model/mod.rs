//! The base translation model: speech-feature encoder, text encoder, and an
//! autoregressive decoder with an explicit KV cache.

mod cache;
mod config;
pub mod layers;
mod prune;
pub mod vocab;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cache::KVCache;
pub use config::{KvpsnConfig, ModelConfig};
pub use prune::prune_layer_indices;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kvpsn::{KvpsnArch, MedusaArch};
use crate::numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use layers::{randn, sinusoids, DecoderLayer, EncoderLayer, Linear, Norm};

/// Counts of transformer-layer forwards, per network.
#[derive(Debug, Default)]
pub struct LayerCounters {
    pub base: AtomicU64,
    pub kvpsn: AtomicU64,
    pub medusa: AtomicU64,
}

/// Snapshot of [`LayerCounters`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub base: u64,
    pub kvpsn: u64,
    pub medusa: u64,
}

impl LayerCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            base: self.base.load(Ordering::Relaxed),
            kvpsn: self.kvpsn.load(Ordering::Relaxed),
            medusa: self.medusa.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn add(counter: &AtomicU64, n: usize) {
        counter.fetch_add(n as u64, Ordering::Relaxed);
    }
}

/// Parameter handles of the base model.
#[derive(Clone, Debug)]
pub struct BaseArch {
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub speech_in: Linear,
    pub speech_layers: Vec<EncoderLayer>,
    pub speech_ln: Norm,
    pub text_layers: Vec<EncoderLayer>,
    pub text_ln: Norm,
    pub dec_layers: Vec<DecoderLayer>,
    pub dec_ln: Norm,
}

/// Everything that owns parameters, plus forward counters.
#[derive(Debug)]
pub struct Arch {
    pub base: BaseArch,
    pub kvpsn: Option<KvpsnArch>,
    pub medusa: Option<MedusaArch>,
    pub counters: LayerCounters,
}

/// Result of a decoder pass on a tape.
pub(crate) struct DecoderPass {
    pub logits: Var,
    /// Final-layer (post-norm) hidden states.
    pub hidden: Var,
    /// Per-layer keys/values covering every position, past included.
    pub kv: Vec<(Var, Var)>,
    /// Per-layer keys/values of the new positions only.
    pub new_kv: Vec<(Var, Var)>,
}

/// Adjacent feature frames are concatenated before the speech encoder,
/// halving the sequence length.
pub const FRAME_STACK: usize = 2;

/// `[T × d]` → `[ceil(T/FRAME_STACK) × FRAME_STACK·d]`, zero-padding the tail.
pub fn stack_frames<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    if features.shape().len() != 2 {
        return shape_err(format!("features {:?}", features.shape()));
    }
    let (n, d) = (features.rows(), features.cols());
    let out_rows = n.div_ceil(FRAME_STACK);
    let mut data = features.data().to_vec();
    data.resize(out_rows * FRAME_STACK * d, T::zero());
    Tensor::matrix(out_rows, FRAME_STACK * d, data)
}

impl BaseArch {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let emb_std = (1.0 / d as f64).sqrt();
        let tok_embed = store.add("embed.token", randn(rng, vec![cfg.vocab_size(), d], emb_std))?;
        // Learned, but starting from the encoders' sinusoid table so source and
        // target positions begin comparable.
        let pos_embed = store.add("embed.pos", sinusoids(cfg.max_len, d))?;
        let enc_out = |n: usize| (1.0 / d as f64).sqrt() / (2.0 * n.max(1) as f64).sqrt();
        let speech_in = Linear::new(
            store,
            rng,
            "speech.in",
            FRAME_STACK * cfg.d_feat,
            d,
            true,
            (1.0 / (FRAME_STACK * cfg.d_feat) as f64).sqrt(),
        )?;
        let speech_layers = (0..cfg.n_enc_speech)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("speech.layer{i}"),
                    d,
                    cfg.d_ff,
                    enc_out(cfg.n_enc_speech),
                )
            })
            .collect::<Result<_>>()?;
        let speech_ln = Norm::new(store, "speech.ln_post", d)?;
        let text_layers = (0..cfg.n_enc_text)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("text.layer{i}"),
                    d,
                    cfg.d_ff,
                    enc_out(cfg.n_enc_text),
                )
            })
            .collect::<Result<_>>()?;
        let text_ln = Norm::new(store, "text.ln_post", d)?;
        let dec_layers = (0..cfg.n_layers)
            .map(|i| {
                DecoderLayer::new(
                    store,
                    rng,
                    &format!("dec.layer{i}"),
                    d,
                    cfg.d_ff,
                    enc_out(cfg.n_layers),
                )
            })
            .collect::<Result<_>>()?;
        let dec_ln = Norm::new(store, "dec.ln_post", d)?;
        Ok(Self {
            tok_embed,
            pos_embed,
            speech_in,
            speech_layers,
            speech_ln,
            text_layers,
            text_ln,
            dec_layers,
            dec_ln,
        })
    }
}

impl Arch {
    /// Creates every parameter in canonical order: base, drafter, Medusa head.
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = BaseArch::build(cfg, store, &mut rng)?;
        let kvpsn = match cfg.kvpsn {
            Some(k) => Some(KvpsnArch::build(cfg, k, store, &mut rng)?),
            None => None,
        };
        let medusa = match cfg.medusa_blocks {
            0 => None,
            n => Some(MedusaArch::build(cfg, n, store, &mut rng)?),
        };
        Ok(Self {
            base,
            kvpsn,
            medusa,
            counters: LayerCounters::default(),
        })
    }

    pub(crate) fn encode_speech<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        cfg: &ModelConfig,
        feats: &Tensor<T>,
    ) -> Result<Var> {
        let stacked = stack_frames(feats)?;
        let n = stacked.rows();
        let feats = g.constant(stacked);
        let x = self.base.speech_in.forward(g, feats)?;
        let x = g.gelu(x)?;
        let pos = g.constant(sinusoids(n, cfg.d_model));
        let mut x = g.add(x, pos)?;
        for layer in &self.base.speech_layers {
            x = layer.forward(g, x, cfg.n_heads)?;
        }
        self.base.speech_ln.forward(g, x)
    }

    pub(crate) fn encode_text<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        cfg: &ModelConfig,
        tokens: &[usize],
    ) -> Result<Var> {
        let emb = g.param(self.base.tok_embed);
        let x = g.gather(emb, tokens)?;
        let pos = g.constant(sinusoids(tokens.len(), cfg.d_model));
        let mut x = g.add(x, pos)?;
        for layer in &self.base.text_layers {
            x = layer.forward(g, x, cfg.n_heads)?;
        }
        self.base.text_ln.forward(g, x)
    }

    /// Cross-attention keys/values of every decoder layer.
    pub(crate) fn cross_kv<T: Scalar>(&self, g: &mut Graph<'_, T>, enc: Var) -> Result<Vec<(Var, Var)>> {
        self.base
            .dec_layers
            .iter()
            .map(|l| l.cross_attn.project_kv(g, enc))
            .collect()
    }

    /// Token embedding plus learned position embedding.
    pub(crate) fn embed<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        let emb = g.param(self.base.tok_embed);
        let x = g.gather(emb, tokens)?;
        let pos_table = g.param(self.base.pos_embed);
        let p = g.gather(pos_table, positions)?;
        g.add(x, p)
    }

    /// Runs the decoder over `tokens` at positions `start..`, after `past`.
    pub(crate) fn decoder_pass<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        cfg: &ModelConfig,
        tokens: &[usize],
        start: usize,
        past: Option<&[(Var, Var)]>,
        cross: &[(Var, Var)],
    ) -> Result<DecoderPass> {
        if start + tokens.len() > cfg.max_len {
            return Err(Error::Overflow {
                needed: start + tokens.len(),
                max_len: cfg.max_len,
            });
        }
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let mut x = self.embed(g, tokens, &positions)?;
        let mut kv = Vec::with_capacity(cfg.n_layers);
        let mut new_kv = Vec::with_capacity(cfg.n_layers);
        for (l, layer) in self.base.dec_layers.iter().enumerate() {
            let past_l = past.map(|p| p[l]);
            let out = layer.forward(g, x, start, past_l, cross[l], cfg.n_heads)?;
            x = out.x;
            let full = match past_l {
                Some((pk, pv)) if start > 0 => {
                    (g.concat_rows(&[pk, out.k_new])?, g.concat_rows(&[pv, out.v_new])?)
                }
                _ => (out.k_new, out.v_new),
            };
            kv.push(full);
            new_kv.push((out.k_new, out.v_new));
        }
        LayerCounters::add(&self.counters.base, cfg.n_layers);
        let hidden = self.base.dec_ln.forward(g, x)?;
        let emb = g.param(self.base.tok_embed);
        let logits = g.matmul_bt(hidden, emb)?;
        Ok(DecoderPass {
            logits,
            hidden,
            kv,
            new_kv,
        })
    }
}

/// Encoder states shared by the base decoder and the drafters.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Tensor,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Logits and final hidden states for the positions of one decoder call.
#[derive(Clone, Debug)]
pub struct DecoderStepOutput {
    /// `[P × vocab]`; row `p` predicts the token after input position `p`.
    pub logits: Tensor,
    /// `[P × d_model]`
    pub hidden_last: Tensor,
}

/// A model with its parameters.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub arch: Arch,
    pub params: ParamStore,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        let mut params = ParamStore::new();
        let arch = Arch::build(&self.cfg, &mut params, 0).expect("config already validated");
        Self {
            cfg: self.cfg.clone(),
            arch,
            params: self.params.clone(),
        }
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Arch::build(&cfg, &mut params, seed)?;
        Ok(Self { cfg, arch, params })
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.arch.counters.snapshot()
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size()
    }

    /// Encodes `[T_feat × d_feat]` speech-like features.
    pub fn encode_features(&self, features: &Tensor) -> Result<EncoderOutput> {
        let n = features.rows();
        if features.is_empty() || n == 0 {
            return invalid("empty feature sequence");
        }
        if features.shape().len() != 2 || features.cols() != self.cfg.d_feat {
            return shape_err(format!(
                "features {:?}, expected [T × {}]",
                features.shape(),
                self.cfg.d_feat
            ));
        }
        if n > 2 * self.cfg.max_len {
            return invalid(format!("{n} feature frames exceed 2·max_len"));
        }
        let mut g = Graph::inference(&self.params);
        let out = self.arch.encode_speech(&mut g, &self.cfg, features)?;
        Ok(EncoderOutput {
            states: g.value(out).clone(),
        })
    }

    /// Encodes content tokens with the text encoder.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<EncoderOutput> {
        if tokens.is_empty() {
            return invalid("empty token sequence");
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::Overflow {
                needed: tokens.len(),
                max_len: self.cfg.max_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| !vocab::is_content(t)) {
            return invalid(format!("special token {t} in text-encoder input"));
        }
        let ids = self.check_tokens(tokens)?;
        let mut g = Graph::inference(&self.params);
        let out = self.arch.encode_text(&mut g, &self.cfg, &ids)?;
        Ok(EncoderOutput {
            states: g.value(out).clone(),
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        let v = self.vocab_size();
        tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t < v {
                    Ok(t)
                } else {
                    Err(Error::TokenRange { token: t, vocab: v })
                }
            })
            .collect()
    }

    /// Empty decoder cache bound to `enc`'s cross-attention projections.
    pub fn new_cache(&self, enc: &EncoderOutput) -> Result<KVCache> {
        let mut g = Graph::inference(&self.params);
        let e = g.constant_ref(&enc.states);
        let cross = self.arch.cross_kv(&mut g, e)?;
        let cross = cross
            .into_iter()
            .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        Ok(KVCache::new(self.cfg.n_layers, self.cfg.d_model, cross))
    }

    /// Processes `tokens` at positions `cache.len()..` and extends the cache.
    pub fn decoder_forward(&self, tokens: &[u32], cache: &mut KVCache) -> Result<DecoderStepOutput> {
        if tokens.is_empty() {
            return invalid("decoder_forward needs at least one token");
        }
        if cache.n_layers() != self.cfg.n_layers {
            return shape_err("cache built for a different decoder depth");
        }
        let ids = self.check_tokens(tokens)?;
        let start = cache.len();
        let (out, new_kv) = {
            let mut g = Graph::inference(&self.params);
            let past: Vec<(Var, Var)> = (0..self.cfg.n_layers)
                .map(|l| (g.constant_ref(cache.keys(l)), g.constant_ref(cache.values(l))))
                .collect();
            let cross: Vec<(Var, Var)> = (0..self.cfg.n_layers)
                .map(|l| {
                    let (k, v) = cache.cross(l);
                    (g.constant_ref(k), g.constant_ref(v))
                })
                .collect();
            let pass = self
                .arch
                .decoder_pass(&mut g, &self.cfg, &ids, start, Some(&past), &cross)?;
            let out = DecoderStepOutput {
                logits: g.value(pass.logits).clone(),
                hidden_last: g.value(pass.hidden).clone(),
            };
            let new_kv: Vec<(Tensor, Tensor)> = pass
                .new_kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect();
            (out, new_kv)
        };
        cache.append(new_kv)?;
        Ok(out)
    }

    /// Copies self-attention and feed-forward weights of decoder layer `i`
    /// into text-encoder layer `i`.
    pub fn init_text_encoder_from_decoder(&mut self) -> Result<()> {
        if self.cfg.n_enc_text > self.cfg.n_layers {
            return invalid(format!(
                "text encoder has {} layers but decoder only {}",
                self.cfg.n_enc_text, self.cfg.n_layers
            ));
        }
        let pairs: Vec<(ParamId, ParamId)> = self
            .arch
            .base
            .text_layers
            .iter()
            .zip(&self.arch.base.dec_layers)
            .flat_map(|(enc, dec)| {
                let a = enc.attn.params().into_iter().zip(dec.self_attn.params());
                let f = enc.ffn.params().into_iter().zip(dec.ffn.params());
                a.chain(f).collect::<Vec<_>>()
            })
            .collect();
        for (dst, src) in pairs {
            let value = self.params.get(src).clone();
            *self.params.get_mut(dst) = value;
        }
        Ok(())
    }

    /// A model whose decoder keeps only the layers at `keep`, copied from
    /// `self`. Every other parameter is carried over; drafter parameters are
    /// dropped unless the new config asks for them, in which case they start
    /// fresh.
    pub fn pruned(&self, keep: &[usize], cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.n_layers != keep.len() || keep.iter().any(|&i| i >= self.cfg.n_layers) {
            return invalid("pruned config does not match kept layer indices");
        }
        let mut out = Model::new(cfg, seed)?;
        let ids: Vec<(ParamId, String)> = out
            .params
            .iter()
            .map(|(id, name, _)| (id, name.to_string()))
            .collect();
        for (id, name) in ids {
            let src = match name.strip_prefix("dec.layer") {
                Some(rest) => {
                    let (idx, tail) = rest.split_once('.').expect("layer param name");
                    let j: usize = idx.parse().expect("layer index");
                    format!("dec.layer{}.{tail}", keep[j])
                }
                None => name.clone(),
            };
            if name.starts_with("kvpsn.") || name.starts_with("medusa.") {
                continue;
            }
            if let Some(sid) = self.params.id(&src) {
                if self.params.get(sid).shape() == out.params.get(id).shape() {
                    *out.params.get_mut(id) = self.params.get(sid).clone();
                }
            }
        }
        Ok(out)
    }
}
