//! The parasitic speculative network.
//!
//! Each block owns only a query and an output projection for its past-context
//! attention; the keys and values it attends over are the base decoder's own
//! cached keys and values for one layer group, flattened across the group's
//! layers. Drafting a token therefore costs no base-layer computation.
//!
//! Block `l` at position `i`:
//!
//! ```text
//! q      = W_Q · h_in
//! h_attn = W_O · MHA(q, K_base[<i, G_l], V_base[<i, G_l])
//! h      = h_in + LayerNorm(h_attn)
//! h      = h + CrossAttn(LN(h), encoder)
//! h_out  = h + FFN(LN(h))
//! ```
//!
//! The first block's input is the embedding of the token just generated plus
//! its position embedding.

mod groups;
mod medusa;

use std::ops::Range;

use rand_chacha::ChaCha8Rng;

pub use groups::{group_layers, grouped_view, GroupedKvView};
pub use medusa::MedusaArch;

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::layers::{randn, Attention, FeedForward, Linear, Norm};
use crate::model::{Arch, EncoderOutput, KVCache, KvpsnConfig, LayerCounters, Model, ModelConfig};
use crate::numcore::{AttnMask, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// One drafting block.
#[derive(Clone, Debug)]
pub struct KvpsnBlock {
    pub w_q: Linear,
    pub w_o: Linear,
    pub ln_attn: Norm,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct KvpsnArch {
    pub groups: Vec<Range<usize>>,
    pub blocks: Vec<KvpsnBlock>,
    pub ln_post: Norm,
    /// Untied output projection `[d_model × vocab]`, when not tied.
    pub head: Option<ParamId>,
}

impl KvpsnArch {
    pub(crate) fn build(
        cfg: &ModelConfig,
        kcfg: KvpsnConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let groups = group_layers(cfg.n_layers, kcfg.n_groups)?;
        let d = cfg.d_model;
        let std = (1.0 / d as f64).sqrt();
        let out_std = std / (2.0 * kcfg.n_groups as f64).sqrt();
        let blocks = (1..=kcfg.n_groups)
            .map(|l| {
                let name = format!("kvpsn.block{l}");
                Ok(KvpsnBlock {
                    w_q: Linear::new(store, rng, &format!("{name}.w_q"), d, d, false, std)?,
                    w_o: Linear::new(store, rng, &format!("{name}.w_o"), d, d, false, std)?,
                    ln_attn: Norm::new(store, &format!("{name}.ln_attn"), d)?,
                    ln_cross: Norm::new(store, &format!("{name}.ln_cross"), d)?,
                    cross_attn: Attention::new(store, rng, &format!("{name}.cross"), d, out_std)?,
                    ln_ffn: Norm::new(store, &format!("{name}.ln_ffn"), d)?,
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.d_ff, out_std)?,
                })
            })
            .collect::<Result<_>>()?;
        let ln_post = Norm::new(store, "kvpsn.ln_post", d)?;
        let head = if kcfg.tie_output {
            None
        } else {
            Some(store.add("kvpsn.head", randn(rng, vec![d, cfg.vocab_size()], std))?)
        };
        Ok(Self {
            groups,
            blocks,
            ln_post,
            head,
        })
    }

    pub(crate) fn cross_kv<T: Scalar>(&self, g: &mut Graph<'_, T>, enc: Var) -> Result<Vec<(Var, Var)>> {
        self.blocks
            .iter()
            .map(|b| b.cross_attn.project_kv(g, enc))
            .collect()
    }

    /// Drafts from `h_in [P×d]` whose rows sit at `positions`.
    ///
    /// `group_kv[l]` holds the flattened keys/values for block `l`'s group:
    /// `|G_l|` segments of `seg_len` rows. Row `r` sees the first
    /// `positions[r]` rows of each segment.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        cfg: &ModelConfig,
        arch: &Arch,
        h_in: Var,
        positions: &[usize],
        group_kv: &[(Var, Var)],
        seg_len: usize,
        cross: &[(Var, Var)],
    ) -> Result<Var> {
        if group_kv.len() != self.blocks.len() || cross.len() != self.blocks.len() {
            return shape_err("one key/value group and one cross projection per block");
        }
        if positions.contains(&0) {
            return invalid("drafting at position 0 has no cached context");
        }
        if positions.iter().any(|&i| i > seg_len) {
            return invalid("drafting position beyond the cached context");
        }
        let p = positions.len();
        let mut h = h_in;
        for (b, block) in self.blocks.iter().enumerate() {
            let (keys, values) = group_kv[b];
            let group = &self.groups[b];
            let q = block.w_q.forward(g, h)?;
            let mask = AttnMask::grouped(group.len(), seg_len, positions.to_vec());
            let a = g.attention(q, keys, values, cfg.n_heads, mask)?;
            let a = block.w_o.forward(g, a)?;
            let a = block.ln_attn.forward(g, a)?;
            h = g.add(h, a)?;
            let x = block.ln_cross.forward(g, h)?;
            let (ck, cv) = cross[b];
            let s = g.value(ck).rows();
            let c = block
                .cross_attn
                .forward(g, x, ck, cv, cfg.n_heads, AttnMask::full(p, s))?;
            h = g.add(h, c)?;
            let x = block.ln_ffn.forward(g, h)?;
            let f = block.ffn.forward(g, x)?;
            h = g.add(h, f)?;
        }
        LayerCounters::add(&arch.counters.kvpsn, self.blocks.len());
        let out = self.ln_post.forward(g, h)?;
        match self.head {
            Some(w) => {
                let w = g.param(w);
                g.matmul(out, w)
            }
            None => {
                let emb = g.param(arch.base.tok_embed);
                g.matmul_bt(out, emb)
            }
        }
    }

    /// Flattens full per-layer keys/values on a tape into per-block groups.
    pub(crate) fn group_kv<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        kv: &[(Var, Var)],
    ) -> Result<Vec<(Var, Var)>> {
        self.groups
            .iter()
            .map(|grp| {
                let ks: Vec<Var> = kv[grp.clone()].iter().map(|p| p.0).collect();
                let vs: Vec<Var> = kv[grp.clone()].iter().map(|p| p.1).collect();
                Ok((g.concat_rows(&ks)?, g.concat_rows(&vs)?))
            })
            .collect()
    }
}

/// Per-stream cross-attention projections of a drafter's blocks.
#[derive(Clone, Debug)]
pub struct DrafterCross {
    pub(crate) kv: Vec<(Tensor, Tensor)>,
}

fn materialize(g: &Graph<'_, f32>, kv: Vec<(Var, Var)>) -> DrafterCross {
    DrafterCross {
        kv: kv
            .into_iter()
            .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect(),
    }
}

impl Model {
    fn kvpsn_arch(&self) -> Result<&KvpsnArch> {
        self.arch
            .kvpsn
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no kvpsn blocks".into()))
    }

    fn medusa_arch(&self) -> Result<&MedusaArch> {
        self.arch
            .medusa
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no medusa head".into()))
    }

    pub fn has_kvpsn(&self) -> bool {
        self.arch.kvpsn.is_some()
    }

    pub fn has_medusa(&self) -> bool {
        self.arch.medusa.is_some()
    }

    /// Layer groups used by the drafting blocks.
    pub fn kvpsn_groups(&self) -> Result<&[Range<usize>]> {
        Ok(&self.kvpsn_arch()?.groups)
    }

    pub fn kvpsn_cross(&self, enc: &EncoderOutput) -> Result<DrafterCross> {
        let arch = self.kvpsn_arch()?;
        let mut g = Graph::inference(&self.params);
        let e = g.constant_ref(&enc.states);
        let kv = arch.cross_kv(&mut g, e)?;
        Ok(materialize(&g, kv))
    }

    pub fn medusa_cross(&self, enc: &EncoderOutput) -> Result<DrafterCross> {
        let arch = self.medusa_arch()?;
        let mut g = Graph::inference(&self.params);
        let e = g.constant_ref(&enc.states);
        let kv = arch.cross_kv(&mut g, e)?;
        Ok(materialize(&g, kv))
    }

    /// Drafts the token at `position + 1` from the token at `position`,
    /// reading base keys/values for positions `< position` only.
    pub fn kvpsn_forward(
        &self,
        token: u32,
        position: usize,
        cache: &KVCache,
        cross: &DrafterCross,
    ) -> Result<Tensor> {
        let v = self.vocab_size();
        if token as usize >= v {
            return Err(Error::TokenRange {
                token: token as usize,
                vocab: v,
            });
        }
        let emb = self.params.get(self.arch.base.tok_embed);
        let row = Tensor::matrix(1, self.cfg.d_model, emb.row(token as usize).to_vec())?;
        self.kvpsn_forward_embedding(&row, position, cache, cross)
    }

    /// As [`Model::kvpsn_forward`], from an explicit `[d_model]` (or
    /// `[1 × d_model]`) token embedding.
    pub fn kvpsn_forward_embedding(
        &self,
        embedding: &Tensor,
        position: usize,
        cache: &KVCache,
        cross: &DrafterCross,
    ) -> Result<Tensor> {
        let arch = self.kvpsn_arch()?;
        if position == 0 {
            return invalid("kvpsn needs at least one cached base position");
        }
        if cache.len() < position {
            return invalid(format!(
                "cache holds {} positions, draft at {position} needs them all",
                cache.len()
            ));
        }
        if position >= self.cfg.max_len {
            return Err(Error::Overflow {
                needed: position + 1,
                max_len: self.cfg.max_len,
            });
        }
        if embedding.len() != self.cfg.d_model {
            return shape_err(format!("embedding of {} values", embedding.len()));
        }
        let views = arch
            .groups
            .iter()
            .map(|grp| grouped_view(cache, grp.clone(), position))
            .collect::<Result<Vec<_>>>()?;
        let emb_row = embedding.clone().reshape(vec![1, self.cfg.d_model])?;
        let mut g = Graph::inference(&self.params);
        let e = g.constant(emb_row);
        let pos_table = g.param(self.arch.base.pos_embed);
        let pos = g.gather(pos_table, &[position])?;
        let h_in = g.add(e, pos)?;
        let group_kv: Vec<(Var, Var)> = views
            .iter()
            .map(|vw| (g.constant_ref(&vw.keys), g.constant_ref(&vw.values)))
            .collect();
        let cross_vars: Vec<(Var, Var)> = cross
            .kv
            .iter()
            .map(|(k, v)| (g.constant_ref(k), g.constant_ref(v)))
            .collect();
        let logits = arch.forward(
            &mut g,
            &self.cfg,
            &self.arch,
            h_in,
            &[position],
            &group_kv,
            position,
            &cross_vars,
        )?;
        g.value(logits).clone().reshape(vec![self.vocab_size()])
    }

    /// Empty Medusa self-attention cache for one stream.
    pub fn medusa_cache(&self, enc: &EncoderOutput) -> Result<KVCache> {
        let arch = self.medusa_arch()?;
        let cross = self.medusa_cross(enc)?;
        Ok(KVCache::new(arch.blocks.len(), self.cfg.d_model, cross.kv))
    }

    /// Feeds base hidden rows for positions `position..position+P` through
    /// the Medusa head. Row `p`'s logits draft the token at input position
    /// `position + p + 2`. The cache must hold exactly `position` rows.
    pub fn medusa_forward(&self, hidden: &Tensor, position: usize, cache: &mut KVCache) -> Result<Tensor> {
        let arch = self.medusa_arch()?;
        if cache.len() != position {
            return invalid(format!(
                "medusa cache holds {} positions, expected {position}",
                cache.len()
            ));
        }
        if cache.n_layers() != arch.blocks.len() {
            return shape_err("medusa cache has the wrong block count");
        }
        if hidden.cols() != self.cfg.d_model || hidden.rows() == 0 {
            return shape_err(format!("hidden rows {:?}", hidden.shape()));
        }
        let hidden = hidden.clone().reshape(vec![hidden.rows(), self.cfg.d_model])?;
        let (logits, new_kv) = {
            let mut g = Graph::inference(&self.params);
            let h = g.constant(hidden);
            let past: Vec<(Var, Var)> = (0..cache.n_layers())
                .map(|l| (g.constant_ref(cache.keys(l)), g.constant_ref(cache.values(l))))
                .collect();
            let cross: Vec<(Var, Var)> = (0..cache.n_layers())
                .map(|l| {
                    let (k, v) = cache.cross(l);
                    (g.constant_ref(k), g.constant_ref(v))
                })
                .collect();
            let pass = arch.forward(&mut g, &self.cfg, &self.arch, h, position, Some(&past), &cross)?;
            let new_kv: Vec<(Tensor, Tensor)> = pass
                .new_kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect();
            (g.value(pass.logits).clone(), new_kv)
        };
        cache.append(new_kv)?;
        Ok(logits)
    }
}
