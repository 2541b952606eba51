//! Medusa-style baseline: transformer blocks over the base decoder's final
//! hidden state, drafting the same next-next token as the parasitic network.

use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::model::layers::{DecoderLayer, Norm};
use crate::model::{Arch, LayerCounters, ModelConfig};
use crate::numcore::{Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct MedusaArch {
    pub blocks: Vec<DecoderLayer>,
    pub ln_post: Norm,
}

pub(crate) struct MedusaPass {
    pub logits: Var,
    pub new_kv: Vec<(Var, Var)>,
}

impl MedusaArch {
    pub(crate) fn build(
        cfg: &ModelConfig,
        n_blocks: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let out_std = (1.0 / d as f64).sqrt() / (2.0 * n_blocks as f64).sqrt();
        let blocks = (0..n_blocks)
            .map(|b| DecoderLayer::new(store, rng, &format!("medusa.block{b}"), d, cfg.d_ff, out_std))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln_post: Norm::new(store, "medusa.ln_post", d)?,
        })
    }

    pub(crate) fn cross_kv<T: Scalar>(&self, g: &mut Graph<'_, T>, enc: Var) -> Result<Vec<(Var, Var)>> {
        self.blocks
            .iter()
            .map(|b| b.cross_attn.project_kv(g, enc))
            .collect()
    }

    /// Processes base hidden rows for positions `start..start+P`. Row `p`
    /// drafts the token two positions ahead of its input position.
    /// The output projection reuses the token embedding without passing
    /// gradient into it, so training this head never moves the base model.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        cfg: &ModelConfig,
        arch: &Arch,
        hidden: Var,
        start: usize,
        past: Option<&[(Var, Var)]>,
        cross: &[(Var, Var)],
    ) -> Result<MedusaPass> {
        if cross.len() != self.blocks.len() || past.is_some_and(|p| p.len() != self.blocks.len()) {
            return invalid("medusa cache does not match block count");
        }
        let mut x = hidden;
        let mut new_kv = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let out = block.forward(g, x, start, past.map(|p| p[b]), cross[b], cfg.n_heads)?;
            x = out.x;
            new_kv.push((out.k_new, out.v_new));
        }
        LayerCounters::add(&arch.counters.medusa, self.blocks.len());
        let h = self.ln_post.forward(g, x)?;
        let emb = g.param_detached(arch.base.tok_embed);
        let logits = g.matmul_bt(h, emb)?;
        Ok(MedusaPass { logits, new_kv })
    }
}
