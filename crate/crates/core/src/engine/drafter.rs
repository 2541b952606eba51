use crate::error::{invalid, Result};
use crate::kvpsn::DrafterCross;
use crate::model::{EncoderOutput, KVCache, Model};
use crate::numcore::Tensor;

use super::greedy_token;

/// What a drafter sees when proposing the token at `position + 1`.
pub struct DraftContext<'c> {
    /// The last committed token, sitting at `position`.
    pub token: u32,
    pub position: usize,
    /// Base cache holding exactly the positions `< position`.
    pub cache: &'c KVCache,
}

/// A source of one-token drafts.
///
/// Per-stream state is cloned when beam hypotheses fork.
pub trait Drafter {
    type State: Clone;

    /// Layer units charged for one `draft` call.
    fn units_per_draft(&self, model: &Model) -> usize;

    fn start(&self, model: &Model, enc: &EncoderOutput) -> Result<Self::State>;

    /// Receives final base hidden rows of newly committed positions, in order.
    fn observe(&self, _model: &Model, _state: &mut Self::State, _hidden: &Tensor) -> Result<()> {
        Ok(())
    }

    fn draft(&self, model: &Model, state: &mut Self::State, ctx: &DraftContext<'_>) -> Result<u32>;
}

/// Drafting blocks reading grouped base keys/values.
#[derive(Clone, Copy, Debug, Default)]
pub struct KvpsnDrafter;

impl Drafter for KvpsnDrafter {
    type State = std::sync::Arc<DrafterCross>;

    fn units_per_draft(&self, model: &Model) -> usize {
        model.cfg.n_groups()
    }

    fn start(&self, model: &Model, enc: &EncoderOutput) -> Result<Self::State> {
        Ok(std::sync::Arc::new(model.kvpsn_cross(enc)?))
    }

    fn draft(&self, model: &Model, state: &mut Self::State, ctx: &DraftContext<'_>) -> Result<u32> {
        let logits = model.kvpsn_forward(ctx.token, ctx.position, ctx.cache, state)?;
        Ok(greedy_token(logits.data()))
    }
}

/// Extra decoder blocks over the base's final hidden states, predicting two
/// positions ahead.
#[derive(Clone, Copy, Debug, Default)]
pub struct MedusaDrafter;

#[derive(Clone, Debug)]
pub struct MedusaState {
    cache: KVCache,
    pending: Option<Tensor>,
}

impl Drafter for MedusaDrafter {
    type State = MedusaState;

    fn units_per_draft(&self, model: &Model) -> usize {
        model.cfg.medusa_blocks
    }

    fn start(&self, model: &Model, enc: &EncoderOutput) -> Result<Self::State> {
        Ok(MedusaState {
            cache: model.medusa_cache(enc)?,
            pending: None,
        })
    }

    fn observe(&self, _model: &Model, state: &mut Self::State, hidden: &Tensor) -> Result<()> {
        match &mut state.pending {
            Some(p) => p.append_rows(hidden)?,
            None => state.pending = Some(hidden.clone()),
        }
        Ok(())
    }

    fn draft(&self, model: &Model, state: &mut Self::State, ctx: &DraftContext<'_>) -> Result<u32> {
        let Some(pending) = state.pending.take() else {
            return invalid("medusa draft without new hidden states");
        };
        let start = state.cache.len();
        if start + pending.rows() != ctx.position {
            return invalid(format!(
                "medusa has hidden rows up to {}, draft needs {}",
                start + pending.rows(),
                ctx.position
            ));
        }
        let logits = model.medusa_forward(&pending, start, &mut state.cache)?;
        Ok(greedy_token(logits.row(logits.rows() - 1)))
    }
}

/// Test double that drafts the base model's own greedy choice, computed on a
/// scratch copy of the cache. Its draft passes are charged like any other
/// drafter so cost arithmetic stays comparable.
#[derive(Clone, Copy, Debug)]
pub struct ForcedAccept {
    pub units: usize,
}

impl Drafter for ForcedAccept {
    type State = ();

    fn units_per_draft(&self, _model: &Model) -> usize {
        self.units
    }

    fn start(&self, _model: &Model, _enc: &EncoderOutput) -> Result<()> {
        Ok(())
    }

    fn draft(&self, model: &Model, _state: &mut (), ctx: &DraftContext<'_>) -> Result<u32> {
        let mut scratch = ctx.cache.clone();
        let out = model.decoder_forward(&[ctx.token], &mut scratch)?;
        Ok(greedy_token(out.logits.row(0)))
    }
}

/// Test double whose draft is never the base greedy choice.
#[derive(Clone, Copy, Debug)]
pub struct AlwaysWrong {
    pub units: usize,
}

impl Drafter for AlwaysWrong {
    type State = ();

    fn units_per_draft(&self, _model: &Model) -> usize {
        self.units
    }

    fn start(&self, _model: &Model, _enc: &EncoderOutput) -> Result<()> {
        Ok(())
    }

    fn draft(&self, model: &Model, _state: &mut (), ctx: &DraftContext<'_>) -> Result<u32> {
        let mut scratch = ctx.cache.clone();
        let out = model.decoder_forward(&[ctx.token], &mut scratch)?;
        let best = greedy_token(out.logits.row(0)) as usize;
        Ok(((best + 1) % model.vocab_size()) as u32)
    }
}
