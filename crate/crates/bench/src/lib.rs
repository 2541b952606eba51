//! Fixtures shared by the criterion benches.
//!
//! Set `KVPSN_BENCH_CHECKPOINT` to a trained checkpoint to time realistic
//! acceptance rates; otherwise a freshly initialized default model is used.

use std::path::Path;

use kvpsn_core::harness::{unpack, Checkpoint};
use kvpsn_core::model::{EncoderOutput, Model, ModelConfig};
use kvpsn_core::train::{Example, SyntheticTaskSpec};

pub struct Fixture {
    pub model: Model,
    pub examples: Vec<Example>,
    pub encoded: Vec<EncoderOutput>,
}

impl Fixture {
    pub fn load(count: usize) -> kvpsn_core::Result<Self> {
        let (model, task) = match std::env::var("KVPSN_BENCH_CHECKPOINT") {
            Ok(path) => {
                let run = unpack(&Checkpoint::load(Path::new(&path))?)?;
                (run.model, run.task)
            }
            Err(_) => {
                let model = Model::new(ModelConfig::default(), 0)?;
                let task = SyntheticTaskSpec::for_model(&model.cfg, 7);
                (model, task)
            }
        };
        let examples = task.eval_set(2024, count)?;
        let encoded = examples
            .iter()
            .map(|ex| model.encode_features(&ex.features))
            .collect::<kvpsn_core::Result<_>>()?;
        Ok(Self {
            model,
            examples,
            encoded,
        })
    }
}
