//! Synthetic six-language translation task.
//!
//! Languages 0–2 shift every content token by `5(j+1)` modulo the content
//! vocabulary; languages 3–5 reverse the sequence and then shift. The
//! speech-like input is a fixed random vector per source token, each frame
//! repeated twice along time, with Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::vocab::{self, N_LANGS};
use crate::model::ModelConfig;
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub v_content: usize,
    pub d_feat: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
    pub frame_repeat: usize,
    /// Seeds the per-token feature vectors.
    pub feature_seed: u64,
}

impl SyntheticTaskSpec {
    pub fn for_model(cfg: &ModelConfig, feature_seed: u64) -> Self {
        Self {
            v_content: cfg.v_content,
            d_feat: cfg.d_feat,
            min_len: 4,
            max_len: 16,
            noise_sigma: 0.1,
            frame_repeat: 2,
            feature_seed,
        }
    }

    pub fn n_langs(&self) -> usize {
        N_LANGS
    }

    pub fn shift(lang: usize) -> usize {
        5 * (lang + 1)
    }

    /// Content tokens of the translation of `src` into `lang`.
    pub fn transform(&self, lang: usize, src: &[u32]) -> Result<Vec<u32>> {
        if lang >= N_LANGS {
            return invalid(format!("target language {lang} out of range"));
        }
        let idx = src
            .iter()
            .map(|&t| {
                vocab::content_index(t)
                    .filter(|&c| c < self.v_content)
                    .ok_or_else(|| crate::Error::Invalid(format!("{t} is not a content token")))
            })
            .collect::<Result<Vec<_>>>()?;
        let shift = Self::shift(lang);
        let ordered: Box<dyn Iterator<Item = &usize>> = if lang < 3 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        Ok(ordered
            .map(|&c| vocab::content_token((c + shift) % self.v_content))
            .collect())
    }

    /// Full decoder target: `[BOS, LANG, content…, EOS]`.
    pub fn target_tokens(&self, lang: usize, src: &[u32]) -> Result<Vec<u32>> {
        let mut out = vocab::build_prompt(lang)?;
        out.extend(self.transform(lang, src)?);
        out.push(vocab::EOS);
        Ok(out)
    }

    fn token_vectors(&self) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.feature_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.v_content * self.d_feat)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect()
    }

    /// `[frame_repeat·len × d_feat]` features for `src`, noise seeded by `seed`.
    pub fn features(&self, src: &[u32], seed: u64) -> Result<Tensor> {
        let table = self.token_vectors();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_sigma).map_err(|e| crate::Error::Invalid(e.to_string()))?;
        let mut data = Vec::with_capacity(src.len() * self.frame_repeat * self.d_feat);
        for &t in src {
            let c = vocab::content_index(t)
                .filter(|&c| c < self.v_content)
                .ok_or_else(|| crate::Error::Invalid(format!("{t} is not a content token")))?;
            let row = &table[c * self.d_feat..(c + 1) * self.d_feat];
            for _ in 0..self.frame_repeat {
                data.extend(row.iter().map(|&v| v + noise.sample(&mut rng) as f32));
            }
        }
        Tensor::matrix(src.len() * self.frame_repeat, self.d_feat, data)
    }

    /// Draws a random source sentence and its translation into `tgt_lang`.
    pub fn gen_example<R: Rng>(&self, rng: &mut R, tgt_lang: usize) -> Result<Example> {
        if tgt_lang >= N_LANGS {
            return invalid(format!("target language {tgt_lang} out of range"));
        }
        let len = rng.gen_range(self.min_len..=self.max_len);
        let src: Vec<u32> = (0..len)
            .map(|_| vocab::content_token(rng.gen_range(0..self.v_content)))
            .collect();
        let seed = rng.gen();
        self.example(tgt_lang, src, seed)
    }

    pub fn example(&self, tgt_lang: usize, src: Vec<u32>, seed: u64) -> Result<Example> {
        let tgt = self.target_tokens(tgt_lang, &src)?;
        let features = self.features(&src, seed)?;
        Ok(Example {
            tgt_lang,
            src,
            tgt,
            seed,
            features,
        })
    }

    /// Example number `index` of the stream identified by `seed`.
    pub fn example_at(&self, seed: u64, index: u64) -> Result<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
        let lang = rng.gen_range(0..N_LANGS);
        self.gen_example(&mut rng, lang)
    }

    /// Held-out examples; drawn from a stream disjoint from training seeds.
    pub fn eval_set(&self, seed: u64, count: usize) -> Result<Vec<Example>> {
        (0..count as u64)
            .map(|i| self.example_at(seed ^ EVAL_DOMAIN, i))
            .collect()
    }
}

const EVAL_DOMAIN: u64 = 0x5eed_e7a1_0000_0000;

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One source/target pair with its regenerated features.
#[derive(Clone, Debug)]
pub struct Example {
    pub tgt_lang: usize,
    /// Content tokens only.
    pub src: Vec<u32>,
    /// `[BOS, LANG, content…, EOS]`
    pub tgt: Vec<u32>,
    pub seed: u64,
    pub features: Tensor,
}

impl Example {
    pub fn prompt(&self) -> &[u32] {
        &self.tgt[..2]
    }

    /// Target continuation after the prompt, EOS included.
    pub fn reference(&self) -> &[u32] {
        &self.tgt[2..]
    }
}
