//! Token id layout: three specials, six target-language ids, then content.

use crate::error::{invalid, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const LANG_BASE: u32 = 3;
pub const N_LANGS: usize = 6;
pub const CONTENT_BASE: u32 = LANG_BASE + N_LANGS as u32;

pub fn vocab_size(v_content: usize) -> usize {
    CONTENT_BASE as usize + v_content
}

pub fn lang_token(lang: usize) -> Result<u32> {
    if lang >= N_LANGS {
        return invalid(format!("target language {lang} out of range 0..{N_LANGS}"));
    }
    Ok(LANG_BASE + lang as u32)
}

pub fn is_content(token: u32) -> bool {
    token >= CONTENT_BASE
}

pub fn content_token(index: usize) -> u32 {
    CONTENT_BASE + index as u32
}

pub fn content_index(token: u32) -> Option<usize> {
    is_content(token).then(|| (token - CONTENT_BASE) as usize)
}

/// Decoder prompt: `[BOS, LANG_tgt]`. The language id names the language to
/// produce, not the language of the input.
pub fn build_prompt(tgt_lang: usize) -> Result<Vec<u32>> {
    Ok(vec![BOS, lang_token(tgt_lang)?])
}
