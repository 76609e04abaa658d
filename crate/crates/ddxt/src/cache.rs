//! Preprocessed example caches, so training does not re-tokenize.
//!
//! `"DDXC" | u32 version | u64 vocab fingerprint | u32 max_enc | u32 max_dec |
//! u64 count`, then per example `u32 label | u32 enc_len | u32 dec_len` and
//! the encoder ids, decoder input ids and decoder targets as `u32`s.

use std::fs;
use std::path::Path;

use ddxt_core::dataset::TokenizedExample;
use ddxt_core::vocab::{EncodedSequence, Vocabulary};

use crate::error::{Error, Result};
use crate::vocab_file;

pub const MAGIC: &[u8; 4] = b"DDXC";
pub const VERSION: u32 = 1;

/// FNV-1a over both vocabulary files.
pub fn fingerprint(enc: &Vocabulary, dec: &Vocabulary) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in vocab_file::to_text(enc).bytes().chain([0]).chain(vocab_file::to_text(dec).bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cache {
    pub fingerprint: u64,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub examples: Vec<TokenizedExample>,
}

pub fn to_bytes(c: &Cache) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.fingerprint.to_le_bytes());
    out.extend_from_slice(&(c.max_enc_len as u32).to_le_bytes());
    out.extend_from_slice(&(c.max_dec_len as u32).to_le_bytes());
    out.extend_from_slice(&(c.examples.len() as u64).to_le_bytes());
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for ex in &c.examples {
        put(ex.class_label);
        put(ex.encoder.true_length);
        put(ex.decoder_input.true_length);
        for &id in ex.encoder.ids.iter().chain(&ex.decoder_input.ids).chain(&ex.decoder_target) {
            put(id);
        }
    }
    out
}

pub fn from_bytes(path: &Path, buf: &[u8]) -> Result<Cache> {
    let fail = |msg: &str| Error::format(path, msg);
    if buf.len() < 32 {
        return Err(fail("truncated cache"));
    }
    if &buf[..4] != MAGIC {
        return Err(fail("not an example cache"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().expect("8 bytes"));
    if u32_at(4) != VERSION {
        return Err(fail("unsupported cache version"));
    }
    let fingerprint = u64_at(8);
    let max_enc_len = u32_at(16) as usize;
    let max_dec_len = u32_at(20) as usize;
    let count = u64_at(24) as usize;
    let words = buf[32..].chunks_exact(4);
    let per = 3 + max_enc_len + 2 * max_dec_len;
    if Some(words.len()) != count.checked_mul(per) || !words.remainder().is_empty() {
        return Err(fail("cache length does not match its header"));
    }
    let ids: Vec<usize> = words.map(|w| u32::from_le_bytes(w.try_into().expect("4 bytes")) as usize).collect();
    let examples = ids
        .chunks(per)
        .map(|r| {
            let (enc, rest) = r[3..].split_at(max_enc_len);
            let (dec_in, dec_tgt) = rest.split_at(max_dec_len);
            TokenizedExample {
                encoder: EncodedSequence {
                    ids: enc.to_vec(),
                    true_length: r[1],
                },
                decoder_input: EncodedSequence {
                    ids: dec_in.to_vec(),
                    true_length: r[2],
                },
                decoder_target: dec_tgt.to_vec(),
                class_label: r[0],
            }
        })
        .collect();
    Ok(Cache {
        fingerprint,
        max_enc_len,
        max_dec_len,
        examples,
    })
}

pub fn save(path: &Path, c: &Cache) -> Result<()> {
    fs::write(path, to_bytes(c)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Cache> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &buf)
}
