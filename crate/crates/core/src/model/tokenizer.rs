//! Byte-level tokenizer with six reserved control tokens.
//!
//! Ids `0..=255` are raw bytes. Control tokens live above the byte range so
//! no input text can ever produce one; only the sequence builder inserts them.

pub type TokenId = usize;

pub const PAD: TokenId = 256;
pub const STOP: TokenId = 257;
pub const IMAGE: TokenId = 258;
pub const ROLE_SYSTEM: TokenId = 259;
pub const ROLE_HUMAN: TokenId = 260;
pub const ROLE_ASSISTANT: TokenId = 261;
pub const VOCAB_SIZE: usize = 262;

/// Printable marker for a control token, or `None` for byte ids.
pub fn special_marker(id: TokenId) -> Option<&'static str> {
    Some(match id {
        PAD => "<pad>",
        STOP => "<stop>",
        IMAGE => "<image>",
        ROLE_SYSTEM => "<system>",
        ROLE_HUMAN => "<human>",
        ROLE_ASSISTANT => "<assistant>",
        _ => return None,
    })
}

pub fn is_special(id: TokenId) -> bool {
    (PAD..VOCAB_SIZE).contains(&id)
}

pub fn tokenize(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| b as TokenId).collect()
}

/// Inverse of [`tokenize`]. Control tokens are rendered as their marker
/// strings and ids beyond the vocabulary as `<unk:N>`; neither can be
/// confused with a byte round trip because markers only appear here.
pub fn detokenize(ids: &[TokenId]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            out.push(id as u8);
        } else if let Some(marker) = special_marker(id) {
            out.extend_from_slice(marker.as_bytes());
        } else {
            out.extend_from_slice(format!("<unk:{id}>").as_bytes());
        }
    }
    out
}

/// Lossy UTF-8 rendering for logs and chat output.
pub fn detokenize_lossy(ids: &[TokenId]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}
