//! Byte-level tokenizer: one token per byte plus four specials.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(token: usize) -> bool {
    (PAD..VOCAB_SIZE).contains(&token)
}

/// `BOS, bytes..., EOS`
pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    let mut out = Vec::with_capacity(bytes.len() + 2);
    out.push(BOS);
    out.extend(encode_bytes(bytes));
    out.push(EOS);
    out
}

/// Bytes without framing.
pub fn encode_bytes(bytes: &[u8]) -> impl Iterator<Item = usize> + '_ {
    bytes.iter().map(|&b| b as usize)
}

/// Byte content of a token sequence; special tokens are dropped.
pub fn detokenize_bytes(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn detokenize(tokens: &[usize]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(tokens)).into_owned()
}

/// Human-readable rendering of generated text: `SEP` becomes a newline,
/// other specials are dropped.
pub fn render(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter_map(|&t| match t {
            SEP => Some(b'\n'),
            t if t < 256 => Some(t as u8),
            _ => None,
        })
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn framing() {
        assert_eq!(tokenize(""), vec![BOS, EOS]);
        assert_eq!(tokenize("ab"), vec![BOS, 97, 98, EOS]);
    }

    #[test]
    fn render_maps_separator() {
        let mut t = tokenize("LABEL: Safe");
        t.pop();
        t.push(SEP);
        t.extend(encode_bytes(b"ok"));
        assert_eq!(render(&t), "LABEL: Safe\nok");
    }

    proptest! {
        #[test]
        fn bijective_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            prop_assert_eq!(detokenize_bytes(&tokenize_bytes(&bytes)), bytes);
        }

        #[test]
        fn utf8_round_trip(s in ".*") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
