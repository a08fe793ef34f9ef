//! Transcript normalization shared by corpus pairing and error-rate scoring.

/// Uppercases, strips punctuation except apostrophes, and collapses whitespace.
pub fn normalize_transcript(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_uppercase());
        } else if c.is_whitespace() {
            pending_space = true;
        } else {
            // punctuation acts as a separator only when it stands between words
            // separated by whitespace; "HELLO-WORLD" becomes "HELLOWORLD"
        }
    }
    out
}
