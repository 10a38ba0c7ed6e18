//! Answer extraction from free-form model output.

/// Label extracted from a completion, or `None` when nothing matched.
pub type Extracted = Option<String>;

fn match_label<'a>(token: &str, labels: &[&'a str]) -> Option<&'a str> {
    labels.iter().copied().find(|l| l.eq_ignore_ascii_case(token))
}

fn leading_token(text: &str) -> &str {
    let text = text.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, ':' | '*' | '(' | '[' | '"' | '\'' | '`' | '-' | '=' | '>')
    });
    let end = text
        .char_indices()
        .find(|(_, c)| !c.is_alphanumeric())
        .map_or(text.len(), |(i, _)| i);
    &text[..end]
}

/// Looks for the last `marker` that is followed by a label (ignoring case
/// and punctuation such as `**`, `(`, `:`); failing that, takes the last
/// standalone word equal to a label.
pub fn extract_answer(raw: &str, labels: &[&str], marker: &str) -> Extracted {
    if !marker.is_empty() {
        // ASCII lowering keeps byte offsets aligned with `raw`.
        let hay = raw.to_ascii_lowercase();
        let needle = marker.to_ascii_lowercase();
        let starts: Vec<usize> = hay.match_indices(&needle).map(|(i, _)| i).collect();
        for start in starts.into_iter().rev() {
            let after = &raw[start + needle.len()..];
            if let Some(label) = match_label(leading_token(after), labels) {
                return Some(label.to_string());
            }
        }
    }
    raw.split(|c: char| !c.is_alphanumeric())
        .rev()
        .filter(|w| !w.is_empty())
        .find_map(|w| match_label(w, labels))
        .map(str::to_string)
}
