//! `{name}` placeholder substitution.

use std::collections::BTreeSet;

fn placeholder_at(s: &str) -> Option<(&str, usize)> {
    let rest = s.strip_prefix('{')?;
    let end = rest.find('}')?;
    let name = &rest[..end];
    let valid = !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_');
    valid.then_some((name, end + 2))
}

/// Replaces `{name}` for every name in `values` in a single pass, so text
/// substituted in never gets expanded again. Unknown placeholders are left
/// untouched.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut i = 0;
    while i < template.len() {
        let rest = &template[i..];
        if let Some((name, len)) = placeholder_at(rest) {
            if let Some((_, v)) = values.iter().find(|(k, _)| *k == name) {
                out.push_str(v);
                i += len;
                continue;
            }
        }
        let ch = rest.chars().next().expect("in bounds");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

/// Number of occurrences of `{name}`.
pub fn count(template: &str, name: &str) -> usize {
    template.matches(&format!("{{{name}}}")).count()
}

/// Every placeholder name that appears in the template.
pub fn placeholders(template: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (i, _) in template.match_indices('{') {
        if let Some((name, _)) = placeholder_at(&template[i..]) {
            out.insert(name.to_string());
        }
    }
    out
}
