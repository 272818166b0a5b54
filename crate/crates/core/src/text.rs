//! Small text helpers shared across modules.

use std::fmt;

/// Case-insensitive substring test. An empty needle never matches.
pub(crate) fn contains_ci(haystack: &str, needle: &str) -> bool {
    let needle = needle.trim();
    if needle.is_empty() {
        return false;
    }
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

/// Keeps at most `max_chars` Unicode scalar values.
pub(crate) fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

/// Rough sentence count: runs of text terminated by `.`, `!` or `?`, plus a
/// trailing unterminated fragment.
pub(crate) fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_sentence = false;
    for ch in text.chars() {
        if matches!(ch, '.' | '!' | '?' | '。' | '！' | '？') {
            if in_sentence {
                count += 1;
            }
            in_sentence = false;
        } else if !ch.is_whitespace() {
            in_sentence = true;
        }
    }
    count + usize::from(in_sentence)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct UnfilledPlaceholder(pub String);

impl fmt::Display for UnfilledPlaceholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "template placeholder {{{}}} has no value", self.0)
    }
}

/// Fills `{name}` placeholders (lowercase ASCII and underscores) in a single
/// pass. Substituted values are never rescanned, so case text containing braces
/// is inserted untouched. Braces that do not form a placeholder are copied.
pub(crate) fn fill_template(
    template: &str,
    values: &[(&str, &str)],
) -> Result<String, UnfilledPlaceholder> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            match values.iter().find(|(key, _)| *key == name) {
                Some((_, value)) => out.push_str(value),
                None => return Err(UnfilledPlaceholder(name.to_string())),
            }
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}
