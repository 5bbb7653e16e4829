//! Tokenization shared by the sessionizer and the feature extractors.

use std::collections::HashSet;

/// Han ideographs and Japanese kana. Hangul is space-delimited and is
/// treated like any other alphabetic script.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF       // hiragana, katakana
        | 0x3400..=0x4DBF     // ext A
        | 0x4E00..=0x9FFF     // unified ideographs
        | 0xF900..=0xFAFF     // compatibility ideographs
        | 0x20000..=0x2EBEF   // ext B-F
        | 0x30000..=0x3134F)  // ext G
}

/// Whitespace-delimited tokens, with each CJK character counted as one word.
pub fn word_count(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if is_cjk(c) {
            count += 1;
            in_word = false;
        } else if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            count += 1;
            in_word = true;
        }
    }
    count
}

/// Lowercased token set: CJK per character, other scripts split on
/// anything that is not alphanumeric.
pub fn token_set(text: &str) -> HashSet<String> {
    let mut tokens = HashSet::new();
    let mut current = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !current.is_empty() {
                tokens.insert(std::mem::take(&mut current));
            }
            tokens.insert(c.to_string());
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.insert(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.insert(current);
    }
    tokens
}

/// Jaccard index of two sets, with J(∅, ∅) = 1.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|t| large.contains(*t)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_counts() {
        assert_eq!(word_count("a b"), 2);
        assert_eq!(word_count("  c d\te\nf "), 4);
        assert_eq!(word_count("你好世界啊"), 5);
        assert_eq!(word_count("解释 recursion 吗"), 4);
        assert_eq!(word_count("abc你好"), 3);
        assert_eq!(word_count(""), 0);
    }

    #[test]
    fn tokens_lowercase_and_split_on_punctuation() {
        let t = token_set("Why does Recursion, need a base-case?");
        let mut v: Vec<_> = t.into_iter().collect();
        v.sort();
        assert_eq!(v, ["a", "base", "case", "does", "need", "recursion", "why"]);
        assert_eq!(token_set("递归").len(), 2);
    }
}
