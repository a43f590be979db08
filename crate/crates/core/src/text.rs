//! Text normalisation shared by the pool, detector and annotator.

/// Fixed English function-word list removed before vectorisation:
/// articles, prepositions, pronouns, conjunctions and copulas.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "about", "above", "across", "after", "against", "along", "among", "around",
    "at", "before", "behind", "below", "beneath", "beside", "between", "by", "down", "during",
    "for", "from", "in", "inside", "into", "near", "of", "off", "on", "onto", "out", "over",
    "through", "to", "toward", "under", "up", "upon", "with", "within", "without", "i", "me", "my",
    "we", "our", "you", "your", "he", "him", "his", "she", "her", "it", "its", "they", "them",
    "their", "this", "that", "these", "those", "and", "or", "but", "is", "are", "was", "were",
    "be", "been", "being",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.contains(&token)
}

/// Lowercase, trim and collapse internal whitespace. Idempotent.
pub fn canonicalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercased alphanumeric runs; everything else is a separator.
pub fn raw_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Tokens with stop words removed.
pub fn content_tokens(s: &str) -> Vec<String> {
    raw_tokens(s)
        .into_iter()
        .filter(|t| !is_stop_word(t))
        .collect()
}

fn strip_list_marker(line: &str) -> (bool, &str) {
    let t = line.trim();
    for bullet in ["•", "-", "*", "·", "–"] {
        if let Some(rest) = t.strip_prefix(bullet) {
            return (true, rest.trim());
        }
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return (true, r.trim());
        }
    }
    (false, t)
}

fn clean_item(item: &str) -> String {
    let trimmed = item
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '“' || c == '”')
        .trim_end_matches(['.', ';', ':'])
        .trim();
    canonicalize(trimmed)
}

/// Parse a free-form list response into canonical items.
///
/// Lines carrying a bullet or number marker are one item each; unmarked
/// lines are split on commas. Items shorter than two characters are dropped.
pub fn parse_list(text: &str) -> Vec<String> {
    let mut items = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (marked, body) = strip_list_marker(line);
        let pieces: Vec<&str> = if marked {
            vec![body]
        } else {
            body.split(',').collect()
        };
        for p in pieces {
            let item = clean_item(p);
            if item.chars().count() >= 2 {
                items.push(item);
            }
        }
    }
    items
}

/// Remove one leading article ("a", "an", "the").
pub fn strip_article(phrase: &str) -> &str {
    let t = phrase.trim();
    for art in ["a ", "an ", "the ", "A ", "An ", "The "] {
        if let Some(rest) = t.strip_prefix(art) {
            return rest.trim_start();
        }
    }
    t
}

/// Tag name an image carries when it shows `attribute`,
/// e.g. "a sharp blade" -> `has_sharp_blade`.
pub fn attribute_tag(attribute: &str) -> String {
    let core = strip_article(&canonicalize(attribute)).to_string();
    let slug: Vec<String> = raw_tokens(&core);
    format!("has_{}", slug.join("_"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_collapses() {
        assert_eq!(canonicalize("  Sharp   Blade \t"), "sharp blade");
        assert_eq!(canonicalize(&canonicalize(" A  B ")), canonicalize(" A  B "));
    }

    #[test]
    fn parses_bullets() {
        assert_eq!(
            parse_list("• sharp blade\n• wooden handle"),
            vec!["sharp blade", "wooden handle"]
        );
    }

    #[test]
    fn parses_numbering_and_commas() {
        assert_eq!(
            parse_list("1. a long, thin blade\n2) a pen\nmetal, plastic, x"),
            vec!["a long, thin blade", "a pen", "metal", "plastic"]
        );
    }

    #[test]
    fn stop_words_are_dropped() {
        assert_eq!(content_tokens("a cat on a bed"), vec!["cat", "bed"]);
    }

    #[test]
    fn tags_follow_attribute_slug() {
        assert_eq!(attribute_tag("a can"), "has_can");
        assert_eq!(attribute_tag("a sharp blade"), "has_sharp_blade");
        assert_eq!(attribute_tag("a long, thin blade"), "has_long_thin_blade");
    }
}
