/// Fixed substitution table applied before any counting or tokenization.
pub const PUNCTUATION_TABLE: &[(char, &str)] = &[
    ('\u{201C}', "\""),
    ('\u{201D}', "\""),
    ('\u{201E}', "\""),
    ('\u{00AB}', "\""),
    ('\u{00BB}', "\""),
    ('\u{2018}', "'"),
    ('\u{2019}', "'"),
    ('\u{201A}', "'"),
    ('\u{2013}', "-"),
    ('\u{2014}', "-"),
    ('\u{2012}', "-"),
    ('\u{2015}', "-"),
    ('\u{2212}', "-"),
    ('\u{2026}', "..."),
    ('\u{00A0}', " "),
    ('\u{2009}', " "),
    ('\u{202F}', " "),
    ('\t', " "),
];

/// Unifies quote, dash and ellipsis variants and collapses whitespace runs.
pub fn normalize_punctuation(text: &str) -> String {
    let mut mapped = String::with_capacity(text.len());
    for c in text.chars() {
        match PUNCTUATION_TABLE.iter().find(|(from, _)| *from == c) {
            Some((_, to)) => mapped.push_str(to),
            None => mapped.push(c),
        }
    }
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}
