/// Case-folds, collapses whitespace runs to one space and trims. Accents
/// and punctuation are kept, so "Eugene" and "Eugène" stay distinct.
///
/// Folding is per character: the single-character lowercase mapping, plus
/// the simple case-fold targets of characters whose lowercase form is
/// itself (final sigma, long s, Greek symbol variants).
pub fn normalize_answer_surface(s: &str) -> String {
    let folded: String = s.chars().map(fold_char).collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fold_char(c: char) -> char {
    match c {
        'ς' => 'σ',
        'ſ' => 's',
        'ϐ' => 'β',
        'ϑ' => 'θ',
        'ϕ' => 'φ',
        'ϖ' => 'π',
        'ϰ' => 'κ',
        'ϱ' => 'ρ',
        'ϵ' => 'ε',
        '\u{1E9B}' => '\u{1E61}',
        '\u{0345}' | '\u{1FBE}' => 'ι',
        _ => {
            let mut lower = c.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(l), None) => l,
                _ => c,
            }
        }
    }
}

/// True iff `answer` equals some alias after surface normalization.
pub fn surface_form_match(answer: &str, gold_aliases: &[String]) -> bool {
    let a = normalize_answer_surface(answer);
    gold_aliases
        .iter()
        .any(|g| normalize_answer_surface(g) == a)
}
