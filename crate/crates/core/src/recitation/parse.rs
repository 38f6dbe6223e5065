use crate::corpus::ViolationReason;

use super::RecitationPromptTemplate;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRecitation {
    pub document: String,
    pub answer: String,
}

/// Parses with single-line answers.
pub fn parse_recitation(
    raw_completion: &str,
    template: &RecitationPromptTemplate,
) -> Result<ParsedRecitation, ViolationReason> {
    parse_recitation_with(raw_completion, template, false)
}

/// Accepted grammar: a non-empty document block, a blank line, a line
/// starting with the answer marker, a non-empty answer, then only whitespace
/// or the next question marker (after which anything is ignored).
///
/// The first answer-marker line wins. With `multiline_answers` the answer
/// extends over following non-blank lines.
pub fn parse_recitation_with(
    raw_completion: &str,
    template: &RecitationPromptTemplate,
    multiline_answers: bool,
) -> Result<ParsedRecitation, ViolationReason> {
    let answer_marker = template.markers.answer.as_str();
    let question_marker = template.markers.question.as_str();
    let text = raw_completion.replace("\r\n", "\n");
    let lines: Vec<&str> = text.split('\n').collect();
    let is_blank = |l: &str| l.trim().is_empty();

    let answer_at = lines
        .iter()
        .position(|l| l.trim_start().starts_with(answer_marker));
    let doc_lines = &lines[..answer_at.unwrap_or(lines.len())];
    let document = doc_lines.join("\n").trim().to_string();
    if document.is_empty() {
        return Err(ViolationReason::EmptyDocument);
    }
    let Some(answer_at) = answer_at else {
        return Err(ViolationReason::MissingAnswerMarker);
    };
    if !is_blank(lines[answer_at - 1]) {
        return Err(ViolationReason::MissingBlankLine);
    }

    let first = lines[answer_at].trim_start()[answer_marker.len()..].to_string();
    let mut answer_lines = vec![first];
    let mut rest = answer_at + 1;
    if multiline_answers {
        while rest < lines.len()
            && !is_blank(lines[rest])
            && !lines[rest].trim_start().starts_with(question_marker)
        {
            answer_lines.push(lines[rest].to_string());
            rest += 1;
        }
    }
    let answer = answer_lines.join("\n").trim().to_string();
    if answer.is_empty() {
        return Err(ViolationReason::EmptyAnswer);
    }

    if let Some(next) = lines[rest..].iter().find(|l| !is_blank(l)) {
        if !next.trim_start().starts_with(question_marker) {
            return Err(ViolationReason::TrailingGarbage);
        }
    }
    Ok(ParsedRecitation { document, answer })
}
