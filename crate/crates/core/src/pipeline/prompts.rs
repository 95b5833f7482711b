//! Prompt templates for the completer and responder roles.

pub const QUESTIONER_PREFIX: &str = "I will give you some objects. Please list 3 questions about the given objects.";

pub const WRITER_PREFIX: &str = "Please paraphrase the following sentences into one sentence.";

pub const IMAGINATOR_PREFIX: &str =
    "Imagine other objects that are likely to appear in the scene described below. List them separated by commas.";

pub const SPLITTER_PREFIX: &str = "Divide the following object into its physical parts, separated by commas. \
If the object is non-physical or cannot be further divided, answer with nothing.";

/// Questioner prompt with the person exemplar, asking about `tag`.
pub fn questioner(tag: &str) -> String {
    format!(
        "{QUESTIONER_PREFIX} These questions must be answerable based on a photograph of the object \
and cannot rely on any outside knowledge. Some examples are listed as follows:\n\n\
Human: Person\n\
Assistant: Q1: What is the sex of this person? Q2: What is the hairstyle of this person? Q3: What is this person doing?\n\n\
Human: {tag}\n\
Assistant:"
    )
}

/// Responder prompt for one question about a region crop.
pub fn responder(question: &str) -> String {
    format!("Human: {question}\nAssistant:")
}

/// Writer prompt composing three answers into one caption.
pub fn writer(answers: &[String]) -> String {
    let mut p = WRITER_PREFIX.to_string();
    for a in answers {
        p.push(' ');
        p.push_str(a.trim());
    }
    p
}

pub fn imaginator(caption: &str) -> String {
    format!("{IMAGINATOR_PREFIX}\nScene: {caption}")
}

pub fn splitter(tag: &str) -> String {
    format!("{SPLITTER_PREFIX}\nObject: {tag}")
}

/// Returns the text after the last `Human:` marker up to the next
/// `Assistant:`.
pub fn last_human_turn(prompt: &str) -> Option<&str> {
    let start = prompt.rfind("Human:")? + "Human:".len();
    let rest = &prompt[start..];
    let end = rest.find("Assistant:").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Text following a `Label:` line, e.g. `Scene:` or `Object:`.
pub fn field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
}

/// Splits `Q1: ... Q2: ... Q3: ...` into the individual questions.
pub fn parse_questions(text: &str) -> Vec<String> {
    let mut marks = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i + 2 < bytes.len() {
        if bytes[i] == b'Q' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b':' {
                marks.push((i, j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    marks
        .iter()
        .enumerate()
        .map(|(k, &(_, body))| {
            let end = marks.get(k + 1).map_or(text.len(), |m| m.0);
            text[body..end].trim().to_string()
        })
        .filter(|q| !q.is_empty())
        .collect()
}

/// Splits a comma or newline separated completion into items.
pub fn parse_list(text: &str) -> Vec<String> {
    text.split([',', '\n', ';'])
        .map(|s| s.trim().trim_end_matches('.').trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn questioner_embeds_exemplar_and_tag() {
        let p = questioner("lampshade");
        assert!(p.starts_with(QUESTIONER_PREFIX));
        assert!(p.contains("Q1: What is the sex of this person?"));
        assert_eq!(last_human_turn(&p), Some("lampshade"));
    }

    #[test]
    fn writer_is_verbatim_prefix_plus_answers() {
        let p = writer(&["A.".into(), "B.".into(), "C.".into()]);
        assert_eq!(p, "Please paraphrase the following sentences into one sentence. A. B. C.");
    }

    #[test]
    fn parses_three_questions() {
        let qs = parse_questions(
            "Q1: What is the sex of this person? Q2: What is the hairstyle of this person? Q3: What is this person doing?",
        );
        assert_eq!(
            qs,
            [
                "What is the sex of this person?",
                "What is the hairstyle of this person?",
                "What is this person doing?"
            ]
        );
        assert!(parse_questions("no questions here").is_empty());
    }

    #[test]
    fn parses_lists() {
        assert_eq!(parse_list("roof, door,\nwindows; walls."), ["roof", "door", "windows", "walls"]);
        assert!(parse_list("  ").is_empty());
    }
}
