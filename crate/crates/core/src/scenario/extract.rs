use crate::aml::{xml_depth_violation, MAX_XML_DEPTH};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("response contains no BPMN definitions document")]
    NoCandidate,
    #[error("response contains XML but none of it is a BPMN definitions document: {0}")]
    Unparseable(String),
}

/// Whether `text` is well-formed XML whose root is a `definitions` element.
fn is_definitions(text: &str) -> Result<(), String> {
    if let Some((line, _)) = xml_depth_violation(text, MAX_XML_DEPTH) {
        return Err(format!("nesting deeper than {MAX_XML_DEPTH} at line {line}"));
    }
    let doc = roxmltree::Document::parse(text).map_err(|e| e.to_string())?;
    match doc.root_element().tag_name().name() {
        "definitions" => Ok(()),
        other => Err(format!("root element is {other}")),
    }
}

/// Contents of ``` fenced blocks, in order.
fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip the info string (`xml`, `bpmn`, ...)
        let Some(nl) = after.find('\n') else { break };
        let body = &after[nl + 1..];
        let Some(close) = body.find("```") else { break };
        out.push(&body[..close]);
        rest = &body[close + 3..];
    }
    out
}

/// From the first `<?xml` or `<...definitions` to the end of the last
/// closing `definitions` tag.
fn bare_span(raw: &str) -> Option<&str> {
    let start = raw.find("<?xml").or_else(|| {
        raw.match_indices('<').map(|(i, _)| i).find(|&i| {
            let tag = raw[i + 1..]
                .split(|c: char| c.is_whitespace() || c == '>' || c == '/')
                .next()
                .unwrap_or("");
            tag == "definitions" || tag.ends_with(":definitions")
        })
    })?;
    let tail = &raw[start..];
    let close = tail.rfind("definitions>")?;
    let end = close + "definitions>".len();
    let open = tail[..close].rfind("</")?;
    (open < close).then(|| &tail[..end])
}

/// Pulls the BPMN document out of a model reply: the whole reply if it is
/// one, else the first fenced block that is one, else the bare
/// `<?xml ...` / `<definitions ...` span. Surrounding prose is dropped.
pub fn extract_bpmn_xml(raw: &str) -> Result<String, ExtractError> {
    if is_definitions(raw).is_ok() {
        return Ok(raw.to_string());
    }
    let mut last_err = None;
    let candidates = fenced_blocks(raw).into_iter().chain(bare_span(raw));
    for c in candidates {
        let c = c.trim();
        if !c.starts_with('<') {
            continue;
        }
        match is_definitions(c) {
            Ok(()) => return Ok(c.to_string()),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.map_or(ExtractError::NoCandidate, ExtractError::Unparseable))
}
