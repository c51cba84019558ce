//! `{name}` argument templates.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown substitution variable {{{name}}} in {template:?}")]
    Unknown { name: String, template: String },
    #[error("unterminated '{{' in {0:?}")]
    Unterminated(String),
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

enum Piece<'a> {
    Text(&'a str),
    Var(&'a str),
}

fn parse(template: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        pieces.push(Piece::Text(&rest[..open]));
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| TemplateError::Unterminated(template.to_string()))?;
        let name = &after[..close];
        if !is_name(name) {
            return Err(TemplateError::Unknown {
                name: name.to_string(),
                template: template.to_string(),
            });
        }
        pieces.push(Piece::Var(name));
        rest = &after[close + 1..];
    }
    pieces.push(Piece::Text(rest));
    Ok(pieces)
}

/// Names referenced by `template`, in order of appearance.
pub fn variables(template: &str) -> Result<Vec<String>, TemplateError> {
    Ok(parse(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Var(name) => Some(name.to_string()),
            Piece::Text(_) => None,
        })
        .collect())
}

/// Replaces every `{name}` with its value. There is no escape for a literal
/// brace.
pub fn expand(template: &str, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    for piece in parse(template)? {
        match piece {
            Piece::Text(text) => out.push_str(text),
            Piece::Var(name) => out.push_str(vars.get(name).ok_or_else(|| TemplateError::Unknown {
                name: name.to_string(),
                template: template.to_string(),
            })?),
        }
    }
    Ok(out)
}

pub fn expand_all(args: &[String], vars: &BTreeMap<String, String>) -> Result<Vec<String>, TemplateError> {
    args.iter().map(|a| expand(a, vars)).collect()
}
