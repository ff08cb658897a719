//! Exported-header templates: `"$cn <$mail>"` style strings whose `$name`
//! tokens are replaced by session attributes.

use indexmap::IndexMap;
use thiserror::Error;

use crate::session::Session;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Attr(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderTemplate {
    source: String,
    segments: Vec<Segment>,
}

impl HeaderTemplate {
    pub fn parse(source: &str) -> Self {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            if c == '$' && chars.peek().is_some_and(|n| n.is_ascii_alphabetic() || *n == '_') {
                let mut name = String::new();
                while let Some(&n) = chars.peek() {
                    if n.is_ascii_alphanumeric() || n == '_' {
                        name.push(n);
                        chars.next();
                    } else {
                        break;
                    }
                }
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Attr(name));
            } else {
                text.push(c);
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Self {
            source: source.to_string(),
            segments,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn render(&self, session: &Session) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Attr(a) => out.push_str(session.attr(a).unwrap_or_default()),
            }
        }
        sanitize_header_value(&out)
    }
}

/// Removes CR, LF and NUL so a value can never terminate its header line.
pub fn sanitize_header_value(value: &str) -> String {
    value.chars().filter(|c| !matches!(c, '\r' | '\n' | '\0')).collect()
}

/// HTTP field-name: one or more `tchar`.
pub fn is_valid_header_name(name: &str) -> bool {
    !name.is_empty()
        && name.bytes().all(|b| {
            b.is_ascii_alphanumeric()
                || matches!(
                    b,
                    b'!' | b'#' | b'$' | b'%' | b'&' | b'\'' | b'*' | b'+' | b'-' | b'.' | b'^'
                        | b'_' | b'`' | b'|' | b'~'
                )
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid header name {0:?}")]
pub struct InvalidHeaderName(pub String);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeaderTemplates {
    templates: IndexMap<String, HeaderTemplate>,
}

impl HeaderTemplates {
    /// Compiles every template; reports every illegal header name.
    pub fn compile<'a>(
        defs: impl IntoIterator<Item = (&'a String, &'a String)>,
    ) -> Result<Self, Vec<InvalidHeaderName>> {
        let mut templates = IndexMap::new();
        let mut errors = Vec::new();
        for (name, tpl) in defs {
            if is_valid_header_name(name) {
                templates.insert(name.clone(), HeaderTemplate::parse(tpl));
            } else {
                errors.push(InvalidHeaderName(name.clone()));
            }
        }
        if errors.is_empty() {
            Ok(Self { templates })
        } else {
            Err(errors)
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn render(&self, session: &Session) -> IndexMap<String, String> {
        self.templates
            .iter()
            .map(|(name, tpl)| (name.clone(), tpl.render(session)))
            .collect()
    }
}

/// One-shot rendering of raw templates.
pub fn render_headers(
    templates: &IndexMap<String, String>,
    session: &Session,
) -> IndexMap<String, String> {
    templates
        .iter()
        .map(|(name, tpl)| (name.clone(), HeaderTemplate::parse(tpl).render(session)))
        .collect()
}
