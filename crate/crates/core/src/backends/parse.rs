//! Parsing of bracketed model output such as `[reasoning][3]` or `[0.911]`.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Label,
    ErrorProb,
    ErrorLevel,
    YesNo,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedValue {
    Label(usize),
    ErrorProb(f64),
    ErrorLevel(u8),
    YesNo(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub value: ParsedValue,
    /// Content of the bracket pair preceding the value, if any.
    pub reasoning: Option<String>,
    /// Set when an error probability was clamped into `[0, 1]`.
    pub clamped: bool,
    /// Byte span of the reasoning content within the response.
    pub reasoning_span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no bracket pair in response")]
    NoBrackets,
    #[error("expected a number, found {0:?}")]
    NotNumeric(String),
    #[error("label {label} outside a label space of size {size}")]
    LabelOutOfRange { label: i64, size: usize },
    #[error("error level {0} outside 1..=5")]
    LevelOutOfRange(i64),
    #[error("expected yes or no, found {0:?}")]
    NotYesNo(String),
}

/// Byte spans `(open, close)` of every top-level `[...]` pair.
fn top_level_pairs(text: &str) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in text.char_indices() {
        match c {
            '[' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            ']' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    pairs.push((start, i));
                }
            }
            _ => {}
        }
    }
    pairs
}

/// Spans of the value pair and, when present, the reasoning pair before it.
fn locate(text: &str) -> Option<((usize, usize), Option<(usize, usize)>)> {
    let pairs = top_level_pairs(text);
    match pairs.len() {
        0 => {
            // unbalanced output: fall back to the last '[' ... ']' window
            let close = text.rfind(']')?;
            let open = text[..close].rfind('[')?;
            Some(((open, close), None))
        }
        1 => Some((pairs[0], None)),
        n => Some((pairs[n - 1], Some(pairs[n - 2]))),
    }
}

fn parse_integer(raw: &str) -> Result<i64, ParseError> {
    let trimmed = raw.trim();
    if let Ok(v) = trimmed.parse::<i64>() {
        return Ok(v);
    }
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() && v.fract() == 0.0 => Ok(v as i64),
        _ => Err(ParseError::NotNumeric(trimmed.to_string())),
    }
}

pub fn parse_yes_no(raw: &str) -> Option<bool> {
    let word: String = raw
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Extract a value from the last top-level bracket pair of `response`.
///
/// Any bracket pair before it is returned as reasoning. Error probabilities
/// outside `[0, 1]` are clamped and flagged. A bare `Yes`/`No` without
/// brackets is accepted for [`Expect::YesNo`].
pub fn parse_bracketed(response: &str, expect: Expect, label_space_size: usize) -> Result<Parsed, ParseError> {
    let located = locate(response);
    let ((open, close), reasoning_pair) = match located {
        Some(spans) => spans,
        None if expect == Expect::YesNo => {
            return parse_yes_no(response)
                .map(|v| Parsed {
                    value: ParsedValue::YesNo(v),
                    reasoning: None,
                    clamped: false,
                    reasoning_span: None,
                })
                .ok_or_else(|| ParseError::NotYesNo(response.trim().to_string()));
        }
        None => return Err(ParseError::NoBrackets),
    };
    let raw = &response[open + 1..close];
    let reasoning_span = reasoning_pair.map(|(o, c)| (o + 1, c));
    let reasoning = reasoning_span.map(|(s, e)| response[s..e].trim().to_string());

    let mut clamped = false;
    let value = match expect {
        Expect::Label => {
            let label = parse_integer(raw)?;
            if label < 0 || label as usize >= label_space_size {
                return Err(ParseError::LabelOutOfRange {
                    label,
                    size: label_space_size,
                });
            }
            ParsedValue::Label(label as usize)
        }
        Expect::ErrorProb => {
            let trimmed = raw.trim().trim_end_matches('%');
            let v: f64 = trimmed
                .parse()
                .map_err(|_| ParseError::NotNumeric(raw.trim().to_string()))?;
            if !v.is_finite() {
                return Err(ParseError::NotNumeric(raw.trim().to_string()));
            }
            let c = v.clamp(0.0, 1.0);
            clamped = c != v;
            ParsedValue::ErrorProb(c)
        }
        Expect::ErrorLevel => {
            let level = parse_integer(raw)?;
            if !(1..=5).contains(&level) {
                return Err(ParseError::LevelOutOfRange(level));
            }
            ParsedValue::ErrorLevel(level as u8)
        }
        Expect::YesNo => ParsedValue::YesNo(
            parse_yes_no(raw).ok_or_else(|| ParseError::NotYesNo(raw.trim().to_string()))?,
        ),
    };
    Ok(Parsed {
        value,
        reasoning,
        clamped,
        reasoning_span,
    })
}
