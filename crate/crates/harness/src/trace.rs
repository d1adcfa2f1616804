//! Line-oriented allocation traces.
//!
//! ```text
//! # comment
//! t <tid>
//! a <id> <size>
//! f <id>
//! r <id> <size>
//! z <id> <count> <size>
//! ```
//!
//! Fields are decimal and separated by exactly one space. Every line ends in
//! a newline.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    SelectThread(u32),
    Alloc { id: u64, size: usize },
    Free { id: u64 },
    Realloc { id: u64, size: usize },
    ZeroAlloc { id: u64, count: usize, size: usize },
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TraceEvent::SelectThread(t) => write!(f, "t {t}"),
            TraceEvent::Alloc { id, size } => write!(f, "a {id} {size}"),
            TraceEvent::Free { id } => write!(f, "f {id}"),
            TraceEvent::Realloc { id, size } => write!(f, "r {id} {size}"),
            TraceEvent::ZeroAlloc { id, count, size } => write!(f, "z {id} {count} {size}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {problem} `{token}`")]
pub struct ParseError {
    pub line: usize,
    pub token: String,
    pub problem: &'static str,
}

fn number<T: std::str::FromStr>(line: usize, token: &str) -> Result<T, ParseError> {
    let err = |problem| ParseError {
        line,
        token: token.to_string(),
        problem,
    };
    if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err("expected a decimal integer"));
    }
    token.parse().map_err(|_| err("integer out of range"))
}

fn parse_line(line: usize, text: &str) -> Result<TraceEvent, ParseError> {
    let fields: Vec<&str> = text.split(' ').collect();
    let arity = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(ParseError {
                line,
                token: text.to_string(),
                problem: "wrong number of fields",
            })
        }
    };
    match fields[0] {
        "t" => {
            arity(2)?;
            Ok(TraceEvent::SelectThread(number(line, fields[1])?))
        }
        "a" => {
            arity(3)?;
            Ok(TraceEvent::Alloc {
                id: number(line, fields[1])?,
                size: number(line, fields[2])?,
            })
        }
        "f" => {
            arity(2)?;
            Ok(TraceEvent::Free {
                id: number(line, fields[1])?,
            })
        }
        "r" => {
            arity(3)?;
            Ok(TraceEvent::Realloc {
                id: number(line, fields[1])?,
                size: number(line, fields[2])?,
            })
        }
        "z" => {
            arity(4)?;
            Ok(TraceEvent::ZeroAlloc {
                id: number(line, fields[1])?,
                count: number(line, fields[2])?,
                size: number(line, fields[3])?,
            })
        }
        op => Err(ParseError {
            line,
            token: op.to_string(),
            problem: "unknown operation",
        }),
    }
}

/// Parses a trace. Line numbers in errors start at 1.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, ParseError> {
    let mut events = Vec::new();
    let mut lines = text.split('\n').enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        let number = i + 1;
        if lines.peek().is_none() {
            if line.is_empty() {
                break;
            }
            return Err(ParseError {
                line: number,
                token: line.to_string(),
                problem: "missing newline after",
            });
        }
        if line.starts_with('#') {
            continue;
        }
        events.push(parse_line(number, line)?);
    }
    Ok(events)
}

/// Renders events in the trace grammar.
pub fn render_trace(events: &[TraceEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 12);
    for e in events {
        out.push_str(&e.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(
            parse_trace("a 1 513\nf 1\n").unwrap(),
            vec![TraceEvent::Alloc { id: 1, size: 513 }, TraceEvent::Free { id: 1 }]
        );
        assert_eq!(
            parse_trace("t 2\na 7 64\n").unwrap(),
            vec![TraceEvent::SelectThread(2), TraceEvent::Alloc { id: 7, size: 64 }]
        );
        let err = parse_trace("a x 10\n").unwrap_err();
        assert_eq!((err.line, err.token.as_str()), (1, "x"));
    }

    #[test]
    fn comments_and_empty_input() {
        assert_eq!(parse_trace("").unwrap(), vec![]);
        assert_eq!(parse_trace("# header\nz 3 8 16\n").unwrap(), vec![TraceEvent::ZeroAlloc {
            id: 3,
            count: 8,
            size: 16
        }]);
    }

    #[test]
    fn rejects_loose_formatting() {
        for (text, line) in [
            ("a 1  5\n", 1),
            ("f 1\na 2 3", 2),
            ("f 1\n\n", 2),
            ("f -1\n", 1),
            ("q 1\n", 1),
            ("a 1\n", 1),
            ("f 1\r\n", 1),
            ("a 1 +5\n", 1),
        ] {
            assert_eq!(parse_trace(text).unwrap_err().line, line, "{text:?}");
        }
    }

    fn event() -> impl Strategy<Value = TraceEvent> {
        prop_oneof![
            any::<u32>().prop_map(TraceEvent::SelectThread),
            (any::<u64>(), any::<usize>()).prop_map(|(id, size)| TraceEvent::Alloc { id, size }),
            any::<u64>().prop_map(|id| TraceEvent::Free { id }),
            (any::<u64>(), any::<usize>()).prop_map(|(id, size)| TraceEvent::Realloc { id, size }),
            (any::<u64>(), any::<usize>(), any::<usize>())
                .prop_map(|(id, count, size)| TraceEvent::ZeroAlloc { id, count, size }),
        ]
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(events in prop::collection::vec(event(), 0..50)) {
            prop_assert_eq!(parse_trace(&render_trace(&events)).unwrap(), events);
        }
    }
}
