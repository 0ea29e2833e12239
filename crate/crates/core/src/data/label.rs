use crate::error::{Error, Result};

/// Number of entries expected in a bracket label.
pub const BRACKET_ARITY: usize = 3;

/// Parses the trailing `[a, b, c]` multi-hot label of a patch file name,
/// e.g. `p7-[1, 0, 1].png`.
pub fn parse_bracket_label(filename: &str) -> Result<Vec<u8>> {
    let fail = |reason: &str| Error::LabelParse {
        filename: filename.to_string(),
        reason: reason.to_string(),
    };
    let open = filename.rfind('[').ok_or_else(|| fail("missing '['"))?;
    let close = filename[open..]
        .find(']')
        .map(|i| open + i)
        .ok_or_else(|| fail("missing ']'"))?;
    let inner = &filename[open + 1..close];
    let values = inner
        .split(',')
        .map(|tok| match tok.trim() {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(fail(&format!("entry `{other}` is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != BRACKET_ARITY {
        return Err(fail(&format!(
            "expected {BRACKET_ARITY} entries, found {}",
            values.len()
        )));
    }
    Ok(values)
}

/// Formats a label the way `parse_bracket_label` reads it.
pub fn format_bracket_label(label: &[u8]) -> String {
    let parts: Vec<String> = label.iter().map(|v| v.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(parse_bracket_label("p7-[1, 0, 1].png").unwrap(), vec![1, 0, 1]);
        assert_eq!(parse_bracket_label("x-[0, 1, 0].png").unwrap(), vec![0, 1, 0]);
        assert_eq!(parse_bracket_label("a[b]-[0,0,1].png").unwrap(), vec![0, 0, 1]);
    }

    #[test]
    fn malformed() {
        for name in ["x-[1,0].png", "x.png", "x-[1, 2, 0].png", "x-[1, 0, 1.png", "x-[].png"] {
            assert!(
                matches!(parse_bracket_label(name), Err(Error::LabelParse { .. })),
                "{name}"
            );
        }
    }

    #[test]
    fn format_round_trips() {
        let s = format!("id-{}.png", format_bracket_label(&[1, 1, 0]));
        assert_eq!(s, "id-[1, 1, 0].png");
        assert_eq!(parse_bracket_label(&s).unwrap(), vec![1, 1, 0]);
    }
}
