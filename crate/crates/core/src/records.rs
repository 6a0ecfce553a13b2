//! Line-oriented reader for the comma-separated seed files.
//!
//! Each physical line holds one record, so errors can name the exact line.
//! Blank lines and lines whose first non-blank character is `#` are skipped.

use serde::de::DeserializeOwned;

/// A record that failed to parse, with its 1-based physical line.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LineError {
    pub line: u64,
    pub message: String,
}

pub(crate) fn records<T: DeserializeOwned>(
    text: &str,
) -> impl Iterator<Item = Result<(u64, T), LineError>> + '_ {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    text.lines().enumerate().filter_map(|(i, raw)| {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            return None;
        }
        let line = i as u64 + 1;
        Some(parse_line(trimmed).map(|rec| (line, rec)).map_err(|message| LineError { line, message }))
    })
}

fn parse_line<T: DeserializeOwned>(line: &str) -> Result<T, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(line.as_bytes());
    let rec = match rdr.records().next() {
        Some(r) => r.map_err(|e| e.to_string())?,
        None => return Err("empty record".into()),
    };
    rec.deserialize(None).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comments_and_counts_physical_lines() {
        let text = "\u{feff}# c\n\n  a, 1\r\n# c2\nb,2\n";
        let got: Vec<(u64, (String, u32))> = records(text).collect::<Result<_, _>>().unwrap();
        assert_eq!(got, [(3, ("a".into(), 1)), (5, ("b".into(), 2))]);
    }

    #[test]
    fn errors_carry_the_line() {
        let err = records::<(String, u32)>("a,1\nb,x\n")
            .collect::<Result<Vec<_>, _>>()
            .unwrap_err();
        assert_eq!(err.line, 2);
        let err = records::<(String, u32)>("\"open,1\n").next().unwrap().unwrap_err();
        assert_eq!(err.line, 1);
    }
}
