//! Text match files produced by external matchers.
//!
//! ```text
//! # fixed_x,fixed_y,moving_x,moving_y,score
//! 10.5,20.25,11.0,19.75,0.93
//! ```
//!
//! Moving coordinates are in the unrotated moving frame.

use std::fmt::Write as _;
use std::path::Path;

use super::{Match, MatchSet};
use crate::error::{Error, Result};

pub const MATCH_FILE_HEADER: &str = "# fixed_x,fixed_y,moving_x,moving_y,score";

pub fn import_matches(
    path: impl AsRef<Path>,
    fixed_dims: (usize, usize),
    moving_dims: (usize, usize),
) -> Result<MatchSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matches(&text, path, fixed_dims, moving_dims)
}

pub(crate) fn parse_matches(
    text: &str,
    path: &Path,
    fixed_dims: (usize, usize),
    moving_dims: (usize, usize),
) -> Result<MatchSet> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == MATCH_FILE_HEADER => {}
        Some((_, first)) => {
            return Err(err(
                1,
                format!("expected header `{MATCH_FILE_HEADER}`, found `{}`", first.trim()),
            ))
        }
        None => return Err(err(1, "empty match file".into())),
    }

    let mut pairs = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(
                lineno,
                format!("expected 5 comma-separated values, found {}", fields.len()),
            ));
        }
        let mut v = [0.0f64; 5];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(lineno, format!("`{f}` is not a finite number")))?;
        }
        let m = Match {
            fixed: [v[0], v[1]],
            moving: [v[2], v[3]],
            score: v[4],
        };
        let check = |p: [f64; 2], dims: (usize, usize), which: &str| -> Result<()> {
            if p[0] < 0.0 || p[1] < 0.0 || p[0] >= dims.0 as f64 || p[1] >= dims.1 as f64 {
                return Err(err(
                    lineno,
                    format!(
                        "{which} point ({}, {}) outside {}x{} image",
                        p[0], p[1], dims.0, dims.1
                    ),
                ));
            }
            Ok(())
        };
        check(m.fixed, fixed_dims, "fixed")?;
        check(m.moving, moving_dims, "moving")?;
        if !(-1.0..=1.0).contains(&m.score) {
            return Err(err(lineno, format!("score {} outside [-1, 1]", m.score)));
        }
        pairs.push(m);
    }
    if pairs.is_empty() {
        return Err(err(1, "match file has no rows".into()));
    }
    MatchSet::new(pairs, fixed_dims, moving_dims)
}

pub fn write_matches(path: impl AsRef<Path>, matches: &MatchSet) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(MATCH_FILE_HEADER);
    out.push('\n');
    for m in matches.pairs() {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            m.fixed[0], m.fixed[1], m.moving[0], m.moving[1], m.score
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<MatchSet> {
        parse_matches(text, Path::new("m.csv"), (100, 80), (90, 70))
    }

    #[test]
    fn parses_valid_rows() {
        let t = format!("{MATCH_FILE_HEADER}\n1,2,3,4,0.9\n5,6,7,8,0.5\n9.5,10.5,11.5,12.5,-0.2\n");
        let ms = parse(&t).unwrap();
        assert_eq!(ms.len(), 3);
        assert_eq!(ms.pairs()[2].moving, [11.5, 12.5]);
    }

    #[test]
    fn out_of_bounds_names_line() {
        let t = format!("{MATCH_FILE_HEADER}\n1,2,3,4,0.9\n100,2,3,4,0.9\n");
        match parse(&t) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("fixed"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty() {
        let t = format!("{MATCH_FILE_HEADER}\n1,2,3,0.9\n");
        assert!(matches!(parse(&t), Err(Error::Parse { line: 2, .. })));
        let t = format!("{MATCH_FILE_HEADER}\n1,2,x,4,0.9\n");
        assert!(matches!(parse(&t), Err(Error::Parse { line: 2, .. })));
        assert!(parse("").is_err());
        assert!(parse(&format!("{MATCH_FILE_HEADER}\n")).is_err());
        assert!(parse("fixed_x,fixed_y\n1,2,3,4,0.5\n").is_err());
    }

    #[test]
    fn duplicates_are_collapsed() {
        let t = format!("{MATCH_FILE_HEADER}\n1,2,3,4,0.9\n1,2,3,4,0.9\n");
        assert_eq!(parse(&t).unwrap().len(), 1);
    }
}
