//! Single-hunk unified diffs with zero context lines, and a strict applier.
//!
//! A line missing its trailing newline is followed by the usual
//! `\ No newline at end of file` marker.

use thiserror::Error;

pub const NO_NEWLINE_MARKER: &str = "\\ No newline at end of file";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("malformed diff: {0}")]
    MalformedDiff(String),
    #[error("hunk does not match the source at line {line}")]
    ContextMismatch { line: usize },
}

/// Minimal single-hunk diff turning `old` into `new`. Empty when equal.
pub fn unified_diff(old: &str, new: &str) -> String {
    let a: Vec<&str> = old.split_inclusive('\n').collect();
    let b: Vec<&str> = new.split_inclusive('\n').collect();
    let prefix = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..]
        .iter()
        .rev()
        .zip(b[prefix..].iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    let removed = &a[prefix..a.len() - suffix];
    let added = &b[prefix..b.len() - suffix];
    if removed.is_empty() && added.is_empty() {
        return String::new();
    }
    let mut out = format!(
        "--- a/program.c\n+++ b/program.c\n@@ -{} +{} @@\n",
        range(prefix, removed.len()),
        range(prefix, added.len())
    );
    for (sign, lines) in [('-', removed), ('+', added)] {
        for line in lines {
            out.push(sign);
            out.push_str(line);
            if !line.ends_with('\n') {
                out.push('\n');
                out.push_str(NO_NEWLINE_MARKER);
                out.push('\n');
            }
        }
    }
    out
}

/// `start,count` in the form `diff -u` prints: a lone start when the count
/// is 1, and the preceding line number for an empty range.
fn range(prefix: usize, count: usize) -> String {
    match count {
        0 => format!("{prefix},0"),
        1 => format!("{}", prefix + 1),
        n => format!("{},{n}", prefix + 1),
    }
}

fn parse_range(text: &str, sign: char) -> Result<(usize, usize), PatchError> {
    let bad = || PatchError::MalformedDiff(format!("bad hunk range `{text}`"));
    let body = text.strip_prefix(sign).ok_or_else(bad)?;
    let (start, count) = match body.split_once(',') {
        Some((s, c)) => (s, c),
        None => (body, "1"),
    };
    Ok((start.parse().map_err(|_| bad())?, count.parse().map_err(|_| bad())?))
}

struct Hunk {
    old_start: usize,
    old: Vec<String>,
    new: Vec<String>,
}

fn parse(diff: &str) -> Result<Option<Hunk>, PatchError> {
    let malformed = |m: &str| PatchError::MalformedDiff(m.to_string());
    let mut lines = diff.lines().peekable();
    if let Some(l) = lines.peek() {
        if l.starts_with("--- ") {
            lines.next();
            match lines.next() {
                Some(l) if l.starts_with("+++ ") => {}
                _ => return Err(malformed("`---` header without `+++`")),
            }
        }
    }
    let Some(header) = lines.next() else {
        return Ok(None);
    };
    let fields: Vec<&str> = header
        .strip_prefix("@@ ")
        .ok_or_else(|| malformed("expected `@@` hunk header"))?
        .split_whitespace()
        .collect();
    if fields.len() < 3 || fields[2] != "@@" {
        return Err(malformed("expected `@@ -a,b +c,d @@`"));
    }
    let (old_start, old_count) = parse_range(fields[0], '-')?;
    let (_, new_count) = parse_range(fields[1], '+')?;
    let mut hunk = Hunk {
        old_start,
        old: Vec::new(),
        new: Vec::new(),
    };
    // Which side(s) the previous line went to, for the no-newline marker.
    let mut last: (bool, bool) = (false, false);
    for line in lines {
        if line.starts_with("@@") {
            return Err(malformed("more than one hunk"));
        }
        if line == NO_NEWLINE_MARKER {
            let strip = |v: &mut Vec<String>| {
                if let Some(s) = v.last_mut() {
                    s.pop();
                }
            };
            match last {
                (false, false) => return Err(malformed("marker before any line")),
                (o, n) => {
                    if o {
                        strip(&mut hunk.old);
                    }
                    if n {
                        strip(&mut hunk.new);
                    }
                }
            }
            last = (false, false);
            continue;
        }
        let mut chars = line.chars();
        let sign = chars.next().ok_or_else(|| malformed("empty line inside hunk"))?;
        let text = format!("{}\n", chars.as_str());
        last = match sign {
            ' ' => {
                hunk.old.push(text.clone());
                hunk.new.push(text);
                (true, true)
            }
            '-' => {
                hunk.old.push(text);
                (true, false)
            }
            '+' => {
                hunk.new.push(text);
                (false, true)
            }
            _ => return Err(malformed(&format!("unexpected line `{line}`"))),
        };
    }
    if hunk.old.len() != old_count || hunk.new.len() != new_count {
        return Err(malformed("hunk line counts disagree with its header"));
    }
    if hunk.old.is_empty() && hunk.new.is_empty() {
        return Err(malformed("empty hunk"));
    }
    Ok(Some(hunk))
}

/// Applies a single-hunk unified diff with exact matching. An empty diff
/// leaves `source` unchanged.
pub fn apply_patch(source: &str, diff: &str) -> Result<String, PatchError> {
    let Some(hunk) = parse(diff)? else {
        return Ok(source.to_string());
    };
    let lines: Vec<&str> = source.split_inclusive('\n').collect();
    let start = if hunk.old.is_empty() {
        hunk.old_start
    } else {
        hunk.old_start
            .checked_sub(1)
            .ok_or(PatchError::MalformedDiff("line numbers start at 1".into()))?
    };
    let end = start + hunk.old.len();
    let mismatch = PatchError::ContextMismatch { line: hunk.old_start };
    if end > lines.len() || lines[start..end].iter().zip(&hunk.old).any(|(a, b)| a != b) {
        return Err(mismatch);
    }
    let mut out = String::with_capacity(source.len());
    lines[..start].iter().for_each(|l| out.push_str(l));
    hunk.new.iter().for_each(|l| out.push_str(l));
    lines[end..].iter().for_each(|l| out.push_str(l));
    Ok(out)
}
