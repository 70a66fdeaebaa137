//! Extraction of transform code from model output, structural validation,
//! and canonicalization for deduplication.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const OPEN_TAG: &str = "<tr>";
const CLOSE_TAG: &str = "</tr>";
const FENCE: &str = "```";

/// Seed-setting call names whose numeric argument is masked by
/// [`canonicalize`]. Matched as a bare or dotted call name
/// (`torch.manual_seed(0)`, `random.seed(1)`, `np.random.seed(2)`).
pub const SEED_CALLS: &[&str] = &["seed", "manual_seed", "manual_seed_all", "set_seed", "seed_everything"];

/// Placeholder substituted for a masked seed value.
pub const SEED_MASK: &str = "<seed>";

static TRANSFORM_DEF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*(?:async[ \t]+)?def[ \t]+transform[ \t]*\(").unwrap());

static FORBIDDEN_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)</?(?:path|g|text|svg|html)(?:[\s/>]|$)").unwrap());

static SEED_CALL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"\b({})\s*\(\s*[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?\s*\)",
        SEED_CALLS.join("|")
    ))
    .unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    MissingTrTag,
    MultipleTrTags,
    MarkdownFence,
    ForbiddenTag,
    MissingTransformFunction,
    EmptyBody,
}

impl Violation {
    /// Stable identifier used in logs and reports.
    pub fn as_str(self) -> &'static str {
        match self {
            Violation::MissingTrTag => "missing_tr_tag",
            Violation::MultipleTrTags => "multiple_tr_tags",
            Violation::MarkdownFence => "markdown_fence",
            Violation::ForbiddenTag => "forbidden_tag",
            Violation::MissingTransformFunction => "missing_transform_function",
            Violation::EmptyBody => "empty_body",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidityStatus {
    Valid,
    Invalid,
}

/// Outcome of extraction and/or validation. Status is derived from the
/// violation list, so the two can never disagree.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
    pub extracted_code: Option<String>,
}

impl ValidityReport {
    pub fn status(&self) -> ValidityStatus {
        if self.violations.is_empty() {
            ValidityStatus::Valid
        } else {
            ValidityStatus::Invalid
        }
    }

    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, v: Violation) {
        if !self.violations.contains(&v) {
            self.violations.push(v);
        }
    }
}

/// Locates `<tr>…</tr>` pairs. Matching is case-sensitive and non-nesting:
/// after an opening tag the next closing tag ends the pair.
fn tag_pairs(raw: &str) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut pos = 0;
    while let Some(open) = raw[pos..].find(OPEN_TAG) {
        let body_start = pos + open + OPEN_TAG.len();
        match raw[body_start..].find(CLOSE_TAG) {
            Some(close) => {
                pairs.push((body_start, body_start + close));
                pos = body_start + close + CLOSE_TAG.len();
            }
            None => break,
        }
    }
    pairs
}

/// Pulls the enclosed code out of a raw model response. Only tag-level and
/// fence problems are reported here; see [`validate_candidate`].
pub fn extract_transform_block(raw: &str) -> ValidityReport {
    let mut report = ValidityReport::default();
    let pairs = tag_pairs(raw);
    match pairs.len() {
        0 => report.push(Violation::MissingTrTag),
        1 => {
            let (start, end) = pairs[0];
            report.extracted_code = Some(raw[start..end].trim().to_string());
        }
        _ => report.push(Violation::MultipleTrTags),
    }
    if raw.contains(FENCE) {
        report.push(Violation::MarkdownFence);
    }
    report
}

/// Structural checks on extracted code. Whether the code actually runs is
/// decided by the evaluator, not here.
pub fn validate_candidate(code: &str) -> ValidityReport {
    let mut report = ValidityReport::default();
    if code.trim().is_empty() {
        report.push(Violation::EmptyBody);
    }
    if code.contains(FENCE) {
        report.push(Violation::MarkdownFence);
    }
    if FORBIDDEN_TAG.is_match(code) {
        report.push(Violation::ForbiddenTag);
    }
    if !TRANSFORM_DEF.is_match(code) {
        report.push(Violation::MissingTransformFunction);
    }
    report
}

/// Extraction followed by validation of the extracted code, merged into one
/// report. `extracted_code` is kept even when validation fails.
pub fn check_response(raw: &str) -> ValidityReport {
    let mut report = extract_transform_block(raw);
    if let Some(code) = &report.extracted_code {
        for v in validate_candidate(code).violations {
            report.push(v);
        }
    }
    report
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CanonicalizeError {
    #[error("cannot canonicalize empty code")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalForm {
    pub canonical_text: String,
    /// Lowercase hex SHA-256 of `canonical_text` (64 chars).
    pub digest: String,
}

/// Drops a trailing `#` comment, honoring single and double quoted strings
/// on the same line. Triple-quoted strings spanning lines are not tracked.
fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match (quote, c) {
            (Some(_), '\\') => escaped = true,
            (Some(q), c) if c == q => quote = None,
            (None, '\'' | '"') => quote = Some(c),
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}

pub fn digest_of(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Normalizes code so that candidates differing only in comments, blank
/// lines, whitespace runs, or values passed to seed-setting calls compare
/// equal. All other numeric literals are preserved.
pub fn canonicalize(code: &str) -> Result<CanonicalForm, CanonicalizeError> {
    if code.is_empty() {
        return Err(CanonicalizeError::Empty);
    }
    let lines: Vec<String> = code
        .lines()
        .map(|line| strip_comment(line).split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|line| !line.is_empty())
        .map(|line| SEED_CALL.replace_all(&line, format!("${{1}}({SEED_MASK})")).into_owned())
        .collect();
    let canonical_text = lines.join("\n");
    let digest = digest_of(&canonical_text);
    Ok(CanonicalForm { canonical_text, digest })
}

/// A call expression found in candidate code, e.g. `transforms.Resize((64, 64))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallSite {
    /// Unqualified callee name (`Resize`).
    pub name: String,
    /// Raw text between the parentheses.
    pub args: String,
    /// Byte range of the whole call including any module qualifier.
    pub span: (usize, usize),
    /// Byte range of `args`.
    pub args_span: (usize, usize),
}

static CALL_HEAD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b((?:[A-Za-z_][A-Za-z0-9_]*\.)*)([A-Za-z_][A-Za-z0-9_]*)\s*\(").unwrap());

/// Finds calls whose unqualified name satisfies `wanted`. Arguments are
/// delimited by paren balancing; an unbalanced call runs to end of input.
/// Calls nested inside another call's arguments are reported too, after
/// their enclosing call.
pub fn scan_calls(code: &str, wanted: impl Fn(&str) -> bool) -> Vec<CallSite> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(caps) = CALL_HEAD.captures_at(code, pos) {
        let whole = caps.get(0).unwrap();
        let name = caps.get(2).unwrap().as_str();
        if !wanted(name) {
            pos = caps.get(2).unwrap().end();
            continue;
        }
        let args_start = whole.end();
        let mut depth = 1usize;
        let mut end = code.len();
        for (i, c) in code[args_start..].char_indices() {
            match c {
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = args_start + i;
                        break;
                    }
                }
                _ => {}
            }
        }
        let call_end = if end < code.len() { end + 1 } else { end };
        out.push(CallSite {
            name: name.to_string(),
            args: code[args_start..end].to_string(),
            span: (whole.start(), call_end),
            args_span: (args_start, end),
        });
        pos = args_start;
    }
    out
}

/// Splits an argument list at top-level commas, trimming each piece.
pub fn split_args(args: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in args.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(args[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = args[start..].trim();
    if !last.is_empty() {
        parts.push(last);
    }
    parts
}

/// True when every bracket is closed in order. Used as a cheap syntax check.
pub fn brackets_balanced(code: &str) -> bool {
    let mut stack = Vec::new();
    for c in code.chars() {
        match c {
            '(' | '[' | '{' => stack.push(c),
            ')' | ']' | '}' => {
                let open = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                if stack.pop() != Some(open) {
                    return false;
                }
            }
            _ => {}
        }
    }
    stack.is_empty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const VALID: &str = "import torchvision.transforms as transforms\n\n\ndef transform():\n    return transforms.Compose([\n        transforms.Resize((64, 64)),\n        transforms.ToTensor(),\n    ])\n";

    #[test]
    fn minimal_block() {
        let r = extract_transform_block("<tr>X</tr>");
        assert!(r.is_valid());
        assert_eq!(r.extracted_code.as_deref(), Some("X"));
    }

    #[test]
    fn multiple_blocks() {
        let r = extract_transform_block("<tr>a</tr><tr>b</tr>");
        assert_eq!(r.status(), ValidityStatus::Invalid);
        assert_eq!(r.violations, vec![Violation::MultipleTrTags]);
        assert_eq!(r.extracted_code, None);
    }

    #[test]
    fn fence_in_response() {
        let r = extract_transform_block("```\n<tr>a</tr>");
        assert_eq!(r.violations, vec![Violation::MarkdownFence]);
        assert_eq!(r.extracted_code.as_deref(), Some("a"));
    }

    #[test]
    fn missing_or_unclosed_tags() {
        assert_eq!(extract_transform_block("").violations, vec![Violation::MissingTrTag]);
        assert_eq!(extract_transform_block("<tr>def transform(").violations, vec![Violation::MissingTrTag]);
        assert_eq!(extract_transform_block("<TR>x</TR>").violations, vec![Violation::MissingTrTag]);
    }

    #[test]
    fn validate_rendered_code() {
        assert!(validate_candidate(VALID).is_valid());
    }

    #[test]
    fn validate_forbidden_tags() {
        let code = format!("{VALID}\n<path d=\"M0 0\"/>");
        assert_eq!(validate_candidate(&code).violations, vec![Violation::ForbiddenTag]);
        for tag in ["<g>", "</svg>", "<html>", "<text x=1>", "<SVG>"] {
            assert!(!validate_candidate(&format!("{VALID}{tag}")).is_valid(), "{tag}");
        }
        // Comparison operators are not tags.
        assert!(validate_candidate(&format!("{VALID}\nif a <g:\n    pass\n")).is_valid());
    }

    #[test]
    fn validate_renamed_function() {
        let renamed = VALID.replace("def transform(", "def augment(");
        assert_eq!(validate_candidate(&renamed).violations, vec![Violation::MissingTransformFunction]);
        let prefixed = VALID.replace("def transform(", "def transform_v2(");
        assert!(!validate_candidate(&prefixed).is_valid());
    }

    #[test]
    fn validate_empty_and_fenced() {
        let r = validate_candidate("   \n");
        assert!(r.violations.contains(&Violation::EmptyBody));
        let r = validate_candidate(&format!("```python\n{VALID}```"));
        assert_eq!(r.violations, vec![Violation::MarkdownFence]);
    }

    #[test]
    fn check_response_merges() {
        let r = check_response(&format!("<tr>{VALID}</tr>"));
        assert!(r.is_valid());
        assert_eq!(r.extracted_code.as_deref(), Some(VALID.trim()));
        let r = check_response("<tr>def augment(): pass</tr>");
        assert_eq!(r.violations, vec![Violation::MissingTransformFunction]);
    }

    #[test]
    fn seed_only_variants_share_digest() {
        let a = format!("import torch\ntorch.manual_seed(1)\n{VALID}");
        let b = format!("import torch\ntorch.manual_seed(42)\n{VALID}");
        assert_eq!(canonicalize(&a).unwrap().digest, canonicalize(&b).unwrap().digest);
        let c = format!("import random\nrandom.seed( 7 )\n{VALID}");
        let d = format!("import random\nrandom.seed(8)\n{VALID}");
        assert_eq!(canonicalize(&c).unwrap(), canonicalize(&d).unwrap());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let with_comment = format!("{VALID}# trailing note\n\n\n");
        assert_eq!(canonicalize(VALID).unwrap().digest, canonicalize(&with_comment).unwrap().digest);
        let inline = VALID.replace("transforms.ToTensor(),", "transforms.ToTensor(),   # to tensor");
        assert_eq!(canonicalize(VALID).unwrap(), canonicalize(&inline).unwrap());
    }

    #[test]
    fn hash_inside_string_is_kept() {
        let a = canonicalize("x = '#a'").unwrap();
        let b = canonicalize("x = '#b'").unwrap();
        assert_ne!(a.digest, b.digest);
    }

    #[test]
    fn magnitudes_survive_canonicalization() {
        let big = VALID.replace("Resize((64, 64))", "Resize((256, 256))");
        assert_ne!(canonicalize(VALID).unwrap().digest, canonicalize(&big).unwrap().digest);
        // Non-seed calls keep their numbers.
        assert_ne!(canonicalize("f(1)").unwrap().digest, canonicalize("f(2)").unwrap().digest);
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(canonicalize(""), Err(CanonicalizeError::Empty));
    }

    #[test]
    fn digest_is_fixed_width() {
        assert_eq!(canonicalize("def transform(): pass").unwrap().digest.len(), 64);
    }

    #[test]
    fn scan_finds_qualified_calls() {
        let calls = scan_calls(VALID, |n| n == "Resize" || n == "ToTensor");
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[0].name, "Resize");
        assert_eq!(calls[0].args, "(64, 64)");
        assert_eq!(&VALID[calls[0].span.0..calls[0].span.1], "transforms.Resize((64, 64))");
        assert_eq!(split_args("a=(1, 2), b=[3], 4"), vec!["a=(1, 2)", "b=[3]", "4"]);
        // `RandomResizedCrop` is a different callee.
        assert!(scan_calls("RandomResizedCrop(size=24)", |n| n == "Resize").is_empty());
    }

    #[test]
    fn bracket_balance() {
        assert!(brackets_balanced(VALID));
        assert!(!brackets_balanced("def broken("));
        assert!(!brackets_balanced("f(]"));
    }

    proptest! {
        #[test]
        fn extraction_round_trip(code in "[^<`]{0,200}") {
            let r = extract_transform_block(&format!("<tr>{code}</tr>"));
            prop_assert_eq!(r.extracted_code, Some(code.trim().to_string()));
        }

        #[test]
        fn canonicalize_idempotent(code in "(?s).{1,300}") {
            let once = canonicalize(&code).unwrap();
            if !once.canonical_text.is_empty() {
                let twice = canonicalize(&once.canonical_text).unwrap();
                prop_assert_eq!(twice, once);
            }
        }

        #[test]
        fn canonicalize_idempotent_codeish(
            lines in proptest::collection::vec("[ a-z_().=0-9#'\"\\\\]{0,40}", 1..12)
        ) {
            let code = lines.join("\n");
            if let Ok(once) = canonicalize(&code) {
                if !once.canonical_text.is_empty() {
                    prop_assert_eq!(canonicalize(&once.canonical_text).unwrap(), once);
                }
            }
        }

        #[test]
        fn forbidden_tag_always_invalidates(tag in prop::sample::select(vec!["<path", "<g>", "<text>", "<svg", "<html>", "</g>"]), at_end in any::<bool>()) {
            let code = if at_end { format!("{VALID}{tag}") } else { format!("{tag} {VALID}") };
            prop_assert!(!validate_candidate(&code).is_valid());
        }

        #[test]
        fn never_panics_on_arbitrary_input(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = check_response(&text);
            let _ = validate_candidate(&text);
            let _ = canonicalize(&text);
            let _ = scan_calls(&text, |_| true);
        }
    }
}
