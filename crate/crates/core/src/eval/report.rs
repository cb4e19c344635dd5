//! Self-contained HTML view of token labels and scales for one response.

use std::fmt::Write as _;

use crate::collect::ConditionProbTable;
use crate::corpus::ReasoningExample;
use crate::error::{Error, Result};
use crate::saliency::{Branch, Label, SaliencyAssignment};
use crate::scale::ScaleVector;

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:2em auto}\
.tokens{font-family:monospace;line-height:2}\
.tok{padding:1px 2px;border-radius:3px}\
.sal{background:#f4a3a3}\
.sub{background:#fde7a6}\
.irr{}\
.legend span{margin-right:1em}";

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn class(label: Label) -> &'static str {
    match label {
        Label::Saliency => "sal",
        Label::SubSaliency => "sub",
        Label::Irrelevant => "irr",
    }
}

pub fn saliency_report(
    example: &ReasoningExample,
    table: &ConditionProbTable,
    assignment: &SaliencyAssignment,
    scales: &ScaleVector,
) -> Result<String> {
    let n = table.len();
    for (what, got) in [
        ("tokens", table.tokens.len()),
        ("labels", assignment.labels.len()),
        ("scales", scales.values.len()),
    ] {
        if got != n {
            return Err(Error::LengthMismatch { what, got, expected: n });
        }
    }
    if let Some(r) = &assignment.ratios {
        if r.len() != n {
            return Err(Error::LengthMismatch {
                what: "ratios",
                got: r.len(),
                expected: n,
            });
        }
    }

    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"/>\n");
    let _ = writeln!(h, "<title>Saliency report: {}</title>", esc(&example.id));
    let _ = writeln!(h, "<style>{STYLE}</style>\n</head>\n<body>");
    let _ = writeln!(h, "<h1>{}</h1>", esc(&example.id));
    let branch = match assignment.branch {
        Branch::Correct => "correct",
        Branch::Incorrect => "incorrect",
    };
    let _ = writeln!(
        h,
        "<p>Response is <b>{branch}</b>{}. Saliency {} / sub-saliency {} / irrelevant {} of {n} tokens.</p>",
        if assignment.filtered_out {
            " and was filtered out of training"
        } else {
            ""
        },
        assignment.count(Label::Saliency),
        assignment.count(Label::SubSaliency),
        assignment.count(Label::Irrelevant),
    );
    let _ = writeln!(h, "<h2>Question</h2>\n<p>{}</p>", esc(&example.question));
    if let Some(j) = &example.judgment {
        let _ = writeln!(h, "<h2>Judgment</h2>\n<pre>{}</pre>", esc(j));
    }
    h.push_str(
        "<h2>Response</h2>\n<p class=\"legend\"><span class=\"tok sal\">saliency</span>\
<span class=\"tok sub\">sub-saliency</span><span>irrelevant</span></p>\n<div class=\"tokens\">\n",
    );
    for t in 0..n {
        let mut tip = format!(
            "p_base={:.6}; p_standard={:.6}",
            table.p_base[t], table.p_standard[t]
        );
        if let Some(pj) = &table.p_judge {
            let _ = write!(tip, "; p_judge={:.6}", pj[t]);
        }
        if let Some(r) = &assignment.ratios {
            let _ = write!(tip, "; r1={:.4}; r2={:.4}", r[t].r1, r[t].r2);
        }
        let _ = write!(tip, "; S={:.4}", scales.values[t]);
        let label = assignment.labels[t];
        let text = match table.tokens[t].as_str() {
            "\n" => "\u{21b5}".to_string(),
            other => esc(other),
        };
        let _ = write!(
            h,
            "<span class=\"tok {}\" title=\"{}\">{}</span> ",
            class(label),
            esc(&tip),
            text
        );
        if table.tokens[t] == "\n" {
            h.push_str("<br/>\n");
        }
    }
    h.push_str("\n</div>\n</body>\n</html>\n");
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::CollectedAt;
    use crate::corpus::{generate_synthetic, Difficulty};
    use crate::saliency::{allocate, NlftConfig};
    use crate::scale::compute_scales;

    fn table(correct: bool) -> ConditionProbTable {
        ConditionProbTable {
            example_id: "x".into(),
            tokens: vec!["3".into(), "<".into(), "4".into(), "\n".into(), "####".into()],
            token_ids: vec![],
            p_base: vec![0.1; 5],
            p_judge: (!correct).then(|| vec![0.4, 0.05, 0.4, 0.1, 0.1]),
            p_standard: if correct {
                vec![0.99, 0.5, 0.2, 0.1, 0.1]
            } else {
                vec![0.1; 5]
            },
            is_correct: correct,
            collected_at: CollectedAt::default(),
        }
    }

    /// Tiny tag-balance check: every opened element is closed in order.
    fn well_formed(html: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = html;
        while let Some(start) = rest.find('<') {
            let end = match rest[start..].find('>') {
                Some(e) => start + e,
                None => return false,
            };
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if tag.starts_with('!') || tag.ends_with('/') {
                continue;
            }
            let name = tag.split_whitespace().next().unwrap_or("");
            if let Some(closing) = name.strip_prefix('/') {
                if stack.pop().as_deref() != Some(closing) {
                    return false;
                }
            } else if name != "meta" {
                stack.push(name.to_string());
            }
        }
        stack.is_empty()
    }

    fn example() -> ReasoningExample {
        generate_synthetic(1, 1, &Difficulty::default()).examples.remove(0)
    }

    #[test]
    fn incorrect_report_carries_ratios() {
        let cfg = NlftConfig::default();
        let t = table(false);
        let a = allocate(&t, &cfg).unwrap();
        let s = compute_scales(&t, &a, &cfg).unwrap();
        let html = saliency_report(&example(), &t, &a, &s).unwrap();
        assert!(well_formed(&html), "{html}");
        let ratios = a.ratios.as_ref().unwrap();
        for i in a.saliency_indices() {
            assert!(html.contains(&format!("r1={:.4}", ratios[i].r1)));
        }
        assert!(html.contains("&lt;"));
        assert_eq!(html.matches("class=\"tok sal\"").count(), a.count(Label::Saliency) + 1);
    }

    #[test]
    fn all_irrelevant_has_no_highlight() {
        let cfg = NlftConfig::default();
        let mut t = table(true);
        t.p_standard = vec![0.1; 5];
        let a = allocate(&t, &cfg).unwrap();
        let s = compute_scales(&t, &a, &cfg).unwrap();
        let html = saliency_report(&example(), &t, &a, &s).unwrap();
        assert!(well_formed(&html));
        // only the legend entries carry highlight classes
        assert_eq!(html.matches("tok sal").count(), 1);
        assert_eq!(html.matches("tok sub").count(), 1);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let cfg = NlftConfig::default();
        let t = table(true);
        let a = allocate(&t, &cfg).unwrap();
        let mut s = compute_scales(&t, &a, &cfg).unwrap();
        s.values.pop();
        assert!(saliency_report(&example(), &t, &a, &s).is_err());
    }
}
