use num_rational::Rational64;

pub const ANSWER_MARKER: &str = "####";

/// Result of scanning a response for its final answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedAnswer {
    pub value: Option<Rational64>,
    /// More than one answer marker was present; the last one was used.
    pub multiple_markers: bool,
}

/// Parses a decimal, fraction or integer literal with optional sign and
/// thousands separators.
pub fn parse_number(raw: &str) -> Option<Rational64> {
    let cleaned: String = raw.chars().filter(|&c| c != ',').collect();
    let s = cleaned.trim();
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.trim_start()),
        None => (false, s.strip_prefix('+').unwrap_or(s).trim_start()),
    };
    if body.is_empty() {
        return None;
    }
    let value = if let Some((num, den)) = body.split_once('/') {
        let n = parse_digits(num.trim())?;
        let d = parse_digits(den.trim())?;
        if d == 0 {
            return None;
        }
        Rational64::new(n, d)
    } else if let Some((int, frac)) = body.split_once('.') {
        if int.is_empty() && frac.is_empty() {
            return None;
        }
        let i = if int.is_empty() { 0 } else { parse_digits(int)? };
        let f = if frac.is_empty() { 0 } else { parse_digits(frac)? };
        let scale = 10i64.checked_pow(frac.len() as u32)?;
        Rational64::new(i.checked_mul(scale)?.checked_add(f)?, scale)
    } else {
        Rational64::from_integer(parse_digits(body)?)
    };
    Some(if negative { -value } else { value })
}

fn parse_digits(s: &str) -> Option<i64> {
    if s.is_empty() || s.len() > 18 || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

pub fn extract_answer_detailed(text: &str) -> ExtractedAnswer {
    let markers = text.matches(ANSWER_MARKER).count();
    let Some(pos) = text.rfind(ANSWER_MARKER) else {
        return ExtractedAnswer {
            value: None,
            multiple_markers: false,
        };
    };
    let tail = text[pos + ANSWER_MARKER.len()..]
        .trim_start_matches('#')
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim();
    // A sign may be separated from the digits by the word tokenizer.
    let mut words = tail.split_whitespace();
    let candidate = match words.next() {
        Some(sign @ ("-" | "+")) => words.next().map(|w| format!("{sign}{w}")),
        Some(w) => Some(w.to_string()),
        None => None,
    };
    ExtractedAnswer {
        value: candidate.as_deref().and_then(parse_number),
        multiple_markers: markers > 1,
    }
}

/// Returns the number after the last `####` marker.
pub fn extract_answer(text: &str) -> Option<Rational64> {
    let extracted = extract_answer_detailed(text);
    if extracted.multiple_markers {
        log::warn!("response contains several answer markers; using the last one");
    }
    extracted.value
}

/// True iff the response's extracted answer equals `standard_answer` exactly.
pub fn check_correctness(generated_output: &str, standard_answer: Rational64) -> bool {
    extract_answer(generated_output) == Some(standard_answer)
}

pub fn format_rational(r: &Rational64) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}
