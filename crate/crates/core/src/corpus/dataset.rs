use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use num_rational::Rational64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::answer::{extract_answer, format_rational, parse_number};
use crate::error::{Error, Result};

/// One task instance: question, reference solution, and optionally a
/// generated response with its judgment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningExample {
    pub id: String,
    pub question: String,
    pub standard_solution: String,
    pub standard_answer: Rational64,
    pub generated_output: Option<String>,
    pub judgment: Option<String>,
    pub is_correct: Option<bool>,
}

impl ReasoningExample {
    pub fn validate(&self) -> Result<()> {
        if self.is_correct.is_some() && self.generated_output.is_none() {
            return Err(Error::InvalidExample {
                id: self.id.clone(),
                message: "correctness is set but there is no generated output".into(),
            });
        }
        if extract_answer(&self.standard_solution) != Some(self.standard_answer) {
            return Err(Error::InvalidExample {
                id: self.id.clone(),
                message: "standard solution does not end with the standard answer".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::from(self.id.clone()));
        obj.insert("question".into(), Value::from(self.question.clone()));
        obj.insert("solution".into(), Value::from(self.standard_solution.clone()));
        obj.insert("answer".into(), Value::from(format_rational(&self.standard_answer)));
        if let Some(o) = &self.generated_output {
            obj.insert("output".into(), Value::from(o.clone()));
        }
        if let Some(j) = &self.judgment {
            obj.insert("judgment".into(), Value::from(j.clone()));
        }
        if let Some(c) = self.is_correct {
            obj.insert("correct".into(), Value::from(c));
        }
        Value::Object(obj)
    }

    /// Parses one JSONL record; `line` is 1-based and only used for errors.
    pub fn from_json(value: &Value, line: usize) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
            line,
            message: "expected a json object".into(),
        })?;
        let required = |field: &'static str| -> Result<&Value> {
            obj.get(field).ok_or(Error::MissingField { field, line })
        };
        let string = |field: &'static str, v: &Value| -> Result<String> {
            v.as_str().map(str::to_string).ok_or_else(|| Error::MalformedLine {
                line,
                message: format!("field {field} must be a string"),
            })
        };
        let optional_string = |field: &'static str| -> Result<Option<String>> {
            match obj.get(field) {
                None | Some(Value::Null) => Ok(None),
                Some(v) => string(field, v).map(Some),
            }
        };
        let id = string("id", required("id")?)?;
        let question = string("question", required("question")?)?;
        let standard_solution = string("solution", required("solution")?)?;
        let answer = required("answer")?;
        let answer_text = match answer {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => {
                return Err(Error::MalformedLine {
                    line,
                    message: "field answer must be a number or string".into(),
                })
            }
        };
        let standard_answer = parse_number(&answer_text).ok_or_else(|| Error::MalformedLine {
            line,
            message: format!("answer {answer_text:?} is not a number"),
        })?;
        let is_correct = match obj.get("correct") {
            None | Some(Value::Null) => None,
            Some(Value::Bool(b)) => Some(*b),
            Some(_) => {
                return Err(Error::MalformedLine {
                    line,
                    message: "field correct must be a boolean".into(),
                })
            }
        };
        Ok(ReasoningExample {
            id,
            question,
            standard_solution,
            standard_answer,
            generated_output: optional_string("output")?,
            judgment: optional_string("judgment")?,
            is_correct,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<ReasoningExample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(examples: Vec<ReasoningExample>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &examples {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            e.validate()?;
        }
        Ok(Dataset {
            examples,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ReasoningExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Shuffles with a seeded Fisher–Yates pass and keeps the first `n`.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::SubsetOutOfRange {
                requested: n,
                available: self.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let examples = order[..n].iter().map(|&i| self.examples[i].clone()).collect();
        Ok(Dataset {
            examples,
            provenance: Provenance {
                source: format!("{}[subset n={n} seed={seed}]", self.provenance.source),
                ..self.provenance.clone()
            },
        })
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for e in &self.examples {
            serde_json::to_writer(&mut buf, &e.to_json()).expect("json values always serialize");
            buf.push(b'\n');
        }
        write_atomic(path, &buf)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
            examples.push(ReasoningExample::from_json(&value, line_no)?);
        }
        let source = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::new(
            examples,
            Provenance {
                source,
                seed: None,
                split: String::new(),
            },
        )
    }
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, answer: i64) -> ReasoningExample {
        ReasoningExample {
            id: id.into(),
            question: format!("question {id}"),
            standard_solution: format!("work\n#### {answer}"),
            standard_answer: Rational64::from_integer(answer),
            generated_output: None,
            judgment: None,
            is_correct: None,
        }
    }

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n).map(|i| example(&format!("e{i}"), i as i64)).collect(),
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn subset_rejects_out_of_range() {
        let d = dataset(5);
        assert!(matches!(d.subset(0, 1), Err(Error::SubsetOutOfRange { .. })));
        assert!(matches!(d.subset(6, 1), Err(Error::SubsetOutOfRange { .. })));
        assert_eq!(d.subset(1, 1).unwrap().len(), 1);
    }

    #[test]
    fn full_subset_is_a_permutation() {
        let d = dataset(20);
        let s = d.subset(20, 9).unwrap();
        let mut a: Vec<_> = s.examples.iter().map(|e| e.id.clone()).collect();
        let mut b: Vec<_> = d.examples.iter().map(|e| e.id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn subset_prefix_property() {
        let d = dataset(100);
        let small = d.subset(50, 3).unwrap();
        let large = d.subset(100, 3).unwrap();
        assert_eq!(small.examples[..], large.examples[..50]);
        assert_eq!(d.subset(50, 3).unwrap(), small);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Dataset::new(vec![example("a", 1), example("a", 2)], Provenance::default());
        assert!(matches!(r, Err(Error::DuplicateId(_))));
    }

    #[test]
    fn correctness_without_output_rejected() {
        let mut e = example("a", 1);
        e.is_correct = Some(true);
        assert!(e.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut d = dataset(3);
        d.examples[1].generated_output = Some("x\n#### 2".into());
        d.examples[1].is_correct = Some(false);
        d.examples[1].judgment = Some("wrong".into());
        d.examples[2].standard_answer = Rational64::new(7, 2);
        d.examples[2].standard_solution = "half\n#### 3.5".into();
        d.save_jsonl(&path).unwrap();
        let back = Dataset::load_jsonl(&path).unwrap();
        assert_eq!(back.examples, d.examples);
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"question\":\"q\",\"solution\":\"#### 1\",\"answer\":1}\n{\"id\":\"b\",\"solution\":\"#### 1\",\"answer\":1}\n",
        )
        .unwrap();
        let err = Dataset::load_jsonl(&path).unwrap_err();
        assert_eq!(err.to_string(), "missing field question at line 2");
    }

    #[test]
    fn malformed_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{not json}\n").unwrap();
        let err = Dataset::load_jsonl(&path).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 1, .. }));
    }
}
