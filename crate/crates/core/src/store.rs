//! Named collections of embeddings and their text persistence format.
//!
//! Each section starts with a header line
//!
//! ```text
//! ellembed 1 <d> <k> <tau> <epsilon> <count> <side>
//! ```
//!
//! followed by `count` records `token m_1 .. m_d f_11 f_12 .. f_dk` with the
//! factor written row-major. Floats use the shortest decimal form that parses
//! back to the same bits, so a load/save cycle reproduces the file exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::bures::EllipticalPoint;
use crate::error::{EllError, Result};

const MAGIC: &str = "ellembed";
const VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Input,
    Context,
    Single,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Input => "input",
            Side::Context => "context",
            Side::Single => "single",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = EllError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Side::Input),
            "context" => Ok(Side::Context),
            "single" => Ok(Side::Single),
            other => Err(EllError::Data(format!("unknown side `{other}`"))),
        }
    }
}

/// Points keyed by token, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Collection {
    tokens: Vec<String>,
    points: Vec<EllipticalPoint>,
    index: HashMap<String, usize>,
}

impl Collection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(tokens: Vec<String>, points: Vec<EllipticalPoint>) -> Result<Self> {
        if tokens.len() != points.len() {
            return Err(EllError::Shape(format!("{} tokens but {} points", tokens.len(), points.len())));
        }
        let mut c = Self::new();
        for (t, p) in tokens.into_iter().zip(points) {
            c.push(t, p)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, token: String, point: EllipticalPoint) -> Result<()> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(EllError::Data(format!("token `{token}` is empty or contains whitespace")));
        }
        if self.index.contains_key(&token) {
            return Err(EllError::Data(format!("duplicate token `{token}`")));
        }
        if let Some(first) = self.points.first() {
            if first.dim() != point.dim() || first.rank() != point.rank() {
                return Err(EllError::Shape(format!(
                    "token `{token}` has shape {}x{}, collection uses {}x{}",
                    point.dim(),
                    point.rank(),
                    first.dim(),
                    first.rank()
                )));
            }
            if first.tau != point.tau || first.epsilon != point.epsilon {
                return Err(EllError::Data(format!("token `{token}` has a different tau or epsilon")));
            }
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.points.push(point);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn points(&self) -> &[EllipticalPoint] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [EllipticalPoint] {
        &mut self.points
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn get(&self, token: &str) -> Option<&EllipticalPoint> {
        self.id(token).map(|i| &self.points[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EllipticalPoint)> {
        self.tokens.iter().map(String::as_str).zip(&self.points)
    }
}

/// One single-sided collection, or an input/context pair sharing a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    sections: Vec<(Side, Collection)>,
}

impl EmbeddingStore {
    pub fn single(points: Collection) -> Self {
        Self { sections: vec![(Side::Single, points)] }
    }

    pub fn two_sided(input: Collection, context: Collection) -> Result<Self> {
        if input.tokens() != context.tokens() {
            return Err(EllError::Data("input and context collections must share a vocabulary".into()));
        }
        Ok(Self { sections: vec![(Side::Input, input), (Side::Context, context)] })
    }

    pub fn sides(&self) -> impl Iterator<Item = Side> + '_ {
        self.sections.iter().map(|(s, _)| *s)
    }

    pub fn side(&self, side: Side) -> Option<&Collection> {
        self.sections.iter().find(|(s, _)| *s == side).map(|(_, c)| c)
    }

    /// The requested side, falling back to the only section of a single store.
    pub fn side_or_single(&self, side: Side) -> Result<&Collection> {
        if let Some(c) = self.side(side) {
            return Ok(c);
        }
        match self.sections.as_slice() {
            [(Side::Single, c)] => Ok(c),
            _ => Err(EllError::Data(format!("store has no `{}` section", side.as_str()))),
        }
    }

    /// The first section (the only one for single stores).
    pub fn primary(&self) -> &Collection {
        &self.sections[0].1
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (side, coll) in &self.sections {
            write_section(&mut out, *side, coll);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let mut pos = 0;
        let mut sections = Vec::new();
        while pos < lines.len() {
            if lines[pos].trim().is_empty() {
                pos += 1;
                continue;
            }
            let (side, coll, next) = read_section(&lines, pos)?;
            sections.push((side, coll));
            pos = next;
        }
        match sections.as_slice() {
            [(Side::Single, _)] => {}
            [(Side::Input, a), (Side::Context, b)] => {
                if a.tokens() != b.tokens() {
                    return Err(EllError::Format {
                        line: lines.len(),
                        msg: "input and context sections have different vocabularies".into(),
                    });
                }
            }
            [] => return Err(EllError::Format { line: 1, msg: "empty store file".into() }),
            _ => {
                return Err(EllError::Format {
                    line: lines.len(),
                    msg: "expected one `single` section or an `input` section followed by a `context` section"
                        .into(),
                })
            }
        }
        Ok(Self { sections })
    }
}

fn section_shape(coll: &Collection) -> (usize, usize, f64, f64) {
    match coll.points().first() {
        Some(p) => (p.dim(), p.rank(), p.tau, p.epsilon),
        None => (0, 0, 1.0, 0.0),
    }
}

fn write_section(out: &mut String, side: Side, coll: &Collection) {
    let (d, k, tau, eps) = section_shape(coll);
    let _ = writeln!(out, "{MAGIC} {VERSION} {d} {k} {tau:?} {eps:?} {} {}", coll.len(), side.as_str());
    for (token, p) in coll.iter() {
        out.push_str(token);
        for v in p.mean.iter() {
            let _ = write!(out, " {v:?}");
        }
        for i in 0..d {
            for j in 0..k {
                let _ = write!(out, " {:?}", p.factor[(i, j)]);
            }
        }
        out.push('\n');
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| EllError::Format { line, msg: format!("cannot parse {what} from `{s}`") })
}

fn read_section(lines: &[&str], start: usize) -> Result<(Side, Collection, usize)> {
    let line_no = start + 1;
    let fields: Vec<&str> = lines[start].split_whitespace().collect();
    if fields.len() != 8 || fields[0] != MAGIC {
        return Err(EllError::Format { line: line_no, msg: "malformed header".into() });
    }
    if fields[1] != VERSION {
        return Err(EllError::Format { line: line_no, msg: format!("unsupported version `{}`", fields[1]) });
    }
    let d: usize = parse_field(fields[2], line_no, "dimension")?;
    let k: usize = parse_field(fields[3], line_no, "rank")?;
    let tau: f64 = parse_field(fields[4], line_no, "tau")?;
    let eps: f64 = parse_field(fields[5], line_no, "epsilon")?;
    let count: usize = parse_field(fields[6], line_no, "count")?;
    let side: Side = fields[7].parse().map_err(|_| EllError::Format {
        line: line_no,
        msg: format!("unknown side `{}`", fields[7]),
    })?;

    let mut coll = Collection::new();
    for r in 0..count {
        let idx = start + 1 + r;
        let line_no = idx + 1;
        let Some(line) = lines.get(idx) else {
            return Err(EllError::Format {
                line: line_no,
                msg: format!("file ends after {r} of {count} records"),
            });
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 1 + d + d * k {
            return Err(EllError::Format {
                line: line_no,
                msg: format!("expected {} fields, found {}", 1 + d + d * k, fields.len()),
            });
        }
        let vals = fields[1..]
            .iter()
            .map(|s| parse_field::<f64>(s, line_no, "value"))
            .collect::<Result<Vec<_>>>()?;
        let mean = DVector::from_column_slice(&vals[..d]);
        let factor = DMatrix::from_row_slice(d, k, &vals[d..]);
        let point = EllipticalPoint::new(mean, factor, eps, tau)
            .map_err(|e| EllError::Format { line: line_no, msg: e.to_string() })?;
        coll.push(fields[0].to_string(), point)
            .map_err(|e| EllError::Format { line: line_no, msg: e.to_string() })?;
    }
    Ok((side, coll, start + 1 + count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_collection(d: usize, k: usize, n: usize, seed: f64) -> Collection {
        let mut c = Collection::new();
        for i in 0..n {
            let mean = DVector::from_fn(d, |r, _| seed * (i as f64 + 1.0) / (r as f64 + 3.0));
            let factor = DMatrix::from_fn(d, k, |r, c| (seed * (r * k + c + i) as f64).sin());
            c.push(format!("tok{i}"), EllipticalPoint::new(mean, factor, 0.01, 1.0).unwrap()).unwrap();
        }
        c
    }

    #[test]
    fn line_count_matches_format() {
        let store = EmbeddingStore::single(sample_collection(2, 2, 3, 0.37));
        let text = store.to_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("ellembed 1 2 2 1.0 0.01 3 single\n"));
        let two = EmbeddingStore::two_sided(sample_collection(2, 2, 3, 0.37), sample_collection(2, 2, 3, 0.11)).unwrap();
        assert_eq!(two.to_text().lines().count(), 8);
    }

    #[test]
    fn round_trip_is_exact() {
        let store =
            EmbeddingStore::two_sided(sample_collection(3, 2, 5, 0.123), sample_collection(3, 2, 5, 1.7)).unwrap();
        let text = store.to_text();
        let back = EmbeddingStore::from_text(&text).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn truncated_file_names_line() {
        let text = EmbeddingStore::single(sample_collection(2, 1, 3, 0.5)).to_text();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        match EmbeddingStore::from_text(&cut) {
            Err(EllError::Format { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_and_field_count() {
        assert!(matches!(
            EmbeddingStore::from_text("ellembed 2 1 1 1.0 0.0 0 single\n"),
            Err(EllError::Format { line: 1, .. })
        ));
        let text = "ellembed 1 2 1 1.0 0.0 1 single\nfoo 1.0 2.0\n";
        assert!(matches!(EmbeddingStore::from_text(text), Err(EllError::Format { line: 2, .. })));
        assert!(matches!(EmbeddingStore::from_text(""), Err(EllError::Format { .. })));
    }

    #[test]
    fn rejects_whitespace_tokens() {
        let mut c = Collection::new();
        let p = EllipticalPoint::dirac(DVector::zeros(1), 1.0).unwrap();
        assert!(c.push("a b".into(), p.clone()).is_err());
        c.push("ab".into(), p.clone()).unwrap();
        assert!(c.push("ab".into(), p).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 6)) {
            let mean = DVector::from_column_slice(&vals[..2]);
            let factor = DMatrix::from_row_slice(2, 2, &vals[2..]);
            let mut c = Collection::new();
            c.push("w".into(), EllipticalPoint::new(mean, factor, 0.25, 0.2).unwrap()).unwrap();
            let store = EmbeddingStore::single(c);
            let back = EmbeddingStore::from_text(&store.to_text()).unwrap();
            prop_assert_eq!(back, store);
        }
    }
}
