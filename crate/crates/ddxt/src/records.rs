//! Patient files in the DDXPlus CSV schema.
//!
//! The list-valued columns hold Python list literals, e.g.
//! `['E_91', 'E_55_@_V_89']` and `[['Bronchitis', 0.19], ['URTI', 0.17]]`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ddxt_core::dataset::{Case, PatientRecord, Sex};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = [
    "AGE",
    "DIFFERENTIAL_DIAGNOSIS",
    "SEX",
    "PATHOLOGY",
    "EVIDENCES",
    "INITIAL_EVIDENCE",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Literal {
    Str(String),
    Num(f64),
    List(Vec<Literal>),
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn err<T>(&self, what: &str) -> std::result::Result<T, String> {
        Err(format!("{what} at offset {} in {:?}", self.pos, self.src))
    }

    fn value(&mut self) -> std::result::Result<Literal, String> {
        self.skip_ws();
        match self.peek() {
            Some('[') => self.list(),
            Some(q @ ('\'' | '"')) => self.string(q),
            Some(c) if c == '-' || c == '+' || c == '.' || c.is_ascii_digit() => self.number(),
            Some(_) => self.err("unexpected character"),
            None => self.err("unexpected end"),
        }
    }

    fn list(&mut self) -> std::result::Result<Literal, String> {
        self.bump();
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(']') {
                self.bump();
                return Ok(Literal::List(items));
            }
            items.push(self.value()?);
            self.skip_ws();
            match self.bump() {
                Some(',') => {}
                Some(']') => return Ok(Literal::List(items)),
                _ => return self.err("expected ',' or ']'"),
            }
        }
    }

    fn string(&mut self, quote: char) -> std::result::Result<Literal, String> {
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(c) => out.push(c),
                    None => return self.err("unterminated escape"),
                },
                Some(c) if c == quote => return Ok(Literal::Str(out)),
                Some(c) => out.push(c),
                None => return self.err("unterminated string"),
            }
        }
    }

    fn number(&mut self) -> std::result::Result<Literal, String> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'))
        {
            self.pos += 1;
        }
        match self.src[start..self.pos].parse() {
            Ok(v) => Ok(Literal::Num(v)),
            Err(_) => self.err("malformed number"),
        }
    }
}

/// Parses one complete literal; trailing text is an error.
pub fn parse_literal(src: &str) -> std::result::Result<Literal, String> {
    let mut c = Cursor { src, pos: 0 };
    let v = c.value()?;
    c.skip_ws();
    if c.pos != src.len() {
        return c.err("trailing characters");
    }
    Ok(v)
}

fn string_list(src: &str) -> std::result::Result<Vec<String>, String> {
    match parse_literal(src)? {
        Literal::List(items) => items
            .into_iter()
            .map(|i| match i {
                Literal::Str(s) => Ok(s),
                other => Err(format!("expected a string, got {other:?}")),
            })
            .collect(),
        other => Err(format!("expected a list, got {other:?}")),
    }
}

fn ddx_list(src: &str) -> std::result::Result<Vec<(String, f64)>, String> {
    let Literal::List(items) = parse_literal(src)? else {
        return Err(format!("expected a list of pairs in {src:?}"));
    };
    items
        .into_iter()
        .map(|i| match i {
            Literal::List(pair) => match pair.as_slice() {
                [Literal::Str(name), Literal::Num(p)] => Ok((name.clone(), *p)),
                _ => Err(format!("expected [name, probability], got {pair:?}")),
            },
            other => Err(format!("expected [name, probability], got {other:?}")),
        })
        .collect()
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' | '\'' => {
                out.push('\\');
                out.push(c);
            }
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('\'');
    out
}

pub fn format_string_list(items: &[String]) -> String {
    let parts: Vec<String> = items.iter().map(|s| quote(s)).collect();
    format!("[{}]", parts.join(", "))
}

pub fn format_ddx(ddx: &[(String, f64)]) -> String {
    let parts: Vec<String> = ddx.iter().map(|(n, p)| format!("[{}, {p:?}]", quote(n))).collect();
    format!("[{}]", parts.join(", "))
}

/// What to do with a row that fails to parse or validate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnError {
    Fail,
    Skip,
}

#[derive(Debug, Default)]
pub struct Parsed {
    pub records: Vec<PatientRecord>,
    /// `(row, message)` of every skipped row; rows count from 0 after the
    /// header.
    pub skipped: Vec<(usize, String)>,
}

fn parse_row(row: &csv::StringRecord, idx: &[usize; 6]) -> std::result::Result<PatientRecord, String> {
    let field = |i: usize| row.get(idx[i]).unwrap_or("");
    let age: i64 = field(0)
        .trim()
        .parse()
        .map_err(|_| format!("AGE {:?} is not an integer", field(0)))?;
    let ddx = ddx_list(field(1)).map_err(|e| format!("DIFFERENTIAL_DIAGNOSIS: {e}"))?;
    let sex = Sex::parse(field(2)).map_err(|e| e.to_string())?;
    let pathology = field(3).to_string();
    let evidences = string_list(field(4)).map_err(|e| format!("EVIDENCES: {e}"))?;
    let case = Case {
        age,
        sex,
        initial_evidence: field(5).to_string(),
        evidences,
    };
    PatientRecord::new(case, ddx, pathology).map_err(|e| e.to_string())
}

pub fn parse_reader(source: &Path, reader: impl Read, on_error: OnError) -> Result<Parsed> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(source, e.to_string()))?
        .clone();
    let mut idx = [0usize; 6];
    for (slot, col) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| Error::format(source, format!("missing column {col}")))?;
    }
    let mut out = Parsed::default();
    for (row, rec) in rdr.records().enumerate() {
        let parsed = rec.map_err(|e| e.to_string()).and_then(|r| parse_row(&r, &idx));
        match (parsed, on_error) {
            (Ok(r), _) => out.records.push(r),
            (Err(msg), OnError::Fail) => {
                return Err(Error::Row {
                    path: source.to_path_buf(),
                    row,
                    msg,
                })
            }
            (Err(msg), OnError::Skip) => out.skipped.push((row, msg)),
        }
    }
    Ok(out)
}

pub fn read_records(path: &Path, on_error: OnError) -> Result<Parsed> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(path, f, on_error)
}

pub fn write_records_to(dest: &Path, writer: impl Write, records: &[PatientRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::format(dest, e.to_string());
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.case.age.to_string(),
            format_ddx(&r.ddx),
            r.case.sex.as_str().to_string(),
            r.pathology.clone(),
            format_string_list(&r.case.evidences),
            r.case.initial_evidence.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(dest, e))
}

pub fn write_records(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_to(path, f, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, on_error: OnError) -> Result<Parsed> {
        parse_reader(Path::new("mem.csv"), text.as_bytes(), on_error)
    }

    const HEADER: &str = "AGE,DIFFERENTIAL_DIAGNOSIS,SEX,PATHOLOGY,EVIDENCES,INITIAL_EVIDENCE\n";

    #[test]
    fn literals() {
        assert_eq!(
            string_list("['E_91', \"E_55_@_V_89\", 'it\\'s']").unwrap(),
            vec!["E_91", "E_55_@_V_89", "it's"]
        );
        assert_eq!(
            ddx_list("[['Bronchitis', 0.19], ['URTI', 1e-2]]").unwrap(),
            vec![("Bronchitis".to_string(), 0.19), ("URTI".to_string(), 0.01)]
        );
        assert_eq!(string_list("[]").unwrap(), Vec::<String>::new());
        assert!(string_list("['a'").is_err());
        assert!(string_list("['a'] x").is_err());
        assert!(ddx_list("[['a']]").is_err());
    }

    #[test]
    fn three_rows_and_ascending_ddx() {
        let text = format!(
            "{HEADER}\
             37,\"[['B', 0.4], ['A', 0.6]]\",F,A,\"['E1', 'E2']\",E1\n\
             5,\"[['A', 1.0]]\",M,A,\"['E3']\",E3\n\
             80,\"[['C', 0.5], ['A', 0.5]]\",M,C,\"['E1']\",E1\n"
        );
        let p = parse(&text, OnError::Fail).unwrap();
        assert_eq!(p.records.len(), 3);
        assert_eq!(p.records[0].ddx[0].0, "A");
        assert_eq!(p.records[2].ddx[0].0, "C");
        assert_eq!(p.records[0].case.sex, Sex::F);
    }

    #[test]
    fn bad_rows_fail_fast_or_are_counted() {
        let text = format!(
            "{HEADER}\
             37,\"[['A', 1.0]]\",F,A,\"['E1']\",E1\n\
             37,\"[['A', 1.0]]\",F,Z,\"['E1']\",E1\n\
             37,\"[['A', 1.5]]\",F,A,\"['E1']\",E1\n\
             37,\"[['A', 1.0]\",F,A,\"['E1']\",E1\n"
        );
        match parse(&text, OnError::Fail) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 1),
            other => panic!("{other:?}"),
        }
        let p = parse(&text, OnError::Skip).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.skipped.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn missing_column() {
        let err = parse("AGE,SEX\n1,M\n", OnError::Fail).unwrap_err();
        assert!(err.to_string().contains("DIFFERENTIAL_DIAGNOSIS"), "{err}");
    }
}
