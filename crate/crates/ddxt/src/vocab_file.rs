//! Vocabulary files: one token per line, line number = id.

use std::fs;
use std::path::Path;

use ddxt_core::vocab::Vocabulary;

use crate::error::{Error, Result};

pub fn to_text(v: &Vocabulary) -> String {
    let mut s = v.tokens().join("\n");
    s.push('\n');
    s
}

pub fn from_text(path: &Path, text: &str) -> Result<Vocabulary> {
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocabulary::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: &Path, v: &Vocabulary) -> Result<()> {
    fs::write(path, to_text(v)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = Vocabulary::build(["30-44", "Possible NSTEMI / STEMI", "E_55_@_V_89"]).unwrap();
        let p = Path::new("v.txt");
        assert_eq!(from_text(p, &to_text(&v)).unwrap(), v);
        assert!(from_text(p, "a\nb\n").is_err());
    }
}
