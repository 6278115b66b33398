use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{GlotError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Cv,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Cv => "cv",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = GlotError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv" => Ok(Split::Cv),
            "test" => Ok(Split::Test),
            _ => Err(GlotError::Data(format!("unknown split {s:?} (cv|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub gloss: String,
    pub text: String,
    pub split: Split,
}

/// Tab-separated sample index: `id  path  gloss  text  split`, one record per
/// line, `#` lines ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let at = || format!("manifest line {}", n + 1);
            if cols.len() != 5 {
                return Err(GlotError::Data(format!(
                    "{}: expected 5 tab-separated fields, found {}",
                    at(),
                    cols.len()
                )));
            }
            let entry = ManifestEntry {
                id: cols[0].to_string(),
                path: PathBuf::from(cols[1]),
                gloss: cols[2].split_whitespace().collect::<Vec<_>>().join(" "),
                text: cols[3].split_whitespace().collect::<Vec<_>>().join(" "),
                split: cols[4].trim().parse()?,
            };
            if entry.id.is_empty() || entry.gloss.is_empty() || entry.text.is_empty() {
                return Err(GlotError::Data(format!("{}: id, gloss and text must be non-empty", at())));
            }
            if !seen.insert(entry.id.clone()) {
                return Err(GlotError::Data(format!("{}: duplicate id {}", at(), entry.id)));
            }
            entries.push(entry);
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlotError::io(path, e))?;
        Manifest::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| GlotError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}\t{}\t{}\t{}\t{}", e.id, e.path.display(), e.gloss, e.text, e.split)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format() {
        let text = "# comment\na\tf/a.feat\tG1 G2\tw2 the w1 .\tcv\n\nb\tf/b.feat\tG1\tw1 .\ttest\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[1].split, Split::Test);
        assert_eq!(Manifest::parse(&m.to_string()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_records() {
        assert!(Manifest::parse("a\tp\tg\tt\n").is_err());
        assert!(Manifest::parse("a\tp\tg\tt\tdev\n").is_err());
        assert!(Manifest::parse("a\tp\tg\tt\tcv\na\tq\tg\tt\tcv\n").is_err());
        assert!(Manifest::parse("a\tp\t \tt\tcv\n").is_err());
    }
}
