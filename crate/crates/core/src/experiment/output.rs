//! Output plumbing: float formatting, CSV tables and atomic directory commits.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// 17 significant digits in scientific notation; parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// A CSV table with a fixed header. Fields never contain commas or quotes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |msg: String| Error::BadResultFile { path: path.to_path_buf(), msg };
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').map(String::from).collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(String::from).collect();
            if row.len() != header.len() {
                return Err(bad(format!("line {}: {} fields, expected {}", n + 2, row.len(), header.len())));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    Ok(fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none())
}

/// Builds a directory under a temporary sibling name and renames it to `out`
/// once `fill` succeeds, so readers never see a partial directory. Fails if
/// `out` already exists and holds anything.
pub fn commit_dir<F>(out: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    if out.exists() && (!out.is_dir() || !is_empty_dir(out)?) {
        return Err(Error::OutputExists(out.to_path_buf()));
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&tmp, out).map_err(|e| {
        let _ = fs::remove_dir_all(&tmp);
        Error::io(out, e)
    })
}

/// Writes named text files into a fresh directory, atomically.
pub fn commit_files(out: &Path, files: &[(&str, String)]) -> Result<()> {
    commit_dir(out, |dir| {
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 0.0, -2.5e-300, f64::MAX, 0.12692801104297263] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
        }
    }

    #[test]
    fn tables_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), fmt_f64(0.5)]);
        let back = Table::parse(Path::new("x"), &t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert!(Table::parse(Path::new("x"), "a,b\n1\n").is_err());
    }

    #[test]
    fn commit_is_all_or_nothing() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        let err = commit_dir(&out, |dir| {
            fs::write(dir.join("partial"), "x").unwrap();
            Err(Error::EmptySampleSet)
        });
        assert!(err.is_err());
        assert!(!out.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);

        commit_files(&out, &[("a.txt", "hello".into())]).unwrap();
        assert_eq!(fs::read_to_string(out.join("a.txt")).unwrap(), "hello");
        assert!(matches!(commit_files(&out, &[]), Err(Error::OutputExists(_))));

        let empty = root.path().join("empty");
        fs::create_dir(&empty).unwrap();
        commit_files(&empty, &[("b.txt", "x".into())]).unwrap();
        assert!(empty.join("b.txt").exists());
    }
}
