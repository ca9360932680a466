use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Append-only backup of wire lines that could not be indexed.
///
/// The file holds the wire format itself, one event per line, so replay goes
/// through the same parser as live traffic.
#[derive(Debug, Clone)]
pub struct BackupJournal {
    path: PathBuf,
}

impl BackupJournal {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line and syncs it to disk before returning.
    pub fn append(&self, line: &str) -> io::Result<()> {
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.sync_data()
    }

    pub fn pending(&self) -> io::Result<Vec<String>> {
        match File::open(&self.path) {
            Ok(file) => BufReader::new(file)
                .lines()
                .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
                .collect(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    pub fn len(&self) -> io::Result<usize> {
        Ok(self.pending()?.len())
    }

    pub fn is_empty(&self) -> io::Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Atomically replaces the journal contents with `lines`.
    pub fn rewrite(&self, lines: &[String]) -> io::Result<()> {
        if lines.is_empty() {
            return match fs::remove_file(&self.path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
                _ => Ok(()),
            };
        }
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut file = File::create(&tmp)?;
            for line in lines {
                file.write_all(line.as_bytes())?;
                file.write_all(b"\n")?;
            }
            file.sync_all()?;
        }
        fs::rename(&tmp, &self.path)
    }
}

/// Sink for rejected raw lines. Without a path it only counts.
#[derive(Debug, Clone, Default)]
pub struct Quarantine {
    path: Option<PathBuf>,
    count: u64,
}

impl Quarantine {
    pub fn new(path: Option<PathBuf>) -> Self {
        Self { path, count: 0 }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, raw: &str) -> io::Result<()> {
        self.count += 1;
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            let raw = raw.trim_end_matches(['\r', '\n']);
            file.write_all(raw.escape_debug().to_string().as_bytes())?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }
}
