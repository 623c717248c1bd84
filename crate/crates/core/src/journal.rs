//! Append-only JSON-lines journal.
//!
//! Each store keeps its whole state in memory and appends one line per
//! mutation. Reopening replays the lines; compaction rewrites the file from a
//! snapshot of the live state.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub struct Journal<E> {
    sink: Option<(PathBuf, BufWriter<File>)>,
    _entry: PhantomData<fn(E)>,
}

impl<E> std::fmt::Debug for Journal<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("path", &self.sink.as_ref().map(|(p, _)| p))
            .finish()
    }
}

impl<E: Serialize + DeserializeOwned> Journal<E> {
    /// A journal that keeps nothing.
    pub fn in_memory() -> Self {
        Self {
            sink: None,
            _entry: PhantomData,
        }
    }

    /// Opens (or creates) `path` and returns the entries already in it.
    ///
    /// A final line without its newline is a torn write: it is dropped and
    /// cut from the file. Any other unparsable line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<E>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut entries = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = String::new();
            let mut line_no = 0usize;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = line.ends_with('\n');
                let text = line.trim_end();
                if text.is_empty() {
                    valid_len += n as u64;
                    continue;
                }
                match serde_json::from_str(text) {
                    Ok(entry) if complete => {
                        entries.push(entry);
                        valid_len += n as u64;
                    }
                    _ if !complete => break,
                    Ok(_) => unreachable!(),
                    Err(e) => {
                        return Err(Error::Journal(format!("{}:{line_no}: {e}", path.display())));
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        Ok((
            Self {
                sink: Some((path, BufWriter::new(file))),
                _entry: PhantomData,
            },
            entries,
        ))
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn append(&mut self, entry: &E) -> Result<()> {
        if let Some((_, out)) = &mut self.sink {
            serde_json::to_writer(&mut *out, entry).map_err(|e| Error::Journal(e.to_string()))?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }

    /// Replaces the file contents with `entries`, atomically.
    pub fn rewrite<'a, I>(&mut self, entries: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a E>,
        E: 'a,
    {
        let Some((path, _)) = &self.sink else {
            return Ok(());
        };
        let path = path.clone();
        let tmp = path.with_extension("compact");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            for entry in entries {
                serde_json::to_writer(&mut out, entry).map_err(|e| Error::Journal(e.to_string()))?;
                out.write_all(b"\n")?;
            }
            out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        self.sink = Some((path, BufWriter::new(file)));
        Ok(())
    }
}
