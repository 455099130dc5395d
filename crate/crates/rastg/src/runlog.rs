//! Line-delimited JSON run log plus optional human-readable echo on stderr.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Warn,
    Info,
    Debug,
}

impl Level {
    fn as_str(self) -> &'static str {
        match self {
            Level::Warn => "warn",
            Level::Info => "info",
            Level::Debug => "debug",
        }
    }
}

pub const LOG_FILE: &str = "log.jsonl";

pub struct RunLog {
    file: Option<BufWriter<File>>,
    /// Highest level echoed to stderr; `None` keeps stderr silent.
    echo: Option<Level>,
    start: Instant,
}

impl RunLog {
    /// Appends to `dir/log.jsonl`.
    pub fn create(dir: &Path, echo: Option<Level>) -> Result<Self> {
        let path = dir.join(LOG_FILE);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: Some(BufWriter::new(file)),
            echo,
            start: Instant::now(),
        })
    }

    pub fn silent() -> Self {
        Self {
            file: None,
            echo: None,
            start: Instant::now(),
        }
    }

    pub fn event(&mut self, level: Level, event: &str, fields: Value) {
        let mut rec = Map::new();
        rec.insert("elapsed_ms".into(), json!(self.start.elapsed().as_millis() as u64));
        rec.insert("level".into(), json!(level.as_str()));
        rec.insert("event".into(), json!(event));
        if let Value::Object(m) = &fields {
            rec.extend(m.clone());
        }
        if let Some(f) = &mut self.file {
            // a lost log line must not abort a run
            let _ = writeln!(f, "{}", Value::Object(rec));
            let _ = f.flush();
        }
        if self.echo.is_some_and(|e| level <= e) {
            eprintln!("[{}] {event} {fields}", level.as_str());
        }
    }

    pub fn info(&mut self, event: &str, fields: Value) {
        self.event(Level::Info, event, fields)
    }
}

/// Forwards `log` records from the numeric core to stderr.
pub struct StderrLogger(pub log::LevelFilter);

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= self.0
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("[{}] {}", r.level().as_str().to_lowercase(), r.args());
        }
    }

    fn flush(&self) {}
}
