use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{ExpertId, ModelSpec, Phase, RequestTrace, TokenStep, TraceError, TraceSet};

/// One request as it appears on disk, before validation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawRecord {
    pub request_id: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(default)]
    pub prefill: Vec<Vec<Vec<ExpertId>>>,
    #[serde(default)]
    pub decode: Vec<Vec<Vec<ExpertId>>>,
}

impl RawRecord {
    fn into_request(self) -> RequestTrace {
        let tokens = self
            .prefill
            .into_iter()
            .map(|s| TokenStep::new(Phase::Prefill, s))
            .chain(
                self.decode
                    .into_iter()
                    .map(|s| TokenStep::new(Phase::Decode, s)),
            )
            .collect();
        RequestTrace {
            request_id: self.request_id,
            tokens,
            tags: self.tags,
        }
    }
}

/// Maps one line of an external trace file onto the canonical record.
///
/// The canonical layout is handled by [`CanonicalAdapter`]; converters for
/// other published layouts plug in here without touching validation.
pub trait RecordAdapter {
    fn adapt(&self, line: &str) -> Result<RawRecord, String>;

    /// Whether the first line is a `{"model": ...}` header.
    fn expects_header(&self) -> bool {
        true
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CanonicalAdapter;

impl RecordAdapter for CanonicalAdapter {
    fn adapt(&self, line: &str) -> Result<RawRecord, String> {
        serde_json::from_str(line).map_err(|e| e.to_string())
    }
}

#[derive(Deserialize)]
struct Header {
    model: ModelSpec,
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let inner: Box<dyn Read> = if is_gz(path) {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(inner)))
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Streaming record-by-record reader; holds at most one request in memory.
pub struct TraceReader {
    lines: std::io::Lines<Box<dyn BufRead>>,
    spec: ModelSpec,
    adapter: Box<dyn RecordAdapter>,
    line: usize,
    path: String,
}

impl TraceReader {
    pub fn open(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Self, TraceError> {
        Self::with_adapter(path, spec, Box::new(CanonicalAdapter))
    }

    pub fn with_adapter(
        path: impl AsRef<Path>,
        spec: &ModelSpec,
        adapter: Box<dyn RecordAdapter>,
    ) -> Result<Self, TraceError> {
        let path = path.as_ref();
        spec.validate()?;
        let mut reader = TraceReader {
            lines: open_reader(path)?.lines(),
            spec: spec.clone(),
            adapter,
            line: 0,
            path: path.display().to_string(),
        };
        if reader.adapter.expects_header() {
            let first = reader.next_line()?.ok_or(TraceError::Malformed {
                line: 1,
                reason: "missing model header line".into(),
            })?;
            let header: Header =
                serde_json::from_str(&first).map_err(|e| TraceError::Malformed {
                    line: reader.line,
                    reason: format!("bad model header: {e}"),
                })?;
            spec.check_compatible(&header.model)?;
        }
        Ok(reader)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn next_line(&mut self) -> Result<Option<String>, TraceError> {
        for l in self.lines.by_ref() {
            self.line += 1;
            let l = l.map_err(|source| TraceError::Io {
                path: self.path.clone(),
                source,
            })?;
            if !l.trim().is_empty() {
                return Ok(Some(l));
            }
        }
        Ok(None)
    }
}

impl Iterator for TraceReader {
    type Item = Result<RequestTrace, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.next_line() {
            Ok(Some(l)) => l,
            Ok(None) => return None,
            Err(e) => return Some(Err(e)),
        };
        let raw = match self.adapter.adapt(&line) {
            Ok(r) => r,
            Err(reason) => {
                return Some(Err(TraceError::Malformed {
                    line: self.line,
                    reason,
                }))
            }
        };
        let req = raw.into_request();
        Some(req.validate(&self.spec, self.line).map(|_| req))
    }
}

/// Loads and validates a whole trace file; the first bad record is an error.
pub fn load_traces(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<TraceSet, TraceError> {
    let requests = TraceReader::open(path, spec)?.collect::<Result<Vec<_>, _>>()?;
    Ok(TraceSet {
        model: spec.clone(),
        requests,
    })
}

/// Result of a lenient load: the valid requests plus every rejected record.
#[derive(Debug)]
pub struct LoadOutcome {
    pub traces: TraceSet,
    pub skipped: Vec<TraceError>,
}

/// Loads a trace file, skipping (and reporting) malformed or invalid records.
pub fn load_traces_lenient(
    path: impl AsRef<Path>,
    spec: &ModelSpec,
) -> Result<LoadOutcome, TraceError> {
    let mut traces = TraceSet::new(spec.clone());
    let mut skipped = Vec::new();
    for rec in TraceReader::open(path, spec)? {
        match rec {
            Ok(r) => traces.requests.push(r),
            Err(e @ TraceError::Io { .. }) => return Err(e),
            Err(e) => skipped.push(e),
        }
    }
    Ok(LoadOutcome { traces, skipped })
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    model: &'a ModelSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator: Option<&'a serde_json::Value>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    request_id: &'a str,
    tags: &'a BTreeMap<String, String>,
    prefill: Vec<Vec<Vec<ExpertId>>>,
    decode: Vec<Vec<Vec<ExpertId>>>,
}

fn canonical(steps: &[TokenStep]) -> Vec<Vec<Vec<ExpertId>>> {
    steps
        .iter()
        .map(|t| {
            t.selections
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.sort_unstable();
                    s
                })
                .collect()
        })
        .collect()
}

/// Streaming writer for the canonical JSON Lines format (gzip by `.gz` suffix).
pub struct TraceWriter {
    out: Box<dyn Write>,
    path: String,
}

impl TraceWriter {
    pub fn create(
        path: impl AsRef<Path>,
        model: &ModelSpec,
        generator: Option<&serde_json::Value>,
    ) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let io_err = |source| TraceError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = BufWriter::new(File::create(path).map_err(io_err)?);
        let out: Box<dyn Write> = if is_gz(path) {
            Box::new(GzEncoder::new(file, Compression::default()))
        } else {
            Box::new(file)
        };
        let mut w = TraceWriter {
            out,
            path: path.display().to_string(),
        };
        w.write_json(&HeaderOut { model, generator })?;
        Ok(w)
    }

    fn write_json<T: Serialize>(&mut self, v: &T) -> Result<(), TraceError> {
        let io_err = |source| TraceError::Io {
            path: self.path.clone(),
            source,
        };
        serde_json::to_writer(&mut self.out, v).map_err(|e| io_err(e.into()))?;
        self.out.write_all(b"\n").map_err(io_err)
    }

    pub fn write(&mut self, req: &RequestTrace) -> Result<(), TraceError> {
        let split = req.decode_start();
        self.write_json(&RecordOut {
            request_id: &req.request_id,
            tags: &req.tags,
            prefill: canonical(&req.tokens[..split]),
            decode: canonical(&req.tokens[split..]),
        })
    }

    pub fn finish(mut self) -> Result<(), TraceError> {
        self.out.flush().map_err(|source| TraceError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

pub fn save_traces(ts: &TraceSet, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut w = TraceWriter::create(path, &ts.model, None)?;
    for r in &ts.requests {
        w.write(r)?;
    }
    w.finish()
}
