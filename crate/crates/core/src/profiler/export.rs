//! CSV/JSON writers for profiler outputs.
//!
//! Every CSV starts with `# key=value` comment lines (model, stat, kind,
//! layer, phase, plus caller-supplied lines such as the resolved run config),
//! followed by a header row and data rows.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use super::{CumulativeCurve, FrequencyVector, Heatmap};

/// `<model>_<stat>_<layer>_<phase>.csv`
pub fn stat_file_name(model: &str, stat: &str, layer: &str, phase: &str) -> String {
    format!("{model}_{stat}_{layer}_{phase}.csv")
}

#[derive(Debug, Clone, Default)]
pub struct CsvMeta {
    pub model: String,
    pub stat: String,
    pub kind: String,
    pub layer: String,
    pub phase: String,
    /// Extra comment lines, written verbatim after `# `.
    pub extra: Vec<String>,
}

impl CsvMeta {
    fn header(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("model", &self.model),
            ("stat", &self.stat),
            ("kind", &self.kind),
            ("layer", &self.layer),
            ("phase", &self.phase),
        ] {
            let _ = writeln!(s, "# {k}={v}");
        }
        for line in &self.extra {
            let _ = writeln!(s, "# {line}");
        }
        s
    }
}

pub fn heatmap_csv(h: &Heatmap, meta: &CsvMeta) -> String {
    let mut s = meta.header();
    s.push_str("row");
    for j in 0..h.dim {
        let _ = write!(s, ",{j}");
    }
    s.push('\n');
    for (i, row) in h.rows().enumerate().take(h.dim) {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn frequency_csv(f: &FrequencyVector, meta: &CsvMeta) -> String {
    let mut s = meta.header();
    s.push_str("expert,count,normalized\n");
    for (e, (c, n)) in f.counts.iter().zip(&f.normalized).enumerate() {
        let _ = writeln!(s, "{e},{c},{n}");
    }
    s
}

pub fn curve_csv(c: &CumulativeCurve, meta: &CsvMeta) -> String {
    let mut s = meta.header();
    s.push_str("rank,value,cumulative\n");
    for (r, (v, cum)) in c.sorted.iter().zip(&c.cumulative).enumerate() {
        let _ = writeln!(s, "{},{v},{cum}", r + 1);
    }
    s
}

/// One row per (layer, statistic); `undefined` where rho has no value.
pub fn spearman_csv(rows: &[(usize, &str, Option<f64>)], meta: &CsvMeta) -> String {
    let mut s = meta.header();
    s.push_str("layer,stat,rho\n");
    for (layer, stat, rho) in rows {
        match rho {
            Some(r) => {
                let _ = writeln!(s, "{layer},{stat},{r}");
            }
            None => {
                let _ = writeln!(s, "{layer},{stat},undefined");
            }
        }
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(text.as_bytes())?;
    f.flush()
}
