//! File formats: `jpnd-v1` JSON for joint distributions and histograms,
//! CSV for correlation surfaces and traces, and JSON for everything else.
//! Every float is written with 17 significant digits, so values read back
//! are bit-identical.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::distributions::{JointCounts, JointDistribution};
use crate::error::{Error, Result};
use crate::tes::{Trace, TraceModel};

/// Format tag of joint photon-number files.
pub const JPND_FORMAT: &str = "jpnd-v1";

/// JSON formatter printing floats as `d.dddddddddddddddde±x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactFloatFormatter;

impl serde_json::ser::Formatter for ExactFloatFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{}", format_f64(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// 17 significant digits in scientific notation.
pub fn format_f64(value: f64) -> String {
    format!("{value:.16e}")
}

/// Serializes `value` as one line of JSON with exact floats.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloatFormatter);
    value.serialize(&mut ser)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `value` as JSON followed by a newline.
pub fn write_json<T: Serialize + ?Sized, W: Write>(mut writer: W, value: &T) -> Result<()> {
    writer.write_all(to_json_string(value)?.as_bytes())?;
    writer.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JpndFile {
    format: String,
    dim_s: usize,
    dim_i: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_events: Option<u64>,
    #[serde(default)]
    truncated_mass: f64,
}

/// Contents of a `jpnd-v1` file.
#[derive(Clone, Debug, PartialEq)]
pub enum Jpnd {
    Probs(JointDistribution<f64>),
    Counts(JointCounts),
}

impl Jpnd {
    /// Probabilities; histograms become relative frequencies carrying their
    /// event count.
    pub fn into_distribution(self) -> Result<JointDistribution<f64>> {
        match self {
            Jpnd::Probs(j) => Ok(j),
            Jpnd::Counts(c) => c.to_distribution(),
        }
    }

    pub fn n_events(&self) -> Option<u64> {
        match self {
            Jpnd::Probs(j) => j.n_events(),
            Jpnd::Counts(c) => Some(c.n_events()),
        }
    }
}

pub fn write_distribution<W: Write>(writer: W, j: &JointDistribution<f64>) -> Result<()> {
    let (dim_s, dim_i) = j.dims();
    write_json(
        writer,
        &JpndFile {
            format: JPND_FORMAT.into(),
            dim_s,
            dim_i,
            probs: Some(j.probs().to_vec()),
            counts: None,
            n_events: j.n_events(),
            truncated_mass: j.truncated_mass(),
        },
    )
}

pub fn write_counts<W: Write>(writer: W, c: &JointCounts) -> Result<()> {
    let (dim_s, dim_i) = c.dims();
    write_json(
        writer,
        &JpndFile {
            format: JPND_FORMAT.into(),
            dim_s,
            dim_i,
            probs: None,
            counts: Some(c.counts().to_vec()),
            n_events: Some(c.n_events()),
            truncated_mass: 0.0,
        },
    )
}

pub fn read_jpnd<R: Read>(reader: R) -> Result<Jpnd> {
    let f: JpndFile = serde_json::from_reader(reader)?;
    if f.format != JPND_FORMAT {
        return Err(Error::Format(format!(
            "expected format '{JPND_FORMAT}', found '{}'",
            f.format
        )));
    }
    match (f.probs, f.counts) {
        (Some(probs), None) => Ok(Jpnd::Probs(
            JointDistribution::new(f.dim_s, f.dim_i, probs, f.truncated_mass)?
                .with_n_events(f.n_events),
        )),
        (None, Some(counts)) => {
            let c = JointCounts::new(f.dim_s, f.dim_i, counts)?;
            if let Some(n) = f.n_events {
                if n != c.n_events() {
                    return Err(Error::Format(format!(
                        "n_events {n} disagrees with the counts total {}",
                        c.n_events()
                    )));
                }
            }
            Ok(Jpnd::Counts(c))
        }
        _ => Err(Error::Format(
            "exactly one of 'probs' and 'counts' must be present".into(),
        )),
    }
}

/// Writes a correlation surface as CSV with header `m,n,value,mc_std`;
/// `mc_std` is left empty when absent.
pub fn write_g_surface<W: Write>(
    writer: W,
    max_m: usize,
    max_n: usize,
    values: &[f64],
    mc_std: Option<&[f64]>,
) -> Result<()> {
    if values.len() != max_m * max_n || mc_std.is_some_and(|s| s.len() != values.len()) {
        return Err(Error::DimensionMismatch("surface size".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["m", "n", "value", "mc_std"])?;
    for m in 1..=max_m {
        for n in 1..=max_n {
            let idx = (m - 1) * max_n + (n - 1);
            let std = mc_std.map_or(String::new(), |s| format_f64(s[idx]));
            w.write_record([m.to_string(), n.to_string(), format_f64(values[idx]), std])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sidecar metadata of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub dt: f64,
    pub samples: usize,
    pub model: TraceModel,
    pub seed: u64,
    /// True photon numbers of synthetic traces, in file order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photons: Option<Vec<usize>>,
}

/// Writes one trace per row: id, then samples.
pub fn write_traces<W: Write>(writer: W, traces: &[Trace]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for (id, t) in traces.iter().enumerate() {
        let mut rec = Vec::with_capacity(t.samples.len() + 1);
        rec.push(id.to_string());
        rec.extend(t.samples.iter().map(|&s| format_f64(s)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads traces written by [`write_traces`], returning ids and traces.
pub fn read_traces<R: Read>(reader: R) -> Result<(Vec<String>, Vec<Trace>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(reader);
    let mut ids = Vec::new();
    let mut traces = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut fields = rec.iter();
        let id = fields
            .next()
            .ok_or_else(|| Error::Format("empty trace row".into()))?;
        let samples = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("trace {id}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(id.to_string());
        traces.push(Trace { samples });
    }
    Ok((ids, traces))
}
