//! CSV trace format: header `sample_id,label,a0,a1,...`, label blank when absent.

use std::collections::HashSet;

use super::{ActivationVector, TraceDataset, TraceRecord};
use crate::error::{Error, Location, Result};

pub fn encode_csv(dataset: &TraceDataset) -> Result<Vec<u8>> {
    let mut w = ::csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((0..dataset.n_neurons()).map(|i| format!("a{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in dataset.iter() {
        let mut row = Vec::with_capacity(2 + r.activations.len());
        row.push(r.sample_id.to_string());
        row.push(r.label.map(|l| l.to_string()).unwrap_or_default());
        // `Display` for f32 is shortest-round-trip.
        row.extend(r.activations.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArtifact(e.to_string()))
}

fn csv_err(e: ::csv::Error) -> Error {
    let location = Location::Line(e.position().map(|p| p.line()).unwrap_or(0));
    Error::MalformedValue {
        location,
        reason: e.to_string(),
    }
}

pub fn decode_csv(bytes: &[u8]) -> Result<TraceDataset> {
    let mut rd = ::csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut rows = rd.records();

    let header = match rows.next() {
        Some(h) => h.map_err(csv_err)?,
        None => {
            return Err(Error::MalformedHeader {
                location: Location::Line(1),
                reason: "file is empty".into(),
            })
        }
    };
    if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "label" {
        return Err(Error::MalformedHeader {
            location: Location::Line(1),
            reason: "expected `sample_id,label,a0,...`".into(),
        });
    }
    let n_neurons = header.len() - 2;

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rows {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let location = Location::Line(line);
        if row.len() != header.len() {
            return Err(Error::RowWidth {
                location,
                expected: n_neurons,
                found: row.len().saturating_sub(2),
            });
        }
        let bad = |what: &str, field: &str| Error::MalformedValue {
            location,
            reason: format!("invalid {what} `{field}`"),
        };
        let sample_id: u64 = row[0]
            .trim()
            .parse()
            .map_err(|_| bad("sample_id", &row[0]))?;
        let label = match row[1].trim() {
            "" | "-1" => None,
            s => Some(s.parse::<u32>().map_err(|_| bad("label", s))?),
        };
        let mut values = Vec::with_capacity(n_neurons);
        for field in row.iter().skip(2) {
            let v: f32 = field.trim().parse().map_err(|_| bad("activation", field))?;
            if !v.is_finite() {
                return Err(Error::NonFinite { location });
            }
            values.push(v);
        }
        if !seen.insert(sample_id) {
            return Err(Error::DuplicateSampleId(sample_id));
        }
        records.push(TraceRecord::new(sample_id, ActivationVector(values), label));
    }
    TraceDataset::new(n_neurons, records)
}
