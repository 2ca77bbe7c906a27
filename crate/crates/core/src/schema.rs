//! Canonical fused feature schema and the tabular container shared by the
//! fusion, preprocessing, synthesis and model stages.
//!
//! The fused representation has exactly 60 feature columns: 14 flow-level
//! connection features, 42 aggregated packet-level features and 4 derived
//! flow features, in that order. Column names are load-bearing: CSV headers,
//! pipeline schemas and model schema hashes are all derived from this list.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// One cell of a feature table.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Num(_) => None,
            Value::Cat(s) => Some(s),
        }
    }

    /// Canonical text rendering: shortest round-trip decimals for numbers,
    /// the raw string for categories.
    pub fn render(&self) -> String {
        match self {
            Value::Num(v) => format_num(*v),
            Value::Cat(s) => s.clone(),
        }
    }
}

/// Shortest round-trip decimal rendering of an f64 (Rust's Display).
pub fn format_num(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").expect("write to string");
    s
}

/// The 60 fused feature columns in canonical order with their kinds.
pub const FUSED_COLUMNS: [(&str, ColumnKind); 60] = [
    // Flow-level connection features.
    ("conn_state", ColumnKind::Categorical),
    ("duration", ColumnKind::Numeric),
    ("history", ColumnKind::Categorical),
    ("local_orig", ColumnKind::Numeric),
    ("local_resp", ColumnKind::Numeric),
    ("missed_bytes", ColumnKind::Numeric),
    ("orig_bytes", ColumnKind::Numeric),
    ("orig_ip_bytes", ColumnKind::Numeric),
    ("orig_pkts", ColumnKind::Numeric),
    ("service", ColumnKind::Categorical),
    ("resp_bytes", ColumnKind::Numeric),
    ("resp_ip_bytes", ColumnKind::Numeric),
    ("resp_pkts", ColumnKind::Numeric),
    ("tunnel_parents", ColumnKind::Numeric),
    // Aggregated packet-level features.
    ("ARP", ColumnKind::Numeric),
    ("AVG", ColumnKind::Numeric),
    ("DHCP", ColumnKind::Numeric),
    ("DNS", ColumnKind::Numeric),
    ("HTTP", ColumnKind::Numeric),
    ("HTTPS", ColumnKind::Numeric),
    ("Header_Length", ColumnKind::Numeric),
    ("IAT", ColumnKind::Numeric),
    ("ICMP", ColumnKind::Numeric),
    ("IGMP", ColumnKind::Numeric),
    ("IPv", ColumnKind::Categorical),
    ("IRC", ColumnKind::Numeric),
    ("LLC", ColumnKind::Numeric),
    ("Max", ColumnKind::Numeric),
    ("Min", ColumnKind::Numeric),
    ("Number", ColumnKind::Numeric),
    ("Protocol Type", ColumnKind::Categorical),
    ("Rate", ColumnKind::Numeric),
    ("SMTP", ColumnKind::Numeric),
    ("SSH", ColumnKind::Numeric),
    ("Std", ColumnKind::Numeric),
    ("TCP", ColumnKind::Numeric),
    ("Telnet", ColumnKind::Numeric),
    ("Time_To_Live", ColumnKind::Numeric),
    ("Tot size", ColumnKind::Numeric),
    ("Tot sum", ColumnKind::Numeric),
    ("UDP", ColumnKind::Numeric),
    ("Variance", ColumnKind::Numeric),
    ("ack_count", ColumnKind::Numeric),
    ("ack_flag_number", ColumnKind::Numeric),
    ("cwr_flag_number", ColumnKind::Numeric),
    ("dst_port", ColumnKind::Categorical),
    ("src_port", ColumnKind::Categorical),
    ("fin_count", ColumnKind::Numeric),
    ("duration_time_interval", ColumnKind::Numeric),
    ("ece_flag_number", ColumnKind::Numeric),
    ("fin_flag_number", ColumnKind::Numeric),
    ("psh_flag_number", ColumnKind::Numeric),
    ("rst_count", ColumnKind::Numeric),
    ("rst_flag_number", ColumnKind::Numeric),
    ("syn_count", ColumnKind::Numeric),
    ("syn_flag_number", ColumnKind::Numeric),
    // Derived flow features.
    ("byte_ratio", ColumnKind::Numeric),
    ("direction", ColumnKind::Numeric),
    ("orig_byte_rate", ColumnKind::Numeric),
    ("orig_pkt_rate", ColumnKind::Numeric),
];

pub const LABEL_COLUMN: &str = "label";

/// Index ranges of the three feature groups within [`FUSED_COLUMNS`].
pub const FLOW_RANGE: std::ops::Range<usize> = 0..14;
pub const PACKET_RANGE: std::ops::Range<usize> = 14..56;
pub const DERIVED_RANGE: std::ops::Range<usize> = 56..60;

pub fn fused_column_names() -> Vec<String> {
    FUSED_COLUMNS.iter().map(|(n, _)| (*n).to_string()).collect()
}

pub fn column_kind(name: &str) -> Option<ColumnKind> {
    FUSED_COLUMNS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, k)| *k)
}

/// Which of the 60 fused columns feed the model, per configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FeatureSet {
    Flow,
    Packet,
    FlowDerived,
    PacketDerived,
    FlowPacket,
    FlowPacketDerived,
}

impl FeatureSet {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Self::Flow),
            "packet" => Ok(Self::Packet),
            "flow+derived" => Ok(Self::FlowDerived),
            "packet+derived" => Ok(Self::PacketDerived),
            "flow+packet" => Ok(Self::FlowPacket),
            "flow+packet+derived" => Ok(Self::FlowPacketDerived),
            other => Err(Error::InvalidSpec(format!(
                "unknown feature set {other:?} (expected flow, packet, flow+derived, \
                 packet+derived, flow+packet, flow+packet+derived)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Flow => "flow",
            Self::Packet => "packet",
            Self::FlowDerived => "flow+derived",
            Self::PacketDerived => "packet+derived",
            Self::FlowPacket => "flow+packet",
            Self::FlowPacketDerived => "flow+packet+derived",
        }
    }

    /// Selected column names in canonical order.
    pub fn columns(&self) -> Vec<&'static str> {
        let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
        match self {
            Self::Flow => ranges.push(FLOW_RANGE),
            Self::Packet => ranges.push(PACKET_RANGE),
            Self::FlowDerived => {
                ranges.push(FLOW_RANGE);
                ranges.push(DERIVED_RANGE);
            }
            Self::PacketDerived => {
                ranges.push(PACKET_RANGE);
                ranges.push(DERIVED_RANGE);
            }
            Self::FlowPacket => {
                ranges.push(FLOW_RANGE);
                ranges.push(PACKET_RANGE);
            }
            Self::FlowPacketDerived => {
                ranges.push(FLOW_RANGE);
                ranges.push(PACKET_RANGE);
                ranges.push(DERIVED_RANGE);
            }
        }
        ranges
            .into_iter()
            .flat_map(|r| FUSED_COLUMNS[r].iter().map(|(n, _)| *n))
            .collect()
    }
}

/// A column-schema'd table of feature rows with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub columns: Vec<(String, ColumnKind)>,
    pub rows: Vec<Vec<Value>>,
    pub labels: Option<Vec<String>>,
}

impl FeatureTable {
    pub fn new(columns: Vec<(String, ColumnKind)>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
            labels: None,
        }
    }

    /// A table over the full 60-column fused schema.
    pub fn fused() -> Self {
        Self::new(
            FUSED_COLUMNS
                .iter()
                .map(|(n, k)| ((*n).to_string(), *k))
                .collect(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    pub fn push_row(&mut self, row: Vec<Value>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::SchemaMismatch(format!(
                "row has {} values, schema has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Project onto a subset of columns, preserving labels.
    pub fn select(&self, names: &[&str]) -> Result<FeatureTable> {
        let mut idx = Vec::with_capacity(names.len());
        for name in names {
            let i = self
                .column_index(name)
                .ok_or_else(|| Error::SchemaMismatch(format!("missing column {name:?}")))?;
            idx.push(i);
        }
        let columns = idx.iter().map(|&i| self.columns[i].clone()).collect();
        let rows = self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
            .collect();
        Ok(FeatureTable {
            columns,
            rows,
            labels: self.labels.clone(),
        })
    }

    /// Row indices for each distinct label, in first-appearance order.
    pub fn rows_by_label(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::SchemaMismatch("table has no label column".into()))?;
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, lab) in labels.iter().enumerate() {
            match groups.iter_mut().find(|(name, _)| name == lab) {
                Some((_, v)) => v.push(i),
                None => groups.push((lab.clone(), vec![i])),
            }
        }
        Ok(groups)
    }

    /// Write the table as an RFC-4180-style CSV with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.columns.iter().map(|(n, _)| n.clone()).collect();
        if self.labels.is_some() {
            header.push(LABEL_COLUMN.to_string());
        }
        wtr.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(Value::render).collect();
            if let Some(labels) = &self.labels {
                rec.push(labels[i].clone());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read a CSV whose header names must all be fused-schema columns (plus an
    /// optional trailing `label`). Column kinds come from the canonical schema.
    pub fn read_csv(path: &Path) -> Result<FeatureTable> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = rdr.headers()?.clone();
        let mut columns = Vec::new();
        let mut label_idx = None;
        for (i, name) in headers.iter().enumerate() {
            if name == LABEL_COLUMN {
                label_idx = Some(i);
                continue;
            }
            let kind = column_kind(name).ok_or_else(|| {
                Error::SchemaMismatch(format!("unknown column {name:?} in {}", path.display()))
            })?;
            columns.push((i, name.to_string(), kind));
        }
        let mut table = FeatureTable::new(
            columns
                .iter()
                .map(|(_, n, k)| (n.clone(), *k))
                .collect(),
        );
        let mut labels: Vec<String> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let mut row = Vec::with_capacity(columns.len());
            for (i, name, kind) in &columns {
                let raw = record.get(*i).ok_or_else(|| {
                    Error::SchemaMismatch(format!("short record in {}", path.display()))
                })?;
                row.push(parse_cell(raw, *kind, name)?);
            }
            table.rows.push(row);
            if let Some(li) = label_idx {
                let raw = record.get(li).ok_or_else(|| {
                    Error::SchemaMismatch(format!("short record in {}", path.display()))
                })?;
                labels.push(raw.to_string());
            }
        }
        if label_idx.is_some() {
            table.labels = Some(labels);
        }
        Ok(table)
    }
}

fn parse_cell(raw: &str, kind: ColumnKind, name: &str) -> Result<Value> {
    match kind {
        ColumnKind::Numeric => {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::SchemaMismatch(format!("column {name:?}: bad number {raw:?}")))?;
            Ok(Value::Num(v))
        }
        ColumnKind::Categorical => Ok(Value::Cat(raw.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_schema_has_exactly_sixty_columns() {
        assert_eq!(FUSED_COLUMNS.len(), 60);
        assert_eq!(FLOW_RANGE.len(), 14);
        assert_eq!(PACKET_RANGE.len(), 42);
        assert_eq!(DERIVED_RANGE.len(), 4);
    }

    #[test]
    fn feature_set_column_counts() {
        assert_eq!(FeatureSet::Flow.columns().len(), 14);
        assert_eq!(FeatureSet::Packet.columns().len(), 42);
        assert_eq!(FeatureSet::FlowDerived.columns().len(), 18);
        assert_eq!(FeatureSet::PacketDerived.columns().len(), 46);
        assert_eq!(FeatureSet::FlowPacket.columns().len(), 56);
        assert_eq!(FeatureSet::FlowPacketDerived.columns().len(), 60);
    }

    #[test]
    fn feature_set_round_trips_names() {
        for fs in [
            FeatureSet::Flow,
            FeatureSet::Packet,
            FeatureSet::FlowDerived,
            FeatureSet::PacketDerived,
            FeatureSet::FlowPacket,
            FeatureSet::FlowPacketDerived,
        ] {
            assert_eq!(FeatureSet::parse(fs.as_str()).unwrap(), fs);
        }
        assert!(FeatureSet::parse("bogus").is_err());
    }

    #[test]
    fn format_num_is_shortest_round_trip() {
        assert_eq!(format_num(7.0), "7");
        assert_eq!(format_num(0.1 + 0.2), "0.30000000000000004");
        assert_eq!(format_num(-100.0), "-100");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = FeatureTable::fused();
        let row: Vec<Value> = FUSED_COLUMNS
            .iter()
            .map(|(_, k)| match k {
                ColumnKind::Numeric => Value::Num(1.5),
                ColumnKind::Categorical => Value::Cat("x".to_string()),
            })
            .collect();
        t.push_row(row).unwrap();
        t.labels = Some(vec!["Benign".to_string()]);
        t.write_csv(&path).unwrap();
        let back = FeatureTable::read_csv(&path).unwrap();
        assert_eq!(back, t);
    }
}
