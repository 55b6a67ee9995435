//! Row tables rendered as CSV or as a JSON envelope.

use std::io::{self, Write};

use serde_json::{Map, Number, Value};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Bool(bool),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

impl Cell {
    /// Non-finite floats become `null`.
    fn json(&self) -> Value {
        match self {
            Cell::Float(v) => Number::from_f64(*v).map_or(Value::Null, Value::Number),
            Cell::Int(v) => Value::from(*v),
            Cell::Bool(v) => Value::Bool(*v),
            Cell::Text(v) => Value::String(v.clone()),
        }
    }

    /// Shortest round-trip text, matching the JSON rendering; non-finite
    /// floats become empty fields.
    fn csv(&self) -> String {
        match self {
            Cell::Float(v) if v.is_finite() => ryu::Buffer::new().format_finite(*v).to_owned(),
            Cell::Float(_) => String::new(),
            Cell::Int(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(v) => v.clone(),
        }
    }
}

/// Command output: named columns and one or more rows.
///
/// A `scalar` table has exactly one row and is rendered in JSON as a flat
/// object instead of a list.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    pub scalar: bool,
}

impl Table {
    pub fn rows(columns: Vec<&'static str>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
            scalar: false,
        }
    }

    pub fn scalar(columns: Vec<&'static str>, row: Vec<Cell>) -> Self {
        debug_assert_eq!(columns.len(), row.len());
        Self {
            columns,
            rows: vec![row],
            scalar: true,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(self.columns.len(), row.len());
        self.rows.push(row);
    }

    fn json_row(&self, row: &[Cell]) -> Value {
        let map: Map<String, Value> = self
            .columns
            .iter()
            .zip(row)
            .map(|(k, v)| ((*k).to_owned(), v.json()))
            .collect();
        Value::Object(map)
    }

    fn json(&self) -> Value {
        if self.scalar {
            self.json_row(&self.rows[0])
        } else {
            let rows = self.rows.iter().map(|r| self.json_row(r)).collect();
            let mut map = Map::new();
            map.insert("rows".into(), Value::Array(rows));
            Value::Object(map)
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        w.flush()
    }
}

/// The JSON document written by every subcommand.
pub struct Envelope<'a> {
    pub command: &'a str,
    pub params: Map<String, Value>,
    pub payload: &'a Table,
    pub diagnostics: Map<String, Value>,
}

impl Envelope<'_> {
    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("schema_version".into(), SCHEMA_VERSION.into());
        map.insert("command".into(), self.command.into());
        map.insert("params".into(), Value::Object(self.params.clone()));
        map.insert("payload".into(), self.payload.json());
        map.insert("diagnostics".into(), Value::Object(self.diagnostics.clone()));
        Value::Object(map)
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> io::Result<()> {
        serde_json::to_writer_pretty(&mut out, &self.to_value())?;
        writeln!(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_agree() {
        let mut t = Table::rows(vec!["x", "n", "ok", "name"]);
        t.push(vec![0.1.into(), 3usize.into(), true.into(), "a,b".into()]);
        t.push(vec![1e-300.into(), 0usize.into(), false.into(), "c".into()]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "x,n,ok,name\n0.1,3,true,\"a,b\"\n1e-300,0,false,c\n");
        let json = serde_json::to_string(&t.json()).unwrap();
        assert!(json.contains("\"x\":0.1") && json.contains("\"x\":1e-300"));
    }

    #[test]
    fn non_finite_values() {
        let t = Table::scalar(vec!["v"], vec![f64::NAN.into()]);
        assert_eq!(t.json(), serde_json::json!({ "v": null }));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(buf, b"v\n\"\"\n");
    }
}
