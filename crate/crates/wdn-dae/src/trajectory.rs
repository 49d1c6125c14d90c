//! Time-indexed state tables and their CSV form `time,<state names...>`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub columns: Vec<String>,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn new(columns: Vec<String>) -> TrajectoryTable {
        TrajectoryTable {
            columns,
            times: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, time: f64, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.times.push(time);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
        let mut header = vec!["time".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(io)?;
        for (t, row) in self.times.iter().zip(&self.rows) {
            let mut rec = vec![format!("{t:?}")];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::InvalidArgument(format!("csv write failed: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads a table whose first column is `time` and whose times strictly increase.
    pub fn read_csv<R: Read>(input: R) -> Result<TrajectoryTable> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r
            .headers()
            .map_err(|e| Error::MalformedLine {
                line: 1,
                message: format!("bad csv header: {e}"),
            })?
            .clone();
        if header.get(0).map(str::trim) != Some("time") {
            return Err(Error::MalformedLine {
                line: 1,
                message: "first column must be `time`".into(),
            });
        }
        let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut table = TrajectoryTable::new(columns);
        for (k, rec) in r.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::MalformedLine {
                line,
                message: e.to_string(),
            })?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::MalformedLine {
                    line,
                    message: format!("bad number: {e}"),
                })?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedLine {
                    line,
                    message: "non-finite value".into(),
                });
            }
            if let Some(&last) = table.times.last() {
                if vals[0] <= last {
                    return Err(Error::MalformedLine {
                        line,
                        message: "times must strictly increase".into(),
                    });
                }
            }
            table.push(vals[0], vals[1..].to_vec());
        }
        Ok(table)
    }

    pub fn parse_csv(text: &str) -> Result<TrajectoryTable> {
        TrajectoryTable::read_csv(text.as_bytes())
    }

    /// Row at time `t` by linear interpolation; `None` outside the sampled span.
    pub fn interpolate(&self, t: f64) -> Option<Vec<f64>> {
        let (first, last) = (*self.times.first()?, *self.times.last()?);
        if t < first || t > last {
            return None;
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k == self.times.len() {
            return Some(self.rows[k - 1].clone());
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        Some(
            self.rows[k - 1]
                .iter()
                .zip(&self.rows[k])
                .map(|(a, b)| a + w * (b - a))
                .collect(),
        )
    }
}
