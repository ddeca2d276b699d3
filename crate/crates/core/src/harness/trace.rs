//! Per-round trace rows and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use crate::control::Flag;
use crate::error::{Error, Result};

pub const TRACE_COLUMNS: [&str; 12] = [
    "round", "t", "tau", "loss", "accuracy", "rho", "beta", "delta", "c_hat", "b_hat", "consumed", "flags",
];

/// One aggregation round (or baseline step). Vector cells hold one value per
/// resource type.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub round: u64,
    pub t: u64,
    pub tau: u32,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub rho: Option<f64>,
    pub beta: Option<f64>,
    pub delta: Option<f64>,
    pub c_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub consumed: Vec<f64>,
    pub flags: Vec<Flag>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl TraceRecord {
    fn cells(&self) -> [String; 12] {
        [
            self.round.to_string(),
            self.t.to_string(),
            self.tau.to_string(),
            opt(self.loss),
            opt(self.accuracy),
            opt(self.rho),
            opt(self.beta),
            opt(self.delta),
            join(&self.c_hat),
            join(&self.b_hat),
            join(&self.consumed),
            join(&self.flags.iter().map(|f| f.as_str()).collect::<Vec<_>>()),
        ]
    }
}

pub fn write_trace<W: Write>(out: W, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Trace {
        line: 0,
        msg: e.to_string(),
    };
    w.write_record(TRACE_COLUMNS).map_err(err)?;
    for r in records {
        w.write_record(r.cells()).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Trace {
        line: 0,
        msg: e.to_string(),
    })
}

pub fn write_trace_file(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(std::io::BufWriter::new(file), records)
}

pub fn trace_to_string(records: &[TraceRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(&mut buf, records)?;
    String::from_utf8(buf).map_err(|e| Error::Trace {
        line: 0,
        msg: e.to_string(),
    })
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rd.headers().map_err(|e| Error::Trace {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(TRACE_COLUMNS) {
        return Err(Error::Trace {
            line: 1,
            msg: format!("expected header {}", TRACE_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Trace {
            line,
            msg: e.to_string(),
        })?;
        let bad = |col: &str, v: &str| Error::Trace {
            line,
            msg: format!("bad {col} value `{v}`"),
        };
        let cell = |k: usize| rec.get(k).unwrap_or("");
        let int = |k: usize| cell(k).parse::<u64>().map_err(|_| bad(TRACE_COLUMNS[k], cell(k)));
        let float = |k: usize| -> Result<Option<f64>> {
            match cell(k) {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(TRACE_COLUMNS[k], v)),
            }
        };
        let vector = |k: usize| -> Result<Vec<f64>> {
            match cell(k) {
                "" => Ok(Vec::new()),
                v => v
                    .split(';')
                    .map(|x| x.parse().map_err(|_| bad(TRACE_COLUMNS[k], v)))
                    .collect(),
            }
        };
        let flags = match cell(11) {
            "" => Vec::new(),
            v => v
                .split(';')
                .map(|x| x.parse::<Flag>().map_err(|_| bad("flags", x)))
                .collect::<Result<_>>()?,
        };
        out.push(TraceRecord {
            round: int(0)?,
            t: int(1)?,
            tau: u32::try_from(int(2)?).map_err(|_| bad("tau", cell(2)))?,
            loss: float(3)?,
            accuracy: float(4)?,
            rho: float(5)?,
            beta: float(6)?,
            delta: float(7)?,
            c_hat: vector(8)?,
            b_hat: vector(9)?,
            consumed: vector(10)?,
            flags,
        });
    }
    Ok(out)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(file)
}
