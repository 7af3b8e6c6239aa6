//! On-disk formats.
//!
//! * Logs are JSON Lines, one self-describing record per tuple:
//!   `{"id":3,"features":[[...],[...]],"chosen":1,"reward":0.42,"propensity":0.3}`.
//!   `features` is the `k x d` candidate matrix in row-major order; the
//!   `propensity` key is absent on deterministic logs, and the log mode is
//!   inferred from it.
//! * Parameters, reward models, ground truth and logging policies are
//!   single JSON documents.
//! * Training traces are CSV with the fixed header [`TRACE_HEADER`].
//!
//! Floats are written as shortest round-trip decimals, so writing and
//! reading back reproduces every value bit for bit.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureVector, Instance, Log, LogMode, LoggedTuple};
use crate::error::{Error, Result};
use crate::optimizer::{EpochRecord, TrainTrace};

pub const TRACE_HEADER: &str =
    "epoch,train_objective,validation_objective,true_reward,mass_on_dmax,grad_norm,c_hat";

/// Serialized form of one [`LoggedTuple`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub id: u64,
    pub features: Vec<Vec<f64>>,
    pub chosen: usize,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<f64>,
}

impl From<&LoggedTuple> for LogRecord {
    fn from(t: &LoggedTuple) -> Self {
        Self {
            id: t.instance().id(),
            features: t
                .instance()
                .candidates()
                .iter()
                .map(|c| c.values().to_vec())
                .collect(),
            chosen: t.chosen(),
            reward: t.reward(),
            propensity: t.propensity(),
        }
    }
}

impl LogRecord {
    pub fn into_tuple(self) -> Result<LoggedTuple> {
        let candidates = self
            .features
            .into_iter()
            .map(FeatureVector::new)
            .collect::<Result<Vec<_>>>()?;
        let instance = Arc::new(Instance::new(self.id, candidates)?);
        LoggedTuple::new(instance, self.chosen, self.reward, self.propensity)
    }
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "{what} contains a non-finite number"
        )));
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_log<W: Write>(mut w: W, log: &Log) -> Result<()> {
    for t in log.tuples() {
        let record = LogRecord::from(t);
        let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err)?;
    }
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<Log> {
    let mut tuples = Vec::new();
    let mut with_propensity = 0usize;
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if record.propensity.is_some() {
            with_propensity += 1;
        }
        tuples.push(
            record
                .into_tuple()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?,
        );
    }
    let mode = if with_propensity == 0 {
        LogMode::Deterministic
    } else if with_propensity == tuples.len() {
        LogMode::Stochastic
    } else {
        return Err(Error::LogConsistency(format!(
            "{with_propensity} of {} records carry a propensity; a log must be all stochastic or all deterministic",
            tuples.len()
        )));
    };
    Log::new(tuples, mode)
}

pub fn log_to_string(log: &Log) -> Result<String> {
    let mut buf = Vec::new();
    write_log(&mut buf, log)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn log_from_str(s: &str) -> Result<Log> {
    read_log(s.as_bytes())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace<W: Write>(mut w: W, trace: &TrainTrace) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}").map_err(io_err)?;
    for r in &trace.records {
        check_finite(
            "trace",
            [r.train_objective, r.mass_on_dmax, r.grad_norm]
                .into_iter()
                .chain(r.validation_objective)
                .chain(r.true_reward)
                .chain(r.c_hat),
        )?;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.train_objective,
            opt(r.validation_objective),
            opt(r.true_reward),
            r.mass_on_dmax,
            r.grad_norm,
            opt(r.c_hat)
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Reads the records of a trace CSV. The stop reason is not part of the
/// CSV and comes back as `None`.
pub fn read_trace<R: BufRead>(r: R) -> Result<TrainTrace> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h == TRACE_HEADER => {}
        _ => return Err(Error::Format("trace CSV has an unexpected header".into())),
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))
    };
    let opt_num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!(
                "trace row has {} fields: {line}",
                f.len()
            )));
        }
        records.push(EpochRecord {
            epoch: f[0]
                .parse()
                .map_err(|e| Error::Format(format!("bad epoch `{}`: {e}", f[0])))?,
            train_objective: num(f[1])?,
            validation_objective: opt_num(f[2])?,
            true_reward: opt_num(f[3])?,
            mass_on_dmax: num(f[4])?,
            grad_norm: num(f[5])?,
            c_hat: opt_num(f[6])?,
        });
    }
    Ok(TrainTrace {
        records,
        stop_reason: None,
    })
}
