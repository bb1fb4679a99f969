//! Line-oriented event trace: `t=<s.us> node=<id|sys> ev=<kind> key=value ...`.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::engine::SimTime;
use crate::NodeId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceLine {
    pub t: SimTime,
    /// `None` for simulator-level lines.
    pub node: Option<NodeId>,
    pub ev: String,
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TraceLine {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        self.get(key)?.parse().ok()
    }

    pub fn parse(s: &str) -> Result<TraceLine, String> {
        let mut t = None;
        let mut node = None;
        let mut ev = None;
        let mut fields = Vec::new();
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| format!("token '{tok}' has no '='"))?;
            match k {
                "t" if t.is_none() => t = Some(SimTime::parse(v).ok_or_else(|| format!("bad time '{v}'"))?),
                "node" if node.is_none() => {
                    node = Some(if v == "sys" { None } else { Some(v.parse().map_err(|_| format!("bad node '{v}'"))?) })
                }
                "ev" if ev.is_none() => ev = Some(v.to_string()),
                _ => fields.push((k.to_string(), v.to_string())),
            }
        }
        Ok(TraceLine {
            t: t.ok_or("missing t")?,
            node: node.ok_or("missing node")?,
            ev: ev.ok_or("missing ev")?,
            fields,
        })
    }
}

/// Formats one line without a trailing newline; `detail` is appended verbatim.
pub fn format_line(t: SimTime, node: Option<NodeId>, ev: &str, detail: &str) -> String {
    let mut s = String::with_capacity(48 + detail.len());
    let _ = write!(s, "t={t} node=");
    match node {
        Some(n) => {
            let _ = write!(s, "{n}");
        }
        None => s.push_str("sys"),
    }
    let _ = write!(s, " ev={ev}");
    if !detail.is_empty() {
        s.push(' ');
        s.push_str(detail);
    }
    s
}

impl std::fmt::Display for TraceLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let detail: Vec<String> = self.fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&format_line(self.t, self.node, &self.ev, &detail.join(" ")))
    }
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceLine>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(TraceLine::parse(&line).map_err(|msg| TraceError::Malformed { line: i + 1, msg })?);
    }
    Ok(out)
}

/// Destination for trace lines.
pub enum TraceSink {
    Off,
    Memory(Vec<String>),
    Writer(Box<dyn Write + Send>),
}

impl TraceSink {
    pub fn enabled(&self) -> bool {
        !matches!(self, TraceSink::Off)
    }

    pub fn emit(&mut self, line: String) -> io::Result<()> {
        match self {
            TraceSink::Off => Ok(()),
            TraceSink::Memory(v) => {
                v.push(line);
                Ok(())
            }
            TraceSink::Writer(w) => writeln!(w, "{line}"),
        }
    }

    pub fn flush(&mut self) -> io::Result<()> {
        match self {
            TraceSink::Writer(w) => w.flush(),
            _ => Ok(()),
        }
    }

    pub fn lines(&self) -> &[String] {
        match self {
            TraceSink::Memory(v) => v,
            _ => &[],
        }
    }
}

impl std::fmt::Debug for TraceSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TraceSink::Off => f.write_str("Off"),
            TraceSink::Memory(v) => write!(f, "Memory({} lines)", v.len()),
            TraceSink::Writer(_) => f.write_str("Writer"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = format_line(SimTime::from_micros(1_500_042), Some(3), "tx", "kind=UPD bytes=28");
        assert_eq!(s, "t=1.500042 node=3 ev=tx kind=UPD bytes=28");
        let l = TraceLine::parse(&s).unwrap();
        assert_eq!(l.node, Some(3));
        assert_eq!(l.get("kind"), Some("UPD"));
        assert_eq!(l.parse_field::<u32>("bytes"), Some(28));
        assert_eq!(l.to_string(), s);
        let sys = TraceLine::parse("t=0.000000 node=sys ev=scenario protocol=tora").unwrap();
        assert_eq!(sys.node, None);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(TraceLine::parse("t=1.0 node=3").is_err());
        assert!(TraceLine::parse("t=x node=3 ev=a").is_err());
        assert!(TraceLine::parse("garbage").is_err());
    }
}
