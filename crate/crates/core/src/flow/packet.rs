use std::fmt;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::net::IpAddr;
use std::path::Path;
use std::str::FromStr;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// TCP flag bits as they appear in trace files.
pub mod tcp {
    pub const FIN: u8 = 1;
    pub const SYN: u8 = 2;
    pub const RST: u8 = 4;
    pub const PSH: u8 = 8;
    pub const ACK: u8 = 16;
    pub const ECE: u8 = 64;

    /// Flags with per-flow counters, in counter order.
    pub const COUNTED: [u8; 6] = [FIN, SYN, ACK, PSH, RST, ECE];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src: IpAddr,
    pub dst: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FlowKey {
    /// FNV-1a over the canonical field order; stable across runs and
    /// platforms, unlike the std hasher.
    pub fn stable_hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        for ip in [self.src, self.dst] {
            match ip {
                IpAddr::V4(a) => h.write(&a.octets()),
                IpAddr::V6(a) => h.write(&a.octets()),
            }
        }
        h.write(&self.src_port.to_be_bytes());
        h.write(&self.dst_port.to_be_bytes());
        h.write_u8(self.proto);
        h.finish()
    }

    fn fields(&self) -> [String; 5] {
        [
            self.src.to_string(),
            self.dst.to_string(),
            self.src_port.to_string(),
            self.dst_port.to_string(),
            self.proto.to_string(),
        ]
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}->{}:{}/{}", self.src, self.src_port, self.dst, self.dst_port, self.proto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ts_us: u64,
    pub key: FlowKey,
    pub len: u32,
    pub flags: u8,
}

impl PacketRecord {
    pub fn has(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }
}

const TRACE_HEADER: [&str; 8] = ["ts_us", "src_ip", "dst_ip", "src_port", "dst_port", "proto", "pkt_len", "tcp_flags"];
const KEY_HEADER: [&str; 5] = ["src_ip", "dst_ip", "src_port", "dst_port", "proto"];

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse { line, msg: format!("missing column {name}") })?;
    raw.trim().parse().map_err(|_| Error::Parse { line, msg: format!("bad {name} {raw:?}") })
}

fn key_at(rec: &csv::StringRecord, off: usize, line: usize) -> Result<FlowKey> {
    Ok(FlowKey {
        src: field(rec, off, "src_ip", line)?,
        dst: field(rec, off + 1, "dst_ip", line)?,
        src_port: field(rec, off + 2, "src_port", line)?,
        dst_port: field(rec, off + 3, "dst_port", line)?,
        proto: field(rec, off + 4, "proto", line)?,
    })
}

fn check_header(rd: &mut csv::Reader<impl Read>, want: &[&str]) -> Result<()> {
    let h = rd.headers()?;
    if h.iter().map(str::trim).ne(want.iter().copied()) {
        return Err(Error::Parse { line: 1, msg: format!("expected header {}", want.join(",")) });
    }
    Ok(())
}

fn rows<R: Read>(r: R, header: &[&str]) -> Result<impl Iterator<Item = Result<(usize, csv::StringRecord)>>> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    check_header(&mut rd, header)?;
    Ok(rd.into_records().map(|rec| {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        Ok((line, rec))
    }))
}

/// Packet trace CSV. Timestamps must not decrease.
pub fn read_trace<R: Read>(r: R) -> Result<Vec<PacketRecord>> {
    let mut out: Vec<PacketRecord> = Vec::new();
    for row in rows(r, &TRACE_HEADER)? {
        let (line, rec) = row?;
        if rec.len() != TRACE_HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, got {}", TRACE_HEADER.len(), rec.len()),
            });
        }
        let p = PacketRecord {
            ts_us: field(&rec, 0, "ts_us", line)?,
            key: key_at(&rec, 1, line)?,
            len: field(&rec, 6, "pkt_len", line)?,
            flags: field(&rec, 7, "tcp_flags", line)?,
        };
        if out.last().is_some_and(|prev| p.ts_us < prev.ts_us) {
            return Err(Error::Parse { line, msg: "timestamp goes backwards".into() });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(w: W, packets: &[PacketRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TRACE_HEADER)?;
    for p in packets {
        let k = p.key.fields();
        wr.write_record([
            p.ts_us.to_string().as_str(),
            &k[0],
            &k[1],
            &k[2],
            &k[3],
            &k[4],
            &p.len.to_string(),
            &p.flags.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Flow labels: 5-tuple plus class id.
pub fn read_labels<R: Read>(r: R) -> Result<Vec<(FlowKey, usize)>> {
    let header: Vec<&str> = KEY_HEADER.iter().copied().chain(["class"]).collect();
    rows(r, &header)?
        .map(|row| {
            let (line, rec) = row?;
            Ok((key_at(&rec, 0, line)?, field(&rec, 5, "class", line)?))
        })
        .collect()
}

pub fn write_labels<W: Write>(w: W, labels: &[(FlowKey, usize)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(KEY_HEADER.iter().chain(&["class"]))?;
    for (k, c) in labels {
        let f = k.fields();
        wr.write_record(f.iter().map(String::as_str).chain([c.to_string().as_str()]))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<PacketRecord>> {
    read_trace(std::fs::File::open(path)?)
}

pub fn save_trace(path: impl AsRef<Path>, packets: &[PacketRecord]) -> Result<()> {
    write_trace(std::io::BufWriter::new(std::fs::File::create(path)?), packets)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(FlowKey, usize)>> {
    read_labels(std::fs::File::open(path)?)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[(FlowKey, usize)]) -> Result<()> {
    write_labels(std::io::BufWriter::new(std::fs::File::create(path)?), labels)
}
