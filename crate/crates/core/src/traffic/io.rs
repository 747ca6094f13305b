//! Trace file formats.
//!
//! CSV rows are `ts_us,src_ip,dst_ip,src_port,dst_port,proto,length,direction`
//! optionally followed by `label` and, for condensed traces, `weight` (the
//! label column may then be empty). Addresses are dotted quads, direction is
//! `1` or `-1`. A header row starting with `ts_us` is accepted and skipped.
//!
//! The binary format is the magic `ILTR`, a little-endian `u32` version and
//! fixed 32-byte little-endian records.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::Ipv4Addr;

use crate::model::{Direction, FiveTuple, Label, PacketRecord};
use crate::traffic::TrafficError;

pub const CSV_HEADER: &str = "ts_us,src_ip,dst_ip,src_port,dst_port,proto,length,direction,label,weight";
pub const BINARY_MAGIC: &[u8; 4] = b"ILTR";
pub const BINARY_VERSION: u32 = 1;
const RECORD_LEN: usize = 32;
const NO_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Binary,
}

impl TraceFormat {
    /// `.bin` selects the binary format, anything else CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => TraceFormat::Binary,
            _ => TraceFormat::Csv,
        }
    }
}

pub fn format_csv_row(p: &PacketRecord) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{},{}",
        p.ts,
        Ipv4Addr::from(p.flow.src_ip),
        Ipv4Addr::from(p.flow.dst_ip),
        p.flow.src_port,
        p.flow.dst_port,
        p.flow.proto,
        p.length,
        p.direction.sign()
    );
    if p.label.is_some() || p.weight != 1 {
        row.push(',');
        if let Some(l) = p.label {
            row.push_str(&l.0.to_string());
        }
    }
    if p.weight != 1 {
        row.push(',');
        row.push_str(&p.weight.to_string());
    }
    row
}

pub fn parse_csv_row(line: &str, line_no: usize) -> Result<PacketRecord, TrafficError> {
    let bad = |m: String| TrafficError::Parse {
        line: line_no,
        message: m,
    };
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if !(8..=10).contains(&cols.len()) {
        return Err(bad(format!("expected 8 to 10 columns, found {}", cols.len())));
    }
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
        s.parse().map_err(|_| format!("invalid {what} {s:?}"))
    }
    fn ip(s: &str) -> Result<u32, String> {
        s.parse::<Ipv4Addr>()
            .map(u32::from)
            .map_err(|_| format!("invalid address {s:?}"))
    }
    let ts = num(cols[0], "timestamp").map_err(bad)?;
    let flow = FiveTuple::new(
        ip(cols[1]).map_err(bad)?,
        ip(cols[2]).map_err(bad)?,
        num(cols[3], "source port").map_err(bad)?,
        num(cols[4], "destination port").map_err(bad)?,
        num(cols[5], "protocol").map_err(bad)?,
    );
    let length: u16 = num(cols[6], "length").map_err(bad)?;
    if length == 0 {
        return Err(bad("length must be at least 1".into()));
    }
    let direction = Direction::from_sign(num(cols[7], "direction").map_err(bad)?)
        .ok_or_else(|| bad("direction must be 1 or -1".into()))?;
    let label = match cols.get(8) {
        Some(s) if !s.is_empty() => Some(Label(num(s, "label").map_err(bad)?)),
        _ => None,
    };
    let weight = match cols.get(9) {
        Some(s) => num(s, "weight").map_err(bad)?,
        None => 1,
    };
    if weight == 0 {
        return Err(bad("weight must be at least 1".into()));
    }
    Ok(PacketRecord {
        flow,
        ts,
        length,
        direction,
        label,
        weight,
    })
}

/// Streams a trace out in the chosen format.
pub struct TraceWriter<W: Write> {
    out: BufWriter<W>,
    format: TraceFormat,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(w: W, format: TraceFormat) -> Result<Self, TrafficError> {
        let mut out = BufWriter::new(w);
        match format {
            TraceFormat::Csv => writeln!(out, "{CSV_HEADER}")?,
            TraceFormat::Binary => {
                out.write_all(BINARY_MAGIC)?;
                out.write_all(&BINARY_VERSION.to_le_bytes())?;
            }
        }
        Ok(Self { out, format })
    }

    pub fn write(&mut self, p: &PacketRecord) -> Result<(), TrafficError> {
        match self.format {
            TraceFormat::Csv => writeln!(self.out, "{}", format_csv_row(p))?,
            TraceFormat::Binary => self.out.write_all(&encode_binary(p))?,
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, TrafficError> {
        self.out.flush()?;
        self.out
            .into_inner()
            .map_err(|e| TrafficError::Io(e.into_error()))
    }
}

fn encode_binary(p: &PacketRecord) -> [u8; RECORD_LEN] {
    let mut b = [0u8; RECORD_LEN];
    b[0..8].copy_from_slice(&p.ts.to_le_bytes());
    b[8..12].copy_from_slice(&p.flow.src_ip.to_le_bytes());
    b[12..16].copy_from_slice(&p.flow.dst_ip.to_le_bytes());
    b[16..18].copy_from_slice(&p.flow.src_port.to_le_bytes());
    b[18..20].copy_from_slice(&p.flow.dst_port.to_le_bytes());
    b[20] = p.flow.proto;
    b[21] = p.direction.sign() as i8 as u8;
    b[22..24].copy_from_slice(&p.length.to_le_bytes());
    b[24..28].copy_from_slice(&p.label.map_or(NO_LABEL, |l| l.0).to_le_bytes());
    b[28..32].copy_from_slice(&p.weight.to_le_bytes());
    b
}

fn decode_binary(b: &[u8; RECORD_LEN], index: usize) -> Result<PacketRecord, TrafficError> {
    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    let bad = |m: &str| TrafficError::Parse {
        line: index + 1,
        message: m.to_owned(),
    };
    let direction = Direction::from_sign(i32::from(b[21] as i8)).ok_or_else(|| bad("bad direction"))?;
    let length = u16_at(22);
    let weight = u32_at(28);
    if length == 0 || weight == 0 {
        return Err(bad("length and weight must be positive"));
    }
    let label = match u32_at(24) {
        NO_LABEL => None,
        l => Some(Label(l)),
    };
    Ok(PacketRecord {
        flow: FiveTuple::new(u32_at(8), u32_at(12), u16_at(16), u16_at(18), b[20]),
        ts: u64::from_le_bytes(b[0..8].try_into().expect("8 bytes")),
        length,
        direction,
        label,
        weight,
    })
}

/// Streams records from a CSV or binary trace.
pub struct TraceReader<R: Read> {
    inner: ReaderKind<R>,
    index: usize,
    done: bool,
}

enum ReaderKind<R: Read> {
    Csv(BufReader<R>, String),
    Binary(BufReader<R>),
}

impl<R: Read> TraceReader<R> {
    pub fn new(r: R, format: TraceFormat) -> Result<Self, TrafficError> {
        let mut reader = BufReader::new(r);
        let inner = match format {
            TraceFormat::Csv => ReaderKind::Csv(reader, String::new()),
            TraceFormat::Binary => {
                let mut head = [0u8; 8];
                reader.read_exact(&mut head)?;
                if &head[0..4] != BINARY_MAGIC {
                    return Err(TrafficError::Parse {
                        line: 0,
                        message: "not a binary trace".into(),
                    });
                }
                let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
                if version != BINARY_VERSION {
                    return Err(TrafficError::Parse {
                        line: 0,
                        message: format!("unsupported binary trace version {version}"),
                    });
                }
                ReaderKind::Binary(reader)
            }
        };
        Ok(Self {
            inner,
            index: 0,
            done: false,
        })
    }

    fn next_record(&mut self) -> Result<Option<PacketRecord>, TrafficError> {
        match &mut self.inner {
            ReaderKind::Csv(r, line) => loop {
                line.clear();
                if r.read_line(line)? == 0 {
                    return Ok(None);
                }
                self.index += 1;
                let text = line.trim();
                if text.is_empty() || text.starts_with('#') || text.starts_with("ts_us") {
                    continue;
                }
                return parse_csv_row(text, self.index).map(Some);
            },
            ReaderKind::Binary(r) => {
                let mut buf = [0u8; RECORD_LEN];
                let mut filled = 0;
                while filled < RECORD_LEN {
                    let n = r.read(&mut buf[filled..])?;
                    if n == 0 {
                        break;
                    }
                    filled += n;
                }
                match filled {
                    0 => Ok(None),
                    RECORD_LEN => {
                        let rec = decode_binary(&buf, self.index)?;
                        self.index += 1;
                        Ok(Some(rec))
                    }
                    _ => Err(TrafficError::Parse {
                        line: self.index + 1,
                        message: "truncated record".into(),
                    }),
                }
            }
        }
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<PacketRecord, TrafficError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads a whole trace and checks that timestamps never decrease.
pub fn read_trace<R: Read>(r: R, format: TraceFormat) -> Result<Vec<PacketRecord>, TrafficError> {
    let mut out: Vec<PacketRecord> = Vec::new();
    for (i, rec) in TraceReader::new(r, format)?.enumerate() {
        let rec = rec?;
        if let Some(prev) = out.last() {
            if rec.ts < prev.ts {
                return Err(TrafficError::Unsorted { index: i });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<PacketRecord> {
        let t = FiveTuple::new(0x0A00_0001, 0x0A00_0002, 5000, 80, 6);
        let mut v = vec![
            PacketRecord::new(t, 0, 60, Direction::Forward),
            PacketRecord::new(t.reverse(), 120, 1448, Direction::Backward),
        ];
        v[1].label = Some(Label(17));
        let mut tail = PacketRecord::new(t, 9_000, 700, Direction::Forward);
        tail.weight = 250;
        v.push(tail);
        v
    }

    #[test]
    fn csv_row_layout() {
        let v = sample();
        assert_eq!(format_csv_row(&v[0]), "0,10.0.0.1,10.0.0.2,5000,80,6,60,1");
        assert_eq!(format_csv_row(&v[1]), "120,10.0.0.2,10.0.0.1,80,5000,6,1448,-1,17");
        assert_eq!(format_csv_row(&v[2]), "9000,10.0.0.1,10.0.0.2,5000,80,6,700,1,,250");
    }

    #[test]
    fn both_formats_round_trip() {
        for format in [TraceFormat::Csv, TraceFormat::Binary] {
            let mut w = TraceWriter::new(Vec::new(), format).unwrap();
            for p in sample() {
                w.write(&p).unwrap();
            }
            let bytes = w.finish().unwrap();
            assert_eq!(read_trace(&bytes[..], format).unwrap(), sample());
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "ts_us,src_ip\n0,10.0.0.1,10.0.0.2,1,2,6,60,1\n5,10.0.0.1,10.0.0.2,1,2,6,60,2\n";
        match read_trace(text.as_bytes(), TraceFormat::Csv) {
            Err(TrafficError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_csv_row("0,1.2.3.4,1.2.3.5,1,2,6,0,1", 1).is_err());
    }

    #[test]
    fn unsorted_trace_rejected() {
        let text = "5,10.0.0.1,10.0.0.2,1,2,6,60,1\n4,10.0.0.1,10.0.0.2,1,2,6,60,1\n";
        assert!(matches!(
            read_trace(text.as_bytes(), TraceFormat::Csv),
            Err(TrafficError::Unsorted { index: 1 })
        ));
    }

    proptest! {
        #[test]
        fn any_record_survives_csv(
            ts in any::<u64>(), src in any::<u32>(), dst in any::<u32>(),
            sp in any::<u16>(), dp in any::<u16>(), proto in any::<u8>(),
            len in 1u16.., fwd in any::<bool>(), label in proptest::option::of(0u32..1000),
            weight in 1u32..10_000,
        ) {
            let dir = if fwd { Direction::Forward } else { Direction::Backward };
            let mut p = PacketRecord::new(FiveTuple::new(src, dst, sp, dp, proto), ts, len, dir);
            p.label = label.map(Label);
            p.weight = weight;
            prop_assert_eq!(parse_csv_row(&format_csv_row(&p), 1).unwrap(), p);
            prop_assert_eq!(decode_binary(&encode_binary(&p), 0).unwrap(), p);
        }
    }
}
