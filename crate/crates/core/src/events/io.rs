//! Event stream files.
//!
//! Text: a header `# evt1 <width> <height> <t0> <t1>` followed by one
//! `t x y p` record per line.
//!
//! Binary: magic `EVT1`, then little-endian `u32 width, u32 height, f64 t0,
//! f64 t1, u64 count` and `count` packed records `(f64 t, u16 x, u16 y, i8 p)`.

use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVT1";
const RECORD_BYTES: usize = 8 + 2 + 2 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Text,
    Binary,
}

impl EventFormat {
    /// `.txt` / `.evt.txt` are text, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") => EventFormat::Text,
            _ => EventFormat::Binary,
        }
    }
}

pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let path = path.as_ref();
    let bytes = match EventFormat::from_path(path) {
        EventFormat::Text => encode_text(stream).into_bytes(),
        EventFormat::Binary => encode_binary(stream),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        std::str::from_utf8(&bytes)
            .map_err(|_| Error::Parse("event file is neither EVT1 binary nor text".into()))
            .and_then(decode_text)
    };
    parsed.map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        Error::InvalidStream(m) => Error::InvalidStream(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn encode_text(stream: &EventStream) -> String {
    use std::fmt::Write;
    let mut s = format!(
        "# evt1 {} {} {} {}\n",
        stream.width(),
        stream.height(),
        stream.t0(),
        stream.t1()
    );
    for e in stream.events() {
        // `{}` on f64 prints the shortest representation that round-trips.
        let _ = writeln!(s, "{} {} {} {}", e.t, e.x, e.y, e.polarity.sign());
    }
    s
}

pub fn decode_text(text: &str) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Err(Error::Parse("missing `# evt1` header".into())),
        }
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "#" || fields[1] != "evt1" {
        return Err(Error::Parse(format!("bad header line {header:?}")));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad {what} {s:?} in header")))
    };
    let width: usize = fields[2]
        .parse()
        .map_err(|_| Error::Parse(format!("bad width {:?}", fields[2])))?;
    let height: usize = fields[3]
        .parse()
        .map_err(|_| Error::Parse(format!("bad height {:?}", fields[3])))?;
    let t0 = num(fields[4], "t0")?;
    let t1 = num(fields[5], "t1")?;

    let mut events = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Parse(format!("line {}: bad event record {line:?}", lineno + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let t: f64 = f[0].parse().map_err(|_| bad())?;
        let x: u16 = f[1].parse().map_err(|_| bad())?;
        let y: u16 = f[2].parse().map_err(|_| bad())?;
        let p: i64 = f[3].parse().map_err(|_| bad())?;
        let polarity = Polarity::from_sign(p).ok_or_else(bad)?;
        events.push(Event::new(t, x, y, polarity));
    }
    EventStream::new(events, t0, t1, width, height)
}

pub fn encode_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + stream.len() * RECORD_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(stream.width() as u32).to_le_bytes());
    out.extend_from_slice(&(stream.height() as u32).to_le_bytes());
    out.extend_from_slice(&stream.t0().to_le_bytes());
    out.extend_from_slice(&stream.t1().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity.sign() as u8);
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<EventStream> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Parse("missing EVT1 magic".into()));
    }
    let width = cur.u32()? as usize;
    let height = cur.u32()? as usize;
    let t0 = cur.f64()?;
    let t1 = cur.f64()?;
    let count = cur.u64()? as usize;
    let remaining = bytes.len() - cur.pos;
    if remaining != count.saturating_mul(RECORD_BYTES) {
        return Err(Error::Parse(format!(
            "header declares {count} records but {remaining} payload bytes follow"
        )));
    }
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let t = cur.f64()?;
        let x = cur.u16()?;
        let y = cur.u16()?;
        let p = cur.take(1)?[0] as i8;
        let polarity = Polarity::from_sign(p as i64)
            .ok_or_else(|| Error::Parse(format!("record {i}: polarity {p} not in {{1, -1}}")))?;
        events.push(Event::new(t, x, y, polarity));
    }
    EventStream::new(events, t0, t1, width, height)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("truncated EVT1 file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
