//! Event trace emitted by a simulation run, plus its CSV form.
//!
//! The CSV layout is one record per line with header `time,kind,peer,detail`:
//!
//! | kind               | peer        | detail                          |
//! |--------------------|-------------|---------------------------------|
//! | `Arrival`          | leecher id  | upload capacity (kB/s)          |
//! | `PieceComplete`    | downloader  | `<piece>@<uploader id or seed>` |
//! | `DownloadComplete` | leecher id  | bytes received (kB)             |
//! | `Departure`        | leecher id  | empty                           |
//! | `SeedOn`/`SeedOff` | `seed`      | empty                           |
//!
//! Times are written with Rust's shortest round-trip float formatting, so a
//! trace read back is bit-identical to the one written.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bitmap::Bitmap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Arrival,
    PieceComplete,
    DownloadComplete,
    Departure,
    SeedOn,
    SeedOff,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Arrival => "Arrival",
            EventKind::PieceComplete => "PieceComplete",
            EventKind::DownloadComplete => "DownloadComplete",
            EventKind::Departure => "Departure",
            EventKind::SeedOn => "SeedOn",
            EventKind::SeedOff => "SeedOff",
        }
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Arrival" => EventKind::Arrival,
            "PieceComplete" => EventKind::PieceComplete,
            "DownloadComplete" => EventKind::DownloadComplete,
            "Departure" => EventKind::Departure,
            "SeedOn" => EventKind::SeedOn,
            "SeedOff" => EventKind::SeedOff,
            other => return Err(Error::MalformedTrace(format!("unknown event kind {other:?}"))),
        })
    }
}

/// Who uploads a piece.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Seed,
    Leecher(u32),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Seed => f.write_str("seed"),
            Source::Leecher(id) => write!(f, "{id}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "seed" {
            return Ok(Source::Seed);
        }
        s.parse()
            .map(Source::Leecher)
            .map_err(|_| Error::MalformedTrace(format!("bad peer {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Detail {
    None,
    Capacity(f64),
    Piece { piece: u32, from: Source },
    Bytes(f64),
}

impl fmt::Display for Detail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Detail::None => Ok(()),
            Detail::Capacity(c) => write!(f, "{c}"),
            Detail::Piece { piece, from } => write!(f, "{piece}@{from}"),
            Detail::Bytes(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: f64,
    pub kind: EventKind,
    /// `Source::Seed` for seed toggles, the leecher otherwise.
    pub peer: Source,
    pub detail: Detail,
}

impl TraceRecord {
    pub fn leecher(&self) -> Option<u32> {
        match self.peer {
            Source::Leecher(id) => Some(id),
            Source::Seed => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerSnapshot {
    pub id: u32,
    pub pieces: u32,
    /// Bytes received so far, including partial progress of in-flight pieces.
    pub received: f64,
    pub capacity: f64,
    /// `false` once the peer holds the whole content and only uploads.
    pub downloading: bool,
    pub bitmap: Option<Bitmap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub seed_on: bool,
    pub peers: Vec<PeerSnapshot>,
}

impl Snapshot {
    pub fn peer(&self, id: u32) -> Option<&PeerSnapshot> {
        self.peers.iter().find(|p| p.id == id)
    }

    pub fn downloading(&self) -> impl Iterator<Item = &PeerSnapshot> {
        self.peers.iter().filter(|p| p.downloading)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub num_pieces: u32,
    pub piece_size: f64,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Simulated time at which the run stopped.
    pub end_time: f64,
}

impl EventTrace {
    pub fn new(num_pieces: u32, piece_size: f64) -> Self {
        Self {
            num_pieces,
            piece_size,
            ..Default::default()
        }
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "kind", "peer", "detail"]).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.time.to_string(),
                r.kind.as_str().to_string(),
                r.peer.to_string(),
                r.detail.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses records only; snapshots are not part of the CSV form.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let mut trace = EventTrace::default();
        for (line, row) in rd.records().enumerate() {
            let row = row.map_err(csv_err)?;
            if row.len() != 4 {
                return Err(Error::MalformedTrace(format!("line {}: expected 4 fields", line + 2)));
            }
            let time: f64 = row[0]
                .parse()
                .map_err(|_| Error::MalformedTrace(format!("line {}: bad time {:?}", line + 2, &row[0])))?;
            let kind: EventKind = row[1].parse()?;
            let peer: Source = row[2].parse()?;
            let detail = parse_detail(kind, &row[3])?;
            trace.records.push(TraceRecord { time, kind, peer, detail });
            trace.end_time = trace.end_time.max(time);
        }
        Ok(trace)
    }
}

fn parse_detail(kind: EventKind, text: &str) -> Result<Detail> {
    let number = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::MalformedTrace(format!("bad numeric detail {s:?}")))
    };
    Ok(match kind {
        EventKind::Arrival => Detail::Capacity(number(text)?),
        EventKind::DownloadComplete => Detail::Bytes(number(text)?),
        EventKind::PieceComplete => {
            let (piece, from) = text
                .split_once('@')
                .ok_or_else(|| Error::MalformedTrace(format!("bad piece detail {text:?}")))?;
            Detail::Piece {
                piece: piece
                    .parse()
                    .map_err(|_| Error::MalformedTrace(format!("bad piece index {piece:?}")))?,
                from: from.parse()?,
            }
        }
        EventKind::Departure | EventKind::SeedOn | EventKind::SeedOff => Detail::None,
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedTrace(format!("{other:?}")),
    }
}
