//! The `PTAG` v1 tag-file format.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! header, 24 bytes:
//!   0   magic            8 bytes  "PAIRSYNC"
//!   8   version          u16      = 1
//!   10  party            u8       0 = Alice, 1 = Bob
//!   11  reserved         u8       = 0
//!   12  record_count     u64
//!   20  reserved         u32      = 0
//! record, 16 bytes each:
//!   0   time_ps          i64
//!   8   channel          u16
//!   10  flags            u16      = 0, reserved
//!   12  reserved         u32      = 0
//! ```
//!
//! Records must be sorted by `time_ps`, non-decreasing; the decoder
//! rejects out-of-order records so that a valid file always yields a
//! valid [`TagStream`].

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::timetag::{Party, TagStream, TimeTag, MAX_CHANNELS};

pub const MAGIC: &[u8; 8] = b"PAIRSYNC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic (not a PTAG file)")]
    BadMagic,
    #[error("unsupported PTAG version {0}")]
    BadVersion(u16),
    #[error("bad party byte {0}")]
    BadParty(u8),
    #[error("file ends mid-record ({got} of {want} bytes)")]
    TruncatedRecord { want: usize, got: usize },
    #[error("record {index} goes back in time ({time_ps} ps after {prev_ps} ps)")]
    NonMonotonic {
        index: u64,
        time_ps: i64,
        prev_ps: i64,
    },
    #[error("record {index} has channel {channel} out of range")]
    BadChannel { index: u64, channel: u16 },
    #[error("trailing bytes after the last record")]
    TrailingData,
    #[error("stream is not sorted; refusing to encode")]
    UnsortedStream,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn party_byte(p: Party) -> u8 {
    match p {
        Party::Alice => 0,
        Party::Bob => 1,
    }
}

/// Write a stream in PTAG v1 form; returns the number of bytes emitted,
/// always `24 + 16 * len`.
pub fn encode_stream<W: Write>(stream: &TagStream, sink: &mut W) -> Result<usize, CodecError> {
    // The stream type already guarantees ordering; re-check cheaply so a
    // hand-built slice cannot smuggle an invalid file past us.
    let tags = stream.tags();
    if tags.windows(2).any(|w| w[1].time_ps < w[0].time_ps) {
        return Err(CodecError::UnsortedStream);
    }

    let mut header = [0u8; HEADER_LEN];
    header[0..8].copy_from_slice(MAGIC);
    header[8..10].copy_from_slice(&VERSION.to_le_bytes());
    header[10] = party_byte(stream.party);
    header[12..20].copy_from_slice(&(tags.len() as u64).to_le_bytes());
    sink.write_all(&header)?;

    let mut record = [0u8; RECORD_LEN];
    for t in tags {
        record[0..8].copy_from_slice(&t.time_ps.to_le_bytes());
        record[8..10].copy_from_slice(&t.channel.to_le_bytes());
        // flags + reserved stay zero
        sink.write_all(&record)?;
    }
    Ok(HEADER_LEN + RECORD_LEN * tags.len())
}

/// Read a PTAG v1 stream, rejecting malformed or out-of-order input.
pub fn decode_stream<R: Read>(source: &mut R) -> Result<TagStream, CodecError> {
    let mut header = [0u8; HEADER_LEN];
    read_exactly(source, &mut header, HEADER_LEN)?;
    if &header[0..8] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = u16::from_le_bytes([header[8], header[9]]);
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let party = match header[10] {
        0 => Party::Alice,
        1 => Party::Bob,
        b => return Err(CodecError::BadParty(b)),
    };
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());

    let mut tags = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut record = [0u8; RECORD_LEN];
    let mut prev = i64::MIN;
    for index in 0..count {
        read_exactly(source, &mut record, RECORD_LEN)?;
        let time_ps = i64::from_le_bytes(record[0..8].try_into().unwrap());
        let channel = u16::from_le_bytes([record[8], record[9]]);
        if channel >= MAX_CHANNELS {
            return Err(CodecError::BadChannel { index, channel });
        }
        if time_ps < prev {
            return Err(CodecError::NonMonotonic {
                index,
                time_ps,
                prev_ps: prev,
            });
        }
        prev = time_ps;
        tags.push(TimeTag::new(time_ps, channel));
    }
    if source.read(&mut [0u8; 1])? != 0 {
        return Err(CodecError::TrailingData);
    }
    // Ordering and channels were validated record by record.
    Ok(TagStream::new(party, tags).expect("decoded records satisfy stream invariants"))
}

fn read_exactly<R: Read>(source: &mut R, buf: &mut [u8], want: usize) -> Result<(), CodecError> {
    let mut got = 0;
    while got < want {
        let n = source.read(&mut buf[got..want])?;
        if n == 0 {
            return Err(CodecError::TruncatedRecord { want, got });
        }
        got += n;
    }
    Ok(())
}
