//! Time tags, tag streams and block segmentation.
//!
//! All timestamps are signed 64-bit **picoseconds** since the session
//! epoch, which keeps sessions of up to ~106 days free of wraparound.
//! Calendar time is out of scope; the epoch is agreed out of band.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest valid channel id (exclusive). Channel 0 is the local detector,
/// the rest of the space is reserved.
pub const MAX_CHANNELS: u16 = 16;

/// A single photodetection event on a local clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeTag {
    /// Picoseconds since the session epoch.
    pub time_ps: i64,
    /// Detector/channel id, `< MAX_CHANNELS`.
    pub channel: u16,
}

impl TimeTag {
    pub fn new(time_ps: i64, channel: u16) -> Self {
        TimeTag { time_ps, channel }
    }
}

/// The two parties of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn other(self) -> Party {
        match self {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagError {
    #[error("tags are not sorted by time at index {0}")]
    Unsorted(usize),
    #[error("channel {0} out of range (must be < {MAX_CHANNELS})")]
    BadChannel(u16),
    #[error("block duration must be positive, got {0} ps")]
    NonPositiveBlock(i64),
    #[error("tag at {0} ps precedes the session epoch")]
    NegativeTime(i64),
}

/// An ordered sequence of detection events of one party.
///
/// Tags are sorted by `time_ps`, non-decreasing; ties across channels are
/// allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    pub party: Party,
    tags: Vec<TimeTag>,
    /// Free-form session metadata (not carried by the file format).
    pub epoch_info: String,
}

impl TagStream {
    /// Build a stream, validating ordering and channel range.
    pub fn new(party: Party, tags: Vec<TimeTag>) -> Result<Self, TagError> {
        validate_tags(&tags)?;
        Ok(TagStream {
            party,
            tags,
            epoch_info: String::new(),
        })
    }

    /// Build a stream from tags that may be out of order.
    pub fn from_unsorted(party: Party, mut tags: Vec<TimeTag>) -> Result<Self, TagError> {
        tags.sort_unstable();
        Self::new(party, tags)
    }

    pub fn tags(&self) -> &[TimeTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// First and last tag time, if any.
    pub fn span(&self) -> Option<(i64, i64)> {
        match (self.tags.first(), self.tags.last()) {
            (Some(a), Some(b)) => Some((a.time_ps, b.time_ps)),
            _ => None,
        }
    }
}

pub(crate) fn validate_tags(tags: &[TimeTag]) -> Result<(), TagError> {
    for (i, t) in tags.iter().enumerate() {
        if t.channel >= MAX_CHANNELS {
            return Err(TagError::BadChannel(t.channel));
        }
        if i > 0 && t.time_ps < tags[i - 1].time_ps {
            return Err(TagError::Unsorted(i));
        }
    }
    Ok(())
}

/// A contiguous acquisition block: tags of one stream inside the half-open
/// interval `[t_start_ps, t_end_ps)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block<'a> {
    pub index: u64,
    pub t_start_ps: i64,
    pub t_end_ps: i64,
    pub tags: &'a [TimeTag],
    /// True when the block interval is not fully covered by the
    /// observation span; callers decide whether to keep it.
    pub partial: bool,
}

impl Block<'_> {
    /// Midpoint of the block interval.
    pub fn epoch_mid_ps(&self) -> i64 {
        self.t_start_ps + (self.t_end_ps - self.t_start_ps) / 2
    }
}

/// Split a stream into consecutive acquisition blocks of `t_a_ps`.
///
/// Block `k` covers `[k*t_a, (k+1)*t_a)`; every block from 0 through the
/// block of the last tag is emitted, including empty ones, so that block
/// indices line up between two independently split streams. The
/// observation span is taken from the tags themselves (one past the last
/// tag), which flags the last block as partial unless it happens to end
/// exactly on a block boundary; use [`split_blocks_until`] when the true
/// acquisition end is known.
pub fn split_blocks<'a>(stream: &'a TagStream, t_a_ps: i64) -> Result<Vec<Block<'a>>, TagError> {
    let end = match stream.span() {
        Some((_, last)) => last + 1,
        None => return check_window(t_a_ps).map(|_| Vec::new()),
    };
    split_blocks_until(stream, t_a_ps, end)
}

/// [`split_blocks`] with an explicit observation end (exclusive, ps).
///
/// Emits blocks covering `[0, span_end_ps)`; the final block is flagged
/// partial when `span_end_ps` falls strictly inside it.
pub fn split_blocks_until<'a>(
    stream: &'a TagStream,
    t_a_ps: i64,
    span_end_ps: i64,
) -> Result<Vec<Block<'a>>, TagError> {
    check_window(t_a_ps)?;
    let tags = stream.tags();
    if let Some(first) = tags.first() {
        if first.time_ps < 0 {
            return Err(TagError::NegativeTime(first.time_ps));
        }
    }
    if tags.is_empty() && span_end_ps <= 0 {
        return Ok(Vec::new());
    }
    let end = span_end_ps.max(tags.last().map_or(0, |t| t.time_ps + 1));
    let n_blocks = (end + t_a_ps - 1) / t_a_ps; // ceil
    let mut blocks = Vec::with_capacity(n_blocks as usize);
    let mut lo = 0usize;
    for k in 0..n_blocks {
        let t_start = k * t_a_ps;
        let t_end = t_start + t_a_ps;
        let hi = lo + tags[lo..].partition_point(|t| t.time_ps < t_end);
        blocks.push(Block {
            index: k as u64,
            t_start_ps: t_start,
            t_end_ps: t_end,
            tags: &tags[lo..hi],
            partial: span_end_ps < t_end,
        });
        lo = hi;
    }
    Ok(blocks)
}

/// Block index a time belongs to, for a given block duration.
pub fn block_of(time_ps: i64, t_a_ps: i64) -> u64 {
    debug_assert!(t_a_ps > 0 && time_ps >= 0);
    (time_ps / t_a_ps) as u64
}

fn check_window(t_a_ps: i64) -> Result<(), TagError> {
    if t_a_ps <= 0 {
        Err(TagError::NonPositiveBlock(t_a_ps))
    } else {
        Ok(())
    }
}
