//! Classical exchange channel: both parties stream their timestamp
//! blocks to each other over TCP and compute the same synchronization
//! result live.
//!
//! Frames are length-prefixed and optionally authenticated:
//!
//! ```text
//! length   u32 LE   bytes after this field
//! type     u8       1 HELLO, 2 BLOCK, 3 ESTIMATE, 4 BYE
//! payload  bytes
//! tag      32 bytes HMAC-SHA256 over type || payload, keyed sessions only
//! ```
//!
//! `BLOCK` payload: `block_index u32 + count u32 + count * time_ps i64`,
//! all little-endian. Raw local-clock picoseconds go on the wire; no
//! pre-correction is applied, exchanging them is the whole point of the
//! protocol. Authentication uses a pre-shared 32-byte key; distributing
//! it is out of scope.
//!
//! Both ends run the identical per-block pipeline on the identical tag
//! sets in the canonical orientation (Alice's tags as stream `a`), so the
//! estimates agree bit for bit and Bob reports the negated offset.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::peakfit::{PeakShape, SyncEstimate};
use crate::syncpipe::{sync_block, BlockGap, SyncSeries};
use crate::timetag::{split_blocks, Party, TagStream, TimeTag};
use crate::xcorr::PeakSearchConfig;

type HmacSha256 = Hmac<Sha256>;

pub const PROTO_VERSION: u16 = 1;
pub const MAX_PAYLOAD: usize = 1 << 24;
pub const TAG_LEN: usize = 32;
pub const KEY_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad frame length {0}")]
    BadLength(u32),
    #[error("bad frame type {0}")]
    BadType(u8),
    #[error("authentication tag mismatch")]
    AuthFail,
    #[error("frame truncated")]
    Truncated,
    #[error("peers disagree: {0}")]
    ParameterMismatch(String),
    #[error("block of {0} tags exceeds the frame payload limit")]
    BlockTooLarge(usize),
    #[error("expected HELLO, peer sent {0:?}")]
    HelloRequired(FrameType),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Hello = 1,
    Block = 2,
    Estimate = 3,
    Bye = 4,
}

impl FrameType {
    fn from_byte(b: u8) -> Result<Self, WireError> {
        match b {
            1 => Ok(FrameType::Hello),
            2 => Ok(FrameType::Block),
            3 => Ok(FrameType::Estimate),
            4 => Ok(FrameType::Bye),
            other => Err(WireError::BadType(other)),
        }
    }
}

/// One protocol frame before framing/authentication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Frame {
            frame_type,
            payload,
        }
    }
}

fn mac_tag(key: &[u8; KEY_LEN], frame_type: u8, payload: &[u8]) -> [u8; TAG_LEN] {
    let mut mac = HmacSha256::new_from_slice(key).expect("any key length works");
    mac.update(&[frame_type]);
    mac.update(payload);
    mac.finalize().into_bytes().into()
}

/// Encode a frame, appending the authentication tag for keyed sessions.
pub fn encode_frame(frame: &Frame, key: Option<&[u8; KEY_LEN]>) -> Result<Vec<u8>, WireError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(WireError::BlockTooLarge(frame.payload.len()));
    }
    let tag_len = if key.is_some() { TAG_LEN } else { 0 };
    let body_len = 1 + frame.payload.len() + tag_len;
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_le_bytes());
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&frame.payload);
    if let Some(k) = key {
        out.extend_from_slice(&mac_tag(k, frame.frame_type as u8, &frame.payload));
    }
    Ok(out)
}

/// Decode one frame from a byte slice; returns the frame and the bytes
/// consumed. Verifies the authentication tag when a key is given.
pub fn decode_frame(bytes: &[u8], key: Option<&[u8; KEY_LEN]>) -> Result<(Frame, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated);
    }
    let body_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let tag_len = if key.is_some() { TAG_LEN } else { 0 };
    if (body_len as usize) < 1 + tag_len || body_len as usize > 1 + MAX_PAYLOAD + tag_len {
        return Err(WireError::BadLength(body_len));
    }
    let total = 4 + body_len as usize;
    if bytes.len() < total {
        return Err(WireError::Truncated);
    }
    let body = &bytes[4..total];
    let frame_type = FrameType::from_byte(body[0])?;
    let payload_end = body.len() - tag_len;
    let payload = &body[1..payload_end];
    if let Some(k) = key {
        let expect = mac_tag(k, body[0], payload);
        let got = &body[payload_end..];
        let mut diff = 0u8;
        for (a, b) in expect.iter().zip(got) {
            diff |= a ^ b;
        }
        if diff != 0 {
            return Err(WireError::AuthFail);
        }
    }
    Ok((
        Frame {
            frame_type,
            payload: payload.to_vec(),
        },
        total,
    ))
}

fn read_frame<R: Read>(r: &mut R, key: Option<&[u8; KEY_LEN]>) -> Result<Option<Frame>, WireError> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let body_len = u32::from_le_bytes(len_buf);
    let tag_len = if key.is_some() { TAG_LEN } else { 0 };
    if (body_len as usize) < 1 + tag_len || body_len as usize > 1 + MAX_PAYLOAD + tag_len {
        return Err(WireError::BadLength(body_len));
    }
    let mut body = vec![0u8; body_len as usize];
    r.read_exact(&mut body).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::Truncated
        } else {
            WireError::Io(e)
        }
    })?;
    let mut framed = Vec::with_capacity(4 + body.len());
    framed.extend_from_slice(&len_buf);
    framed.extend_from_slice(&body);
    decode_frame(&framed, key).map(|(f, _)| Some(f))
}

/// Session parameters; both peers must agree on everything but the role.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub role: Party,
    pub t_a_ps: i64,
    pub shape: PeakShape<f64>,
    pub shared_key: Option<[u8; KEY_LEN]>,
    pub peak_search: PeakSearchConfig,
}

impl SessionConfig {
    pub fn new(role: Party, t_a_ps: i64, shape: PeakShape<f64>) -> Self {
        SessionConfig {
            role,
            t_a_ps,
            shape,
            shared_key: None,
            peak_search: PeakSearchConfig::default(),
        }
    }

    pub fn with_key(mut self, key: [u8; KEY_LEN]) -> Self {
        self.shared_key = Some(key);
        self
    }
}

fn hello_payload(cfg: &SessionConfig) -> Vec<u8> {
    let mut p = Vec::with_capacity(28);
    p.extend_from_slice(&PROTO_VERSION.to_le_bytes());
    p.push(match cfg.role {
        Party::Alice => 0,
        Party::Bob => 1,
    });
    p.push(cfg.shared_key.is_some() as u8);
    p.extend_from_slice(&cfg.t_a_ps.to_le_bytes());
    p.extend_from_slice(&cfg.shape.f.to_le_bytes());
    p.extend_from_slice(&cfg.shape.sigma_ps.to_le_bytes());
    p
}

struct HelloInfo {
    role: Party,
    keyed: bool,
    t_a_ps: i64,
    shape_f: f64,
    shape_sigma_ps: f64,
}

fn parse_hello(payload: &[u8]) -> Result<HelloInfo, WireError> {
    if payload.len() != 28 {
        return Err(WireError::ParameterMismatch(format!(
            "HELLO payload of {} bytes",
            payload.len()
        )));
    }
    let version = u16::from_le_bytes(payload[0..2].try_into().unwrap());
    if version != PROTO_VERSION {
        return Err(WireError::ParameterMismatch(format!(
            "protocol version {version}"
        )));
    }
    let role = match payload[2] {
        0 => Party::Alice,
        1 => Party::Bob,
        b => return Err(WireError::ParameterMismatch(format!("role byte {b}"))),
    };
    Ok(HelloInfo {
        role,
        keyed: payload[3] != 0,
        t_a_ps: i64::from_le_bytes(payload[4..12].try_into().unwrap()),
        shape_f: f64::from_le_bytes(payload[12..20].try_into().unwrap()),
        shape_sigma_ps: f64::from_le_bytes(payload[20..28].try_into().unwrap()),
    })
}

fn block_payload(index: u32, tags: &[TimeTag]) -> Result<Vec<u8>, WireError> {
    let bytes = 8 + 8 * tags.len();
    if bytes > MAX_PAYLOAD {
        return Err(WireError::BlockTooLarge(tags.len()));
    }
    let mut p = Vec::with_capacity(bytes);
    p.extend_from_slice(&index.to_le_bytes());
    p.extend_from_slice(&(tags.len() as u32).to_le_bytes());
    for t in tags {
        p.extend_from_slice(&t.time_ps.to_le_bytes());
    }
    Ok(p)
}

fn parse_block(payload: &[u8]) -> Result<(u32, Vec<TimeTag>), WireError> {
    if payload.len() < 8 {
        return Err(WireError::Truncated);
    }
    let index = u32::from_le_bytes(payload[0..4].try_into().unwrap());
    let count = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
    if payload.len() != 8 + 8 * count {
        return Err(WireError::Truncated);
    }
    let mut tags = Vec::with_capacity(count);
    for k in 0..count {
        let off = 8 + 8 * k;
        let t = i64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
        tags.push(TimeTag::new(t, 0));
    }
    Ok((index, tags))
}

fn estimate_payload(e: &SyncEstimate<f64>) -> Vec<u8> {
    let mut p = Vec::with_capacity(36);
    p.extend_from_slice(&(e.block_index as u32).to_le_bytes());
    p.extend_from_slice(&e.epoch_mid_ps.to_le_bytes());
    p.extend_from_slice(&e.delta_ps.to_le_bytes());
    p.extend_from_slice(&e.sigma_delta_ps.to_le_bytes());
    p.extend_from_slice(&e.round_trip_ps.to_le_bytes());
    p
}

fn parse_estimate(payload: &[u8]) -> Result<SyncEstimate<f64>, WireError> {
    if payload.len() != 36 {
        return Err(WireError::Truncated);
    }
    Ok(SyncEstimate {
        block_index: u32::from_le_bytes(payload[0..4].try_into().unwrap()) as u64,
        epoch_mid_ps: i64::from_le_bytes(payload[4..12].try_into().unwrap()),
        delta_ps: f64::from_le_bytes(payload[12..20].try_into().unwrap()),
        sigma_delta_ps: f64::from_le_bytes(payload[20..28].try_into().unwrap()),
        round_trip_ps: f64::from_le_bytes(payload[28..36].try_into().unwrap()),
    })
}

/// What a finished (or disconnected) session produced.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    /// Estimates in this node's own sign convention (Bob reports the
    /// negated offset).
    pub series: SyncSeries<f64>,
    /// Estimates the peer reported over the wire.
    pub peer_estimates: Vec<SyncEstimate<f64>>,
    /// Frames that arrived for already-finalized blocks and were dropped.
    pub late_frames: u64,
    /// False when the peer disconnected before its BYE.
    pub completed: bool,
}

/// Listen on `addr`, accept one peer and run the session over it.
pub fn serve<A: ToSocketAddrs>(
    addr: A,
    config: &SessionConfig,
    local: &TagStream,
    on_estimate: impl FnMut(&SyncEstimate<f64>),
) -> Result<SessionOutcome, WireError> {
    let listener = TcpListener::bind(addr)?;
    let (socket, _) = listener.accept()?;
    run_session(socket, config, local, on_estimate)
}

/// Connect to a listening peer and run the session.
pub fn connect<A: ToSocketAddrs>(
    addr: A,
    config: &SessionConfig,
    local: &TagStream,
    on_estimate: impl FnMut(&SyncEstimate<f64>),
) -> Result<SessionOutcome, WireError> {
    let socket = TcpStream::connect(addr)?;
    run_session(socket, config, local, on_estimate)
}

/// Run a full exchange session over an established connection.
///
/// Local tags go out in per-block `BLOCK` frames while incoming frames
/// are processed concurrently; a block is finalized once both sides'
/// tags for it are held and the peer has moved past it (one-block lag,
/// so transport skew cannot split a block). Estimates are delivered to
/// `on_estimate` in block order as they are computed.
pub fn run_session(
    socket: TcpStream,
    config: &SessionConfig,
    local: &TagStream,
    mut on_estimate: impl FnMut(&SyncEstimate<f64>),
) -> Result<SessionOutcome, WireError> {
    socket.set_nodelay(true).ok();
    let key = config.shared_key;
    let mut reader = BufReader::new(socket.try_clone()?);
    let mut writer = BufWriter::new(socket);

    // HELLO exchange, synchronous, before anything else.
    writer.write_all(&encode_frame(
        &Frame::new(FrameType::Hello, hello_payload(config)),
        key.as_ref(),
    )?)?;
    writer.flush()?;
    let hello = match read_frame(&mut reader, key.as_ref())? {
        Some(f) if f.frame_type == FrameType::Hello => parse_hello(&f.payload)?,
        Some(f) => return Err(WireError::HelloRequired(f.frame_type)),
        None => return Err(WireError::Truncated),
    };
    if hello.role != config.role.other() {
        return Err(WireError::ParameterMismatch("both peers claim one role".into()));
    }
    if hello.keyed != key.is_some() {
        return Err(WireError::ParameterMismatch(
            "authentication enabled on one side only".into(),
        ));
    }
    if hello.t_a_ps != config.t_a_ps {
        return Err(WireError::ParameterMismatch(format!(
            "block duration {} vs {}",
            config.t_a_ps, hello.t_a_ps
        )));
    }
    if hello.shape_f.to_bits() != config.shape.f.to_bits()
        || hello.shape_sigma_ps.to_bits() != config.shape.sigma_ps.to_bits()
    {
        return Err(WireError::ParameterMismatch("peak shape differs".into()));
    }

    // Sender thread: all local blocks, BYE, then any queued estimates.
    let local_blocks = split_blocks(local, config.t_a_ps)
        .map_err(|e| WireError::ParameterMismatch(e.to_string()))?;
    let outgoing: Vec<(u32, Vec<u8>)> = local_blocks
        .iter()
        .map(|b| Ok((b.index as u32, block_payload(b.index as u32, b.tags)?)))
        .collect::<Result<_, WireError>>()?;
    let (est_tx, est_rx) = mpsc::channel::<SyncEstimate<f64>>();
    let sender: thread::JoinHandle<Result<(), WireError>> = thread::spawn(move || {
        fn send<W: Write>(
            writer: &mut W,
            key: Option<&[u8; KEY_LEN]>,
            frame: &Frame,
        ) -> Result<(), WireError> {
            writer.write_all(&encode_frame(frame, key)?)?;
            Ok(())
        }
        for (_, payload) in outgoing {
            send(&mut writer, key.as_ref(), &Frame::new(FrameType::Block, payload))?;
            while let Ok(e) = est_rx.try_recv() {
                send(
                    &mut writer,
                    key.as_ref(),
                    &Frame::new(FrameType::Estimate, estimate_payload(&e)),
                )?;
            }
        }
        send(&mut writer, key.as_ref(), &Frame::new(FrameType::Bye, Vec::new()))?;
        writer.flush()?;
        // keep forwarding estimates until the receive loop hangs up
        while let Ok(e) = est_rx.recv() {
            send(
                &mut writer,
                key.as_ref(),
                &Frame::new(FrameType::Estimate, estimate_payload(&e)),
            )?;
            writer.flush()?;
        }
        writer.flush()?;
        writer.into_inner().map_err(|e| WireError::Io(e.into_error()))?
            .shutdown(std::net::Shutdown::Write)
            .ok();
        Ok(())
    });

    // Receive loop: collect peer blocks, finalize in order with a
    // one-block lag, drop late frames.
    let mut peer_blocks: BTreeMap<u64, Vec<TimeTag>> = BTreeMap::new();
    let mut peer_estimates = Vec::new();
    let mut estimates = Vec::new();
    let mut gaps: Vec<BlockGap> = Vec::new();
    let mut next_block = 0u64;
    let mut max_peer_seen: Option<u64> = None;
    let mut late_frames = 0u64;
    let mut bye_seen = false;
    let mut completed = true;

    let t_a = config.t_a_ps;
    let finalize =
        |up_to_exclusive: u64,
         next_block: &mut u64,
         peer_blocks: &mut BTreeMap<u64, Vec<TimeTag>>,
         estimates: &mut Vec<SyncEstimate<f64>>,
         gaps: &mut Vec<BlockGap>,
         on_estimate: &mut dyn FnMut(&SyncEstimate<f64>)| {
            while *next_block < up_to_exclusive && (*next_block as usize) < local_blocks.len() {
                let k = *next_block;
                *next_block += 1;
                let mine = local_blocks[k as usize].tags;
                let theirs = match peer_blocks.remove(&k) {
                    Some(t) => t,
                    None => {
                        gaps.push(BlockGap {
                            block_index: k,
                            reason: "no peer data for block".into(),
                        });
                        continue;
                    }
                };
                let epoch_mid = local_blocks[k as usize].epoch_mid_ps();
                let (a_tags, b_tags): (&[TimeTag], &[TimeTag]) = match config.role {
                    Party::Alice => (mine, &theirs),
                    Party::Bob => (&theirs, mine),
                };
                match sync_block(&config.peak_search, a_tags, b_tags, k, epoch_mid, &config.shape)
                {
                    Ok(canonical) => {
                        // canonical delta is Bob-minus-Alice; Bob reports
                        // the offset of Alice relative to himself
                        let mut own = canonical;
                        if config.role == Party::Bob {
                            own.delta_ps = -own.delta_ps;
                        }
                        on_estimate(&own);
                        let _ = est_tx.send(own);
                        estimates.push(own);
                    }
                    Err(e) => gaps.push(BlockGap {
                        block_index: k,
                        reason: e.to_string(),
                    }),
                }
            }
        };

    loop {
        let frame = match read_frame(&mut reader, key.as_ref()) {
            Ok(Some(f)) => f,
            Ok(None) => {
                // peer went away; finalize what we can
                if !bye_seen {
                    completed = false;
                }
                break;
            }
            Err(e @ WireError::AuthFail) => return Err(e),
            Err(e) => return Err(e),
        };
        match frame.frame_type {
            FrameType::Hello => {
                return Err(WireError::ParameterMismatch("unexpected second HELLO".into()))
            }
            FrameType::Block => {
                let (index, tags) = parse_block(&frame.payload)?;
                let index = index as u64;
                if index < next_block {
                    late_frames += 1;
                    continue;
                }
                max_peer_seen = Some(max_peer_seen.map_or(index, |m: u64| m.max(index)));
                peer_blocks.insert(index, tags);
                // one-block lag: everything strictly below the peer's
                // newest block is complete
                if let Some(m) = max_peer_seen {
                    finalize(
                        m,
                        &mut next_block,
                        &mut peer_blocks,
                        &mut estimates,
                        &mut gaps,
                        &mut on_estimate,
                    );
                }
            }
            FrameType::Estimate => {
                peer_estimates.push(parse_estimate(&frame.payload)?);
            }
            FrameType::Bye => {
                bye_seen = true;
                finalize(
                    local_blocks.len() as u64,
                    &mut next_block,
                    &mut peer_blocks,
                    &mut estimates,
                    &mut gaps,
                    &mut on_estimate,
                );
                // hang up the estimate queue so the sender can finish,
                // but keep reading the peer's trailing estimates
            }
        }
        if bye_seen {
            break;
        }
    }
    if !bye_seen {
        finalize(
            local_blocks.len() as u64,
            &mut next_block,
            &mut peer_blocks,
            &mut estimates,
            &mut gaps,
            &mut on_estimate,
        );
    }
    drop(est_tx);

    // Drain the peer's trailing estimates until it shuts down.
    while let Some(frame) = read_frame(&mut reader, key.as_ref())? {
        match frame.frame_type {
            FrameType::Estimate => peer_estimates.push(parse_estimate(&frame.payload)?),
            FrameType::Block => late_frames += 1,
            _ => {}
        }
    }

    sender.join().map_err(|_| {
        WireError::Io(io::Error::new(io::ErrorKind::Other, "sender thread panicked"))
    })??;

    Ok(SessionOutcome {
        series: SyncSeries {
            estimates,
            t_a_ps: t_a,
            gaps,
            labels: Vec::new(),
        },
        peer_estimates,
        late_frames,
        completed,
    })
}
