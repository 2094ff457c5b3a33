//! Newline-delimited JSON control loop over TCP. The server owns the
//! environment and publishes observations at a fixed rate; the client runs the
//! policy and answers each observation with an action.

use std::io::{self, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use base64::Engine;
use leafpush_core::arm::{JointVector, JOINTS};
use leafpush_core::env::{Env, EnvConfig, EnvError, Observation};
use leafpush_core::eval::Policy;
use leafpush_core::geom::Vec3;
use leafpush_core::ppo::derive_seed;
use serde::{Deserialize, Serialize};

use crate::formats::{decode_frame, encode_frame};

pub const PROTOCOL_VERSION: u32 = 1;
/// Lines longer than this are dropped up to the next newline.
pub const MAX_LINE: usize = 8 << 20;
/// Seed stream for bridged episodes.
pub const BRIDGE_STREAM: u64 = 0xB41D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u32,
    /// Joints the environment drives; actions for the others are ignored.
    pub actuated: [bool; JOINTS],
    pub width: usize,
    pub height: usize,
    /// `None` when the server waits indefinitely for each action.
    pub rate_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMsg {
    pub episode: u64,
    pub step: usize,
    /// Base64 of the binary frame dump.
    pub frame: String,
    pub joints: JointVector,
    pub ee_position: [f64; 3],
    /// Reward of the step that produced this observation; 0 after a reset.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMsg {
    pub delta: JointVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEnd {
    pub episode: u64,
    pub steps: usize,
    /// Reward of the final step.
    pub reward: f64,
    pub success: bool,
    pub collided: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    Hello(Hello),
    Observation(ObservationMsg),
    Action(ActionMsg),
    EpisodeEnd(EpisodeEnd),
    Error(ErrorMsg),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

impl WireMessage {
    pub fn new(seq: u64, payload: Payload) -> Self {
        Self { seq, payload }
    }

    /// One JSON object terminated by a newline.
    pub fn encode(&self) -> Vec<u8> {
        let mut line = serde_json::to_vec(self).expect("wire messages serialize");
        line.push(b'\n');
        line
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("bad line at byte {offset}: {message}")]
pub struct DecodeError {
    /// Stream offset of the byte where decoding failed.
    pub offset: u64,
    pub message: String,
}

/// Decode one line (without its newline) that starts at stream offset `start`.
pub fn decode_line(line: &[u8], start: u64) -> Result<WireMessage, DecodeError> {
    serde_json::from_slice(line).map_err(|e| {
        // serde_json reports 1-based line and column in bytes.
        let mut off = 0usize;
        for _ in 1..e.line() {
            off += line[off..].iter().position(|&b| b == b'\n').map_or(0, |p| p + 1);
        }
        off = (off + e.column().saturating_sub(1)).min(line.len());
        DecodeError {
            offset: start + off as u64,
            message: e.to_string(),
        }
    })
}

/// Splits a byte stream into lines and decodes them. A malformed line yields
/// one error and decoding resumes after the next newline.
#[derive(Debug, Default)]
pub struct LineDecoder {
    buf: Vec<u8>,
    /// Start of the unconsumed bytes in `buf`.
    head: usize,
    /// Stream offset of `buf[0]`.
    base: u64,
    /// Bytes of `buf` already scanned for a newline.
    scanned: usize,
    /// Dropping an oversized line until its newline arrives.
    skipping: bool,
}

impl LineDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.head > 0 && self.head * 2 >= self.buf.len() {
            self.buf.drain(..self.head);
            self.base += self.head as u64;
            self.scanned = self.scanned.saturating_sub(self.head);
            self.head = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes consumed so far, including the buffered partial line.
    pub fn stream_position(&self) -> u64 {
        self.base + self.buf.len() as u64
    }

    /// Next complete line, decoded. Blank lines are skipped.
    pub fn next_message(&mut self) -> Option<Result<WireMessage, DecodeError>> {
        loop {
            self.scanned = self.scanned.max(self.head);
            let nl = self.buf[self.scanned..].iter().position(|&b| b == b'\n');
            let Some(p) = nl else {
                self.scanned = self.buf.len();
                let pending = self.buf.len() - self.head;
                if !self.skipping && pending > MAX_LINE {
                    let offset = self.base + self.head as u64;
                    self.skipping = true;
                    self.head = self.buf.len();
                    return Some(Err(DecodeError {
                        offset,
                        message: format!("line exceeds {MAX_LINE} bytes"),
                    }));
                }
                if self.skipping {
                    self.head = self.buf.len();
                }
                return None;
            };
            let end = self.scanned + p;
            let start = self.head;
            self.head = end + 1;
            if self.skipping {
                self.skipping = false;
                continue;
            }
            let mut line = &self.buf[start..end];
            if line.last() == Some(&b'\r') {
                line = &line[..line.len() - 1];
            }
            if line.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            return Some(decode_line(line, self.base + start as u64));
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer closed the connection")]
    Closed,
}

/// Blocking message stream over one TCP connection.
pub struct Connection {
    stream: TcpStream,
    writer: BufWriter<TcpStream>,
    decoder: LineDecoder,
    /// Decode errors seen and skipped.
    pub decode_errors: Vec<DecodeError>,
}

pub enum Received {
    Message(WireMessage),
    Timeout,
}

impl Connection {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            writer: BufWriter::new(stream.try_clone()?),
            stream,
            decoder: LineDecoder::new(),
            decode_errors: Vec::new(),
        })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn send(&mut self, msg: &WireMessage) -> io::Result<()> {
        self.writer.write_all(&msg.encode())?;
        self.writer.flush()
    }

    /// Wait for the next well-formed message until `deadline`, or forever.
    /// Malformed lines are recorded in `decode_errors` and skipped.
    pub fn recv(&mut self, deadline: Option<Instant>) -> Result<Received, BridgeError> {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            while let Some(r) = self.decoder.next_message() {
                match r {
                    Ok(m) => return Ok(Received::Message(m)),
                    Err(e) => self.decode_errors.push(e),
                }
            }
            let timeout = match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Ok(Received::Timeout);
                    }
                    Some(left)
                }
                None => None,
            };
            self.stream.set_read_timeout(timeout)?;
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(BridgeError::Closed),
                Ok(n) => self.decoder.push(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(Received::Timeout)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn observation_msg(obs: &Observation, episode: u64, step: usize, reward: f64) -> ObservationMsg {
    ObservationMsg {
        episode,
        step,
        frame: base64::engine::general_purpose::STANDARD.encode(encode_frame(&obs.frame)),
        joints: obs.joints,
        ee_position: obs.ee_position.to_array(),
        reward,
    }
}

/// Rebuild the observation carried by a message.
pub fn decode_observation(msg: &ObservationMsg) -> Result<Observation, BridgeError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&msg.frame)
        .map_err(|e| BridgeError::Protocol(format!("frame blob: {e}")))?;
    let frame = decode_frame(&bytes).map_err(|e| BridgeError::Protocol(format!("frame blob: {e}")))?;
    let [x, y, z] = msg.ee_position;
    Ok(Observation {
        frame,
        joints: msg.joints,
        ee_position: Vec3::new(x, y, z),
    })
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Tick rate; `None` disables the deadline and the server waits for every action.
    pub rate_hz: Option<f64>,
    pub seed: u64,
    /// Episodes per session; 0 runs until the client disconnects.
    pub episodes: usize,
    /// Sessions to accept before returning; 0 serves forever.
    pub sessions: usize,
}

/// One line of the server session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ServerEvent {
    Connected { session: usize, peer: String },
    Reset { session: usize, episode: u64, seed: u64 },
    Tick {
        session: usize,
        episode: u64,
        step: usize,
        seq: u64,
        delta: JointVector,
        missed: bool,
        reward: f64,
    },
    EpisodeEnd { session: usize, episode: u64, steps: usize, success: bool },
    DecodeError { session: usize, offset: u64, message: String },
    Aborted { session: usize, episode: u64, reason: String },
}

/// Serve sessions on `listener`, reporting every event to `log`.
pub fn serve_env(
    listener: &TcpListener,
    config: &EnvConfig,
    opts: &ServeOptions,
    log: &mut dyn FnMut(&ServerEvent),
) -> Result<(), BridgeError> {
    let mut env = Env::new(config.clone())?;
    let mut episode: u64 = 0;
    let mut session = 0;
    loop {
        let (stream, peer) = listener.accept()?;
        log(&ServerEvent::Connected {
            session,
            peer: peer.to_string(),
        });
        let mut conn = Connection::new(stream)?;
        match run_session(&mut conn, &mut env, config, opts, session, &mut episode, log) {
            Ok(()) => {}
            Err(BridgeError::Closed) | Err(BridgeError::Io(_)) | Err(BridgeError::Protocol(_)) => {
                // The unfinished episode is dropped; the next session starts fresh.
            }
            Err(e) => return Err(e),
        }
        session += 1;
        if opts.sessions > 0 && session >= opts.sessions {
            return Ok(());
        }
    }
}

fn run_session(
    conn: &mut Connection,
    env: &mut Env,
    config: &EnvConfig,
    opts: &ServeOptions,
    session: usize,
    episode: &mut u64,
    log: &mut dyn FnMut(&ServerEvent),
) -> Result<(), BridgeError> {
    let period = opts.rate_hz.map(|hz| Duration::from_secs_f64(1.0 / hz));
    let mut seq = 0u64;
    conn.send(&WireMessage::new(
        seq,
        Payload::Hello(Hello {
            version: PROTOCOL_VERSION,
            actuated: config.action.actuated,
            width: config.camera.width,
            height: config.camera.height,
            rate_hz: opts.rate_hz,
        }),
    ))?;
    let mut served = 0;
    let mut errors_seen = 0;
    while opts.episodes == 0 || served < opts.episodes {
        let seed = derive_seed(opts.seed, BRIDGE_STREAM, *episode);
        log(&ServerEvent::Reset {
            session,
            episode: *episode,
            seed,
        });
        let mut obs = env.reset(seed)?.0;
        let mut reward = 0.0;
        let mut last = [0.0; JOINTS];
        let mut last_seq = None;
        loop {
            seq += 1;
            let tick_start = Instant::now();
            conn.send(&WireMessage::new(
                seq,
                Payload::Observation(observation_msg(&obs, *episode, env.steps(), reward)),
            ))?;
            let deadline = period.map(|p| tick_start + p);
            let mut missed = true;
            loop {
                let got = conn.recv(deadline);
                for e in &conn.decode_errors[errors_seen..] {
                    log(&ServerEvent::DecodeError {
                        session,
                        offset: e.offset,
                        message: e.message.clone(),
                    });
                }
                errors_seen = conn.decode_errors.len();
                let msg = match got {
                    Ok(Received::Timeout) => break,
                    Ok(Received::Message(m)) => m,
                    Err(e) => {
                        log(&ServerEvent::Aborted {
                            session,
                            episode: *episode,
                            reason: e.to_string(),
                        });
                        *episode += 1;
                        return Err(e);
                    }
                };
                if last_seq.is_some_and(|s| msg.seq <= s) {
                    let reason = format!("action seq {} not after {}", msg.seq, last_seq.unwrap_or(0));
                    log(&ServerEvent::Aborted {
                        session,
                        episode: *episode,
                        reason: reason.clone(),
                    });
                    let _ = conn.send(&WireMessage::new(seq + 1, Payload::Error(ErrorMsg { message: reason.clone() })));
                    *episode += 1;
                    return Err(BridgeError::Protocol(reason));
                }
                last_seq = Some(msg.seq);
                match msg.payload {
                    Payload::Action(a) if msg.seq == seq => {
                        last = a.delta;
                        missed = false;
                        break;
                    }
                    // A late answer to an earlier observation; keep waiting.
                    Payload::Action(_) => {}
                    _ => {}
                }
            }
            let action: Vec<f64> = (0..JOINTS)
                .filter(|&j| config.action.actuated[j])
                .map(|j| last[j])
                .collect();
            let out = env.step(&action)?;
            reward = out.reward.total;
            log(&ServerEvent::Tick {
                session,
                episode: *episode,
                step: env.steps(),
                seq,
                delta: last,
                missed,
                reward,
            });
            if out.done {
                seq += 1;
                conn.send(&WireMessage::new(
                    seq,
                    Payload::EpisodeEnd(EpisodeEnd {
                        episode: *episode,
                        steps: env.steps(),
                        reward,
                        success: out.info.success,
                        collided: out.info.collided,
                        truncated: out.info.truncated,
                    }),
                ))?;
                log(&ServerEvent::EpisodeEnd {
                    session,
                    episode: *episode,
                    steps: env.steps(),
                    success: out.info.success,
                });
                break;
            }
            obs = out.observation;
            if let Some(d) = deadline {
                let now = Instant::now();
                if d > now {
                    std::thread::sleep(d - now);
                }
            }
        }
        *episode += 1;
        served += 1;
    }
    Ok(())
}

/// Place policy outputs on the actuated joints; the rest get zero.
pub fn spread_action(actuated: &[bool; JOINTS], action: &[f64]) -> JointVector {
    let mut it = action.iter().copied();
    std::array::from_fn(|j| if actuated[j] { it.next().unwrap_or(0.0) } else { 0.0 })
}

/// Client-side record of one bridged episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClientEpisode {
    pub episode: u64,
    pub actions: Vec<JointVector>,
    pub rewards: Vec<f64>,
    pub success: bool,
    pub steps: usize,
}

/// Connect to `addr`, answer observations with `policy` until `episodes`
/// episodes have ended (0: until the server closes).
pub fn run_policy_client<A: ToSocketAddrs>(
    addr: A,
    policy: &mut dyn Policy,
    episodes: usize,
) -> Result<Vec<ClientEpisode>, BridgeError> {
    let mut conn = Connection::connect(addr)?;
    let hello = match conn.recv(None)? {
        Received::Message(WireMessage {
            payload: Payload::Hello(h),
            ..
        }) => h,
        Received::Message(m) => return Err(BridgeError::Protocol(format!("expected hello, got {:?}", m.payload))),
        Received::Timeout => return Err(BridgeError::Protocol("no hello".into())),
    };
    if hello.version != PROTOCOL_VERSION {
        return Err(BridgeError::Protocol(format!("server speaks version {}", hello.version)));
    }
    let mut last_seq = 0;
    let mut done = Vec::new();
    let mut current: Option<ClientEpisode> = None;
    loop {
        let msg = match conn.recv(None) {
            Ok(Received::Message(m)) => m,
            Ok(Received::Timeout) => continue,
            Err(BridgeError::Closed) if episodes == 0 => return Ok(done),
            Err(e) => return Err(e),
        };
        if msg.seq <= last_seq {
            return Err(BridgeError::Protocol(format!(
                "server seq {} not after {last_seq}",
                msg.seq
            )));
        }
        last_seq = msg.seq;
        match msg.payload {
            Payload::Observation(o) => {
                let ep = current.get_or_insert_with(|| ClientEpisode {
                    episode: o.episode,
                    ..Default::default()
                });
                if o.step > 0 {
                    ep.rewards.push(o.reward);
                }
                let obs = decode_observation(&o)?;
                let delta = spread_action(&hello.actuated, &policy.act(&obs));
                ep.actions.push(delta);
                conn.send(&WireMessage::new(msg.seq, Payload::Action(ActionMsg { delta })))?;
            }
            Payload::EpisodeEnd(end) => {
                let mut ep = current.take().unwrap_or_default();
                ep.rewards.push(end.reward);
                ep.success = end.success;
                ep.steps = end.steps;
                ep.episode = end.episode;
                done.push(ep);
                if episodes > 0 && done.len() >= episodes {
                    return Ok(done);
                }
            }
            Payload::Error(e) => return Err(BridgeError::Protocol(e.message)),
            other => return Err(BridgeError::Protocol(format!("unexpected {other:?}"))),
        }
    }
}

/// The same loop as a bridged session, run in-process.
pub fn run_in_process(
    config: &EnvConfig,
    policy: &mut dyn Policy,
    seed: u64,
    episodes: usize,
) -> Result<Vec<ClientEpisode>, BridgeError> {
    let mut env = Env::new(config.clone())?;
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes as u64 {
        let mut obs = env.reset(derive_seed(seed, BRIDGE_STREAM, e))?.0;
        let mut ep = ClientEpisode {
            episode: e,
            ..Default::default()
        };
        loop {
            let action = policy.act(&obs);
            ep.actions.push(spread_action(&config.action.actuated, &action));
            let step = env.step(&action)?;
            ep.rewards.push(step.reward.total);
            if step.done {
                ep.success = step.info.success;
                ep.steps = env.steps();
                break;
            }
            obs = step.observation;
        }
        out.push(ep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_round_trip() {
        let m = WireMessage::new(
            0,
            Payload::Hello(Hello {
                version: 1,
                actuated: [true, true, true, false, false, false],
                width: 32,
                height: 32,
                rate_hz: Some(1.0),
            }),
        );
        let line = m.encode();
        assert_eq!(*line.last().unwrap(), b'\n');
        assert_eq!(decode_line(&line[..line.len() - 1], 0).unwrap(), m);
    }

    #[test]
    fn action_round_trips_exactly() {
        let m = WireMessage::new(
            7,
            Payload::Action(ActionMsg {
                delta: [1.0, -1.0, 0.0, 0.0, 0.0, 0.0],
            }),
        );
        let text = String::from_utf8(m.encode()).unwrap();
        assert!(text.contains("\"type\":\"action\""), "{text}");
        assert!(text.contains("\"seq\":7"), "{text}");
        let back = decode_line(text.trim_end().as_bytes(), 0).unwrap();
        assert_eq!(back, m);
        let awkward = WireMessage::new(
            8,
            Payload::Action(ActionMsg {
                delta: [0.1 + 0.2, -1e-300, 5e-324, 0.7, f64::MAX, 1.0 / 3.0],
            }),
        );
        let line = awkward.encode();
        assert_eq!(decode_line(&line[..line.len() - 1], 0).unwrap(), awkward);
    }

    #[test]
    fn truncated_line_reports_offset_and_resyncs() {
        let good = WireMessage::new(
            3,
            Payload::Error(ErrorMsg {
                message: "x".into(),
            }),
        )
        .encode();
        let mut stream = good.clone();
        let cut = &good[..good.len() / 2];
        stream.extend_from_slice(cut);
        stream.push(b'\n');
        stream.extend_from_slice(&good);
        let mut d = LineDecoder::new();
        d.push(&stream);
        assert!(d.next_message().unwrap().is_ok());
        let err = d.next_message().unwrap().unwrap_err();
        let bad_start = good.len() as u64;
        assert!(err.offset >= bad_start && err.offset <= bad_start + cut.len() as u64, "{err:?}");
        assert!(d.next_message().unwrap().is_ok());
        assert!(d.next_message().is_none());
    }

    #[test]
    fn partial_lines_wait_for_newline() {
        let line = WireMessage::new(1, Payload::Action(ActionMsg { delta: [0.5; 6] })).encode();
        let mut d = LineDecoder::new();
        for b in &line[..line.len() - 1] {
            d.push(std::slice::from_ref(b));
            assert!(d.next_message().is_none());
        }
        d.push(b"\n");
        assert!(d.next_message().unwrap().is_ok());
    }

    #[test]
    fn error_offset_points_into_line() {
        let line = br#"{"seq":1,"type":"action","payload":{"delta":[1,2,x]}}"#;
        let x = line.iter().position(|&b| b == b'x').unwrap() as u64;
        let err = decode_line(line, 100).unwrap_err();
        assert_eq!(err.offset, 100 + x);
    }
}
