// SPDX-License-Identifier: Apache-2.0

//! Discrete-event model of vehicles exchanging feature messages over a
//! bandwidth- and latency-limited link, once per second.
//!
//! Links are store-and-forward: a message occupies the link for
//! `bytes * 8 / bandwidth` seconds and then propagates for `delay`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::ChannelMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    /// Bits per second.
    pub bandwidth: f64,
    /// One-way propagation delay, seconds.
    pub delay: f64,
    /// Probability that a message is lost.
    pub loss: f64,
}

impl LinkModel {
    pub fn new(bandwidth: f64, delay: f64, loss: f64) -> Result<Self> {
        let link = Self {
            bandwidth,
            delay,
            loss,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::Config(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if !(self.delay.is_finite() && self.delay >= 0.0) {
            return Err(Error::Config(format!("delay must be non-negative, got {}", self.delay)));
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(Error::Config(format!("loss must be in [0, 1), got {}", self.loss)));
        }
        Ok(())
    }

    /// 27 Mb/s, 2 ms.
    pub fn dsrc() -> Self {
        Self {
            bandwidth: 27e6,
            delay: 0.002,
            loss: 0.0,
        }
    }

    /// 6 Mb/s, 2 ms.
    pub fn dsrc_low() -> Self {
        Self {
            bandwidth: 6e6,
            ..Self::dsrc()
        }
    }

    /// 1 Gb/s, 1 ms.
    pub fn mmwave() -> Self {
        Self {
            bandwidth: 1e9,
            delay: 0.001,
            loss: 0.0,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "dsrc" => Ok(Self::dsrc()),
            "dsrc-low" => Ok(Self::dsrc_low()),
            "mmwave" => Ok(Self::mmwave()),
            other => Err(Error::Config(format!(
                "unknown link profile {other:?} (expected dsrc, dsrc-low or mmwave)"
            ))),
        }
    }
}

/// Seconds to push `bytes` through `link` and propagate them.
pub fn transmit_time(link: &LinkModel, bytes: u64) -> f64 {
    bytes as f64 * 8.0 / link.bandwidth + link.delay
}

/// Per-stage processing times, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTimings {
    pub encode: f64,
    pub pack: f64,
    pub fuse: f64,
    pub detect: f64,
}

impl Default for StageTimings {
    /// Fixed so simulated logs are reproducible; roughly a single
    /// desktop GPU running a voxel detector.
    fn default() -> Self {
        Self {
            encode: 0.300,
            pack: 0.020,
            fuse: 0.015,
            detect: 0.450,
        }
    }
}

impl StageTimings {
    pub fn validate(&self) -> Result<()> {
        if [self.encode, self.pack, self.fuse, self.detect]
            .iter()
            .all(|t| t.is_finite() && *t >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::Config(format!("stage timings must be non-negative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Ship the raw point cloud.
    Raw,
    /// Ship voxel features.
    Vff,
    /// Ship bird's-eye-view feature planes.
    Sff,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Vff => "vff",
            Self::Sff => "sff",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "vff" => Ok(Self::Vff),
            "sff" => Ok(Self::Sff),
            other => Err(Error::Config(format!("unknown strategy {other:?} (expected raw, vff or sff)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    FrameCaptured,
    SendStart,
    Arrival,
    Drop,
    FusionDone,
    DetectionDone,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FrameCaptured => "frame_captured",
            Self::SendStart => "send_start",
            Self::Arrival => "arrival",
            Self::Drop => "drop",
            Self::FusionDone => "fusion_done",
            Self::DetectionDone => "detection_done",
        }
    }

    fn stage(self) -> &'static str {
        match self {
            Self::FrameCaptured => "capture",
            Self::SendStart => "transmit",
            Self::Arrival | Self::Drop => "receive",
            Self::FusionDone => "fuse",
            Self::DetectionDone => "detect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time_us: u64,
    pub actor: usize,
    pub kind: EventKind,
    pub bytes: u64,
    pub round: u32,
}

/// One vehicle sending to the receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Sender {
    pub name: String,
    /// Bytes on the wire per exchange.
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub receiver: String,
    pub senders: Vec<Sender>,
    pub strategy: Strategy,
    pub link: LinkModel,
    pub timings: StageTimings,
    /// Seconds; one exchange round per whole second.
    pub duration: f64,
    pub seed: u64,
}

/// Timestamps of one sender's message in one round, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exchange {
    pub round: u32,
    pub sender: usize,
    pub captured: f64,
    pub send_start: f64,
    /// `None` when the message was lost.
    pub arrival: Option<f64>,
    pub fused: Option<f64>,
    pub detected: f64,
}

impl Exchange {
    pub fn latency(&self) -> f64 {
        self.detected - self.captured
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    /// Actor names; index 0 is the receiver.
    pub actors: Vec<String>,
    pub events: Vec<SimEvent>,
    pub exchanges: Vec<Exchange>,
}

impl SimLog {
    pub fn rounds(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::FrameCaptured && e.actor == 0)
            .count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time_us", "actor", "kind", "bytes", "stage"])?;
        for e in &self.events {
            out.write_record([
                e.time_us.to_string(),
                self.actors[e.actor].clone(),
                e.kind.name().to_string(),
                e.bytes.to_string(),
                e.kind.stage().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn micros(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Pending {
    time_us: u64,
    actor: usize,
    kind: EventKind,
    seq: u64,
    round: u32,
    bytes: u64,
}

/// Runs `floor(duration)` exchange rounds. Each sender captures at the
/// start of the round, prepares its message (encode + pack, or pack alone
/// for raw clouds) and sends it. The receiver fuses arrivals one at a time
/// and runs detection once every sender of the round is accounted for; a
/// raw-cloud receiver encodes the merged cloud first.
pub fn run_scenario(s: &Scenario) -> Result<SimLog> {
    s.link.validate()?;
    s.timings.validate()?;
    if !(s.duration.is_finite() && s.duration > 0.0) {
        return Err(Error::Config(format!("duration must be positive, got {}", s.duration)));
    }
    let mut actors = vec![s.receiver.clone()];
    for snd in &s.senders {
        if actors.contains(&snd.name) {
            return Err(Error::Config(format!("duplicate actor {:?}", snd.name)));
        }
        actors.push(snd.name.clone());
    }
    let t = &s.timings;
    let prepare = match s.strategy {
        Strategy::Raw => t.pack,
        _ => t.encode + t.pack,
    };
    let post = match s.strategy {
        Strategy::Raw => t.encode + t.detect,
        _ => t.detect,
    };
    let rounds = s.duration.floor() as u32;
    let n = s.senders.len();

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |q: &mut BinaryHeap<Reverse<Pending>>, time_us, actor, kind, round, bytes| {
        seq += 1;
        q.push(Reverse(Pending {
            time_us,
            actor,
            kind,
            seq,
            round,
            bytes,
        }));
    };
    for r in 0..rounds {
        let t0 = r as u64 * 1_000_000;
        for actor in 0..=n {
            push(&mut queue, t0, actor, EventKind::FrameCaptured, r, 0);
        }
    }

    let mut events = Vec::new();
    let mut exchanges: Vec<Exchange> = Vec::new();
    let mut receiver_free = 0u64;
    let mut outstanding = vec![n; rounds as usize];
    let mut last_fused = vec![0u64; rounds as usize];
    let mut now = 0u64;
    while let Some(Reverse(ev)) = queue.pop() {
        debug_assert!(ev.time_us >= now, "event scheduled in the past");
        now = ev.time_us;
        events.push(SimEvent {
            time_us: ev.time_us,
            actor: ev.actor,
            kind: ev.kind,
            bytes: ev.bytes,
            round: ev.round,
        });
        let round = ev.round as usize;
        match ev.kind {
            EventKind::FrameCaptured if ev.actor == 0 => {
                last_fused[round] = now;
                if n == 0 {
                    push(&mut queue, now + micros(post), 0, EventKind::DetectionDone, ev.round, 0);
                }
            }
            EventKind::FrameCaptured => {
                let bytes = s.senders[ev.actor - 1].payload_bytes;
                push(&mut queue, now + micros(prepare), ev.actor, EventKind::SendStart, ev.round, bytes);
                exchanges.push(Exchange {
                    round: ev.round,
                    sender: ev.actor,
                    captured: now as f64 / 1e6,
                    send_start: 0.0,
                    arrival: None,
                    fused: None,
                    detected: 0.0,
                });
            }
            EventKind::SendStart => {
                let lost = s.link.loss > 0.0 && rng.gen::<f64>() < s.link.loss;
                let kind = if lost { EventKind::Drop } else { EventKind::Arrival };
                let at = now + micros(transmit_time(&s.link, ev.bytes));
                push(&mut queue, at, ev.actor, kind, ev.round, ev.bytes);
                if let Some(x) = exchanges
                    .iter_mut()
                    .find(|x| x.round == ev.round && x.sender == ev.actor)
                {
                    x.send_start = now as f64 / 1e6;
                }
            }
            EventKind::Arrival => {
                let start = now.max(receiver_free);
                receiver_free = start + micros(t.fuse);
                push(&mut queue, receiver_free, ev.actor, EventKind::FusionDone, ev.round, 0);
                if let Some(x) = exchanges
                    .iter_mut()
                    .find(|x| x.round == ev.round && x.sender == ev.actor)
                {
                    x.arrival = Some(now as f64 / 1e6);
                }
            }
            EventKind::Drop | EventKind::FusionDone => {
                if ev.kind == EventKind::FusionDone {
                    last_fused[round] = last_fused[round].max(now);
                    if let Some(x) = exchanges
                        .iter_mut()
                        .find(|x| x.round == ev.round && x.sender == ev.actor)
                    {
                        x.fused = Some(now as f64 / 1e6);
                    }
                }
                outstanding[round] -= 1;
                if outstanding[round] == 0 {
                    let at = last_fused[round].max(now) + micros(post);
                    push(&mut queue, at, 0, EventKind::DetectionDone, ev.round, 0);
                }
            }
            EventKind::DetectionDone => {
                for x in exchanges.iter_mut().filter(|x| x.round == ev.round) {
                    x.detected = now as f64 / 1e6;
                }
            }
        }
    }
    Ok(SimLog {
        actors,
        events,
        exchanges,
    })
}

/// Payload sizes feeding [`latency_budget`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadStats {
    /// Bytes on the wire for the chosen strategy.
    pub wire_bytes: u64,
    /// Detection result returned by an edge node.
    pub result_bytes: u64,
}

impl PayloadStats {
    pub const RESULT_BYTES: u64 = 1024;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyBreakdown {
    pub label: String,
    /// `(stage, seconds)` in pipeline order.
    pub stages: Vec<(&'static str, f64)>,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn stage(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.0 == name).map(|s| s.1)
    }
}

/// Closed-form end-to-end time of one exchange between two vehicles.
pub fn latency_budget(
    strategy: Strategy,
    mask: ChannelMask,
    stats: &PayloadStats,
    link: &LinkModel,
    timings: &StageTimings,
) -> LatencyBreakdown {
    let tx = transmit_time(link, stats.wire_bytes);
    let stages = match strategy {
        Strategy::Raw => vec![
            ("pack", timings.pack),
            ("transmit", tx),
            ("fuse", timings.fuse),
            ("encode", timings.encode),
            ("detect", timings.detect),
        ],
        Strategy::Vff | Strategy::Sff => vec![
            ("encode", timings.encode),
            ("pack", timings.pack),
            ("transmit", tx),
            ("fuse", timings.fuse),
            ("detect", timings.detect),
        ],
    };
    let label = match strategy {
        Strategy::Sff => format!("sff[{mask}]"),
        other => other.to_string(),
    };
    LatencyBreakdown { label, stages }
}

/// Vehicle-side cost when an edge node fuses and detects: pack, upload,
/// and download of the detection result.
pub fn edge_budget(stats: &PayloadStats, link: &LinkModel, timings: &StageTimings) -> LatencyBreakdown {
    LatencyBreakdown {
        label: "edge".into(),
        stages: vec![
            ("pack", timings.pack),
            ("transmit", transmit_time(link, stats.wire_bytes)),
            ("result", transmit_time(link, stats.result_bytes)),
        ],
    }
}
