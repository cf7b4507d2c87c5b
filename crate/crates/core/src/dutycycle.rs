//! Duty-cycled speech collection, simulated one minute at a time.
//!
//! The microphone probes for one minute at the start of every four-minute
//! cycle. A probe that hears conversation turns into a recording that runs
//! until voice activity stops, at which point the segment is buffered.
//! Buffered segments are only processed (voice filter, voice re-check,
//! language check, speech recognition) on a minute when the device is idle
//! and charging. Audio models are replaced by [`Detectors`] oracles.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CYCLE_MINUTES: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DutyPhase {
    Sleeping,
    Probing,
    Recording,
}

/// Inclusive minute range of recorded audio. `start > end` is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u32,
    pub end: u32,
}

impl Segment {
    pub fn is_empty(&self) -> bool {
        self.start > self.end
    }

    pub fn minutes(&self) -> impl Iterator<Item = u32> {
        self.start..=self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyState {
    /// Phase during the most recently simulated minute.
    pub phase: DutyPhase,
    pub minute_in_cycle: u32,
    /// Start minute of the recording in progress.
    pub open_segment: Option<u32>,
    pub buffered_segments: Vec<Segment>,
}

impl Default for DutyState {
    fn default() -> Self {
        DutyState {
            phase: DutyPhase::Sleeping,
            minute_in_cycle: 0,
            open_segment: None,
            buffered_segments: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteFlags {
    pub minute: u32,
    pub conversation: bool,
    pub idle: bool,
    pub charging: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum Action {
    Probe { minute: u32 },
    Record { minute: u32 },
    Buffer { segment: Segment },
}

type Fn1<A, B> = Box<dyn Fn(A) -> B + Send + Sync>;

/// Pluggable stand-ins for the audio models.
pub struct Detectors {
    pub vad: Fn1<u32, bool>,
    pub voice_filter: Fn1<Segment, Segment>,
    pub language_id: Fn1<Segment, String>,
    pub asr: Fn1<Segment, Vec<String>>,
}

impl Detectors {
    /// Oracles read off a timeline: voice activity is the conversation flag,
    /// the filter is the identity, every segment is in `language`, and
    /// recognition yields one `speech` token per voiced minute.
    pub fn from_timeline(timeline: &[MinuteFlags], language: &str) -> Self {
        let voiced: Vec<bool> = timeline.iter().map(|f| f.conversation).collect();
        let voiced_for_asr = voiced.clone();
        let language = language.to_string();
        Detectors {
            vad: Box::new(move |m| voiced.get(m as usize).copied().unwrap_or(false)),
            voice_filter: Box::new(|s| s),
            language_id: Box::new(move |_| language.clone()),
            asr: Box::new(move |s: Segment| {
                s.minutes()
                    .filter(|&m| voiced_for_asr.get(m as usize).copied().unwrap_or(false))
                    .map(|_| "speech".to_string())
                    .collect()
            }),
        }
    }

    fn segment_has_voice(&self, seg: Segment) -> bool {
        !seg.is_empty() && seg.minutes().any(|m| (self.vad)(m))
    }
}

/// Advances the collector by one minute.
pub fn step(state: &DutyState, flags: &MinuteFlags, detectors: &Detectors) -> (DutyState, Vec<Action>) {
    let t = flags.minute;
    let mut next = state.clone();
    next.minute_in_cycle = t % CYCLE_MINUTES;
    let mut actions = Vec::new();
    if let Some(start) = state.open_segment {
        next.phase = DutyPhase::Recording;
        actions.push(Action::Record { minute: t });
        if !(detectors.vad)(t) {
            let segment = Segment { start, end: t };
            next.open_segment = None;
            next.buffered_segments.push(segment);
            actions.push(Action::Buffer { segment });
        }
    } else if next.minute_in_cycle == 0 {
        next.phase = DutyPhase::Probing;
        actions.push(Action::Probe { minute: t });
        if (detectors.vad)(t) {
            next.open_segment = Some(t);
        }
    } else {
        next.phase = DutyPhase::Sleeping;
    }
    (next, actions)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SegmentOutcome {
    Accepted { tokens: Vec<String> },
    NoVoice,
    WrongLanguage { language: String },
}

/// Filters, re-checks and transcribes each segment; only segments in the
/// user's language are accepted.
pub fn process_segments(segments: &[Segment], detectors: &Detectors, user_language: &str) -> Vec<SegmentOutcome> {
    segments
        .iter()
        .map(|&seg| {
            let filtered = (detectors.voice_filter)(seg);
            if !detectors.segment_has_voice(filtered) {
                return SegmentOutcome::NoVoice;
            }
            let language = (detectors.language_id)(filtered);
            if language != user_language {
                return SegmentOutcome::WrongLanguage { language };
            }
            SegmentOutcome::Accepted {
                tokens: (detectors.asr)(filtered),
            }
        })
        .collect()
}

/// Token lists of the accepted segments.
pub fn process_buffer(segments: &[Segment], detectors: &Detectors, user_language: &str) -> Vec<Vec<String>> {
    process_segments(segments, detectors, user_language)
        .into_iter()
        .filter_map(|o| match o {
            SegmentOutcome::Accepted { tokens } => Some(tokens),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedSegment {
    pub segment: Segment,
    pub buffered_at: u32,
    pub processed_at: u32,
    #[serde(flatten)]
    pub outcome: SegmentOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionTrace {
    pub minutes: usize,
    pub recorded_minutes: Vec<u32>,
    pub probe_minutes: usize,
    pub extension_minutes: usize,
    pub buffered_segments: usize,
    pub processed: Vec<ProcessedSegment>,
    /// Segments still waiting for an idle, charging device at the end.
    pub pending: Vec<Segment>,
    pub accepted_tokens: Vec<Vec<String>>,
}

/// Runs the collector over a whole timeline. A recording still open when
/// the timeline ends is buffered at its last minute.
pub fn simulate(timeline: &[MinuteFlags], detectors: &Detectors, user_language: &str) -> CollectionTrace {
    let mut state = DutyState::default();
    let mut trace = CollectionTrace {
        minutes: timeline.len(),
        ..CollectionTrace::default()
    };
    let mut pending: Vec<(Segment, u32)> = Vec::new();
    for flags in timeline {
        let (next, actions) = step(&state, flags, detectors);
        for a in actions {
            match a {
                Action::Probe { minute } => {
                    trace.probe_minutes += 1;
                    trace.recorded_minutes.push(minute);
                }
                Action::Record { minute } => {
                    trace.extension_minutes += 1;
                    trace.recorded_minutes.push(minute);
                }
                Action::Buffer { segment } => {
                    trace.buffered_segments += 1;
                    pending.push((segment, flags.minute));
                }
            }
        }
        state = next;
        if flags.idle && flags.charging && !pending.is_empty() {
            let segments: Vec<Segment> = pending.iter().map(|(s, _)| *s).collect();
            let outcomes = process_segments(&segments, detectors, user_language);
            for ((segment, buffered_at), outcome) in pending.drain(..).zip(outcomes) {
                if let SegmentOutcome::Accepted { tokens } = &outcome {
                    trace.accepted_tokens.push(tokens.clone());
                }
                trace.processed.push(ProcessedSegment {
                    segment,
                    buffered_at,
                    processed_at: flags.minute,
                    outcome,
                });
            }
        }
    }
    if let (Some(start), Some(last)) = (state.open_segment, timeline.last()) {
        trace.buffered_segments += 1;
        pending.push((Segment { start, end: last.minute }, last.minute));
    }
    trace.pending = pending.into_iter().map(|(s, _)| s).collect();
    trace
}

fn parse_flag(value: &str, line: usize) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" | "" => Ok(false),
        other => Err(Error::parse("timeline", line, format!("bad flag `{other}`"))),
    }
}

/// Reads a `minute,conversation,idle,charging` CSV with a header row.
/// Minutes must be consecutive from zero.
pub fn read_timeline_csv<R: Read>(reader: R) -> Result<Vec<MinuteFlags>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() < 4 {
            return Err(Error::parse("timeline", line, "expected 4 columns"));
        }
        let minute: u32 = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse("timeline", line, "bad minute"))?;
        if minute as usize != out.len() {
            return Err(Error::parse("timeline", line, "minutes must be consecutive from 0"));
        }
        out.push(MinuteFlags {
            minute,
            conversation: parse_flag(&rec[1], line)?,
            idle: parse_flag(&rec[2], line)?,
            charging: parse_flag(&rec[3], line)?,
        });
    }
    Ok(out)
}

/// A timeline of `len` minutes with conversation over `talk` (inclusive
/// ranges) and the device idle and charging over `charge`.
pub fn timeline(len: u32, talk: &[(u32, u32)], charge: &[(u32, u32)]) -> Vec<MinuteFlags> {
    let within = |m: u32, spans: &[(u32, u32)]| spans.iter().any(|&(a, b)| (a..=b).contains(&m));
    (0..len)
        .map(|m| MinuteFlags {
            minute: m,
            conversation: within(m, talk),
            idle: within(m, charge),
            charging: within(m, charge),
        })
        .collect()
}
