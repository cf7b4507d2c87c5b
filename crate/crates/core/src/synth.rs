//! Synthetic cohorts with a controllable, context-localized text signal.
//!
//! Each user has a latent daily state `m_d ∈ [0, 1]`. Self-reported labels
//! are affine in `m_d` plus noise and the PHQ-9 score is a monotone
//! function of the user's mean state. Text is drawn from two disjoint word
//! pools. Inside the designated signal context the share of signal words
//! rises with `m_d`; everywhere else words are uniform over both pools.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::call::MemberKey;
use crate::context::{
    assign_contexts, leader_clusters, ContextLabel, Coordinates, GeoFix, Motion, Source, UserProfile,
};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEvent {
    pub user_id: String,
    pub timestamp: i64,
    pub source: Source,
    pub tokens: Vec<String>,
    pub geo: GeoFix,
    pub motion: Motion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_id: Option<String>,
}

impl TextEvent {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Config(format!("event of `{}` has no tokens", self.user_id)));
        }
        if self.source == Source::Speech && self.app_id.is_some() {
            return Err(Error::Config(format!("speech event of `{}` carries an app id", self.user_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyLabels {
    pub stress: f64,
    pub anxiety: f64,
    pub mood: f64,
}

/// Device-log fields that are generated directly rather than derived from
/// the event stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceLog {
    pub stationary_hours: f64,
    pub sleep_end_hour: Option<f64>,
    pub location_hours: f64,
    pub unlock_minutes: f64,
    pub unlock_count: u32,
}

pub const DEFAULT_SLEEP_END_HOUR: f64 = 7.0;

pub const NONTEXT_FEATURES: [&str; 7] = [
    "stationary_time",
    "conversation_count",
    "sleep_end_time",
    "location_duration",
    "unlock_duration",
    "unlock_counts",
    "places_visited",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub user_id: String,
    pub profile: UserProfile,
    /// UTC timestamp of local midnight on day 0.
    pub start_timestamp: i64,
    pub days: usize,
    pub phq9: u8,
    pub daily_labels: Vec<DailyLabels>,
    pub device_logs: Vec<DeviceLog>,
    pub events: Vec<TextEvent>,
}

impl ClientDataset {
    /// Day index of a timestamp relative to this user's day 0; may fall
    /// outside `0..days`.
    pub fn day_of(&self, timestamp: i64) -> i64 {
        (timestamp - self.start_timestamp).div_euclid(86_400)
    }

    pub fn events_on(&self, day: usize) -> impl Iterator<Item = &TextEvent> {
        self.events
            .iter()
            .filter(move |e| self.day_of(e.timestamp) == day as i64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Config(format!("user `{}` has no days", self.user_id)));
        }
        if self.phq9 > 27 {
            return Err(Error::Config(format!("user `{}` has PHQ-9 {}", self.user_id, self.phq9)));
        }
        if self.daily_labels.len() != self.days || self.device_logs.len() != self.days {
            return Err(Error::Config(format!(
                "user `{}` needs {} daily labels and device logs",
                self.user_id, self.days
            )));
        }
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        if !self
            .daily_labels
            .iter()
            .all(|l| in_range(l.stress) && in_range(l.anxiety) && in_range(l.mood))
        {
            return Err(Error::Config(format!("user `{}` has labels outside 0..=100", self.user_id)));
        }
        self.profile.validate()?;
        self.events.iter().try_for_each(TextEvent::validate)
    }

    pub fn word_count(&self, source: Source) -> usize {
        self.events
            .iter()
            .filter(|e| e.source == source)
            .map(|e| e.tokens.len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub num_users: usize,
    pub days: usize,
    pub speech_words_per_day: f64,
    pub keyboard_words_per_day: f64,
    pub signal_context: Option<MemberKey>,
    pub signal_strength: f64,
    pub signal_words: Vec<String>,
    pub noise_words: Vec<String>,
    pub rng_seed: u64,
}

/// Share of signal words in the signal context when `m_d = 1` and the
/// strength is 1.
pub const MAX_SIGNAL_SHARE: f64 = 0.3;

/// Epoch of 2023-03-06 00:00 UTC, the first generated day.
const START_EPOCH: i64 = 1_678_060_800;

const OTHER_APPS: [&str; 6] = ["notes", "browser", "search", "calendar", "maps", "shopping"];
const COMM_APPS: [&str; 3] = ["whatsapp", "messenger", "telegram"];

pub fn default_signal_words() -> Vec<String> {
    [
        "tired", "alone", "hopeless", "sad", "empty", "worthless", "exhausted", "cry", "numb",
        "guilty", "restless", "lonely", "worried", "afraid", "hurt", "broken", "sleepless",
        "useless", "stuck", "drained", "miserable", "nervous", "gloomy", "heavy",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Consonant-vowel pseudo-words: `count` of them, four letters each.
pub fn default_noise_words(count: usize) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables: Vec<String> = C
        .iter()
        .flat_map(|&c| V.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .take(count)
        .collect()
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            num_users: 46,
            days: 10,
            speech_words_per_day: 13_492.0 / 10.0,
            keyboard_words_per_day: 4_521.0 / 10.0,
            signal_context: Some(MemberKey::new(Source::Keyboard, ContextLabel::TimeNight)),
            signal_strength: 0.8,
            signal_words: default_signal_words(),
            noise_words: default_noise_words(600),
            rng_seed: 17,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.days == 0 {
            return Err(Error::Config("cohort needs at least one user and one day".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config("signal_strength must lie in [0, 1]".into()));
        }
        if self.signal_words.is_empty() || self.noise_words.is_empty() {
            return Err(Error::Config("word pools must be nonempty".into()));
        }
        let signal: BTreeSet<&String> = self.signal_words.iter().collect();
        if self.noise_words.iter().any(|w| signal.contains(w)) {
            return Err(Error::Config("signal and noise word pools overlap".into()));
        }
        if !(self.speech_words_per_day >= 0.0 && self.keyboard_words_per_day >= 0.0) {
            return Err(Error::Config("word rates must be non-negative".into()));
        }
        Ok(())
    }

    fn base_signal_share(&self) -> f64 {
        let s = self.signal_words.len() as f64;
        s / (s + self.noise_words.len() as f64)
    }
}

/// Per-user habits that decide where and when text is produced.
struct Habits {
    p_night: f64,
    p_home: f64,
    p_moving: f64,
    p_comm: f64,
    volume: [f64; 2],
    home: Coordinates,
    places: Vec<Coordinates>,
}

fn offset_by_meters(c: Coordinates, north_m: f64, east_m: f64) -> Coordinates {
    let dlat = north_m / 111_195.0;
    let dlon = east_m / (111_195.0 * c.lat.to_radians().cos());
    Coordinates {
        lat: c.lat + dlat,
        lon: c.lon + dlon,
    }
}

fn draw_habits(rng: &mut ChaCha8Rng) -> Habits {
    let home = Coordinates {
        lat: rng.random_range(-50.0..50.0),
        lon: rng.random_range(-170.0..170.0),
    };
    let places = (0..3)
        .map(|_| {
            let dist = rng.random_range(2_000.0..10_000.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            offset_by_meters(home, dist * angle.cos(), dist * angle.sin())
        })
        .collect();
    Habits {
        p_night: rng.random_range(0.25..0.6),
        p_home: rng.random_range(0.3..0.8),
        p_moving: rng.random_range(0.1..0.4),
        p_comm: rng.random_range(0.3..0.8),
        volume: [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)],
        home,
        places,
    }
}

fn clamp_label(v: f64) -> f64 {
    v.clamp(0.0, 100.0)
}

fn phq9_from_mean_state(mean: f64) -> u8 {
    (27.0 * mean * mean).round().clamp(0.0, 27.0) as u8
}

fn generate_user(spec: &CohortSpec, index: usize) -> ClientDataset {
    let mut rng = seed::rng(seed::derive(&[spec.rng_seed, index as u64]));
    let user_id = format!("u{index:03}");
    let habits = draw_habits(&mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let center: f64 = rng.random_range(0.05..0.95);
    let states: Vec<f64> = (0..spec.days)
        .map(|_| (center + 0.12 * noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    let mean_state = states.iter().sum::<f64>() / states.len() as f64;

    let daily_labels = states
        .iter()
        .map(|&m| DailyLabels {
            stress: clamp_label(20.0 + 60.0 * m + 8.0 * noise.sample(&mut rng)),
            anxiety: clamp_label(15.0 + 55.0 * m + 8.0 * noise.sample(&mut rng)),
            mood: clamp_label(80.0 - 55.0 * m + 8.0 * noise.sample(&mut rng)),
        })
        .collect();

    let device_logs = (0..spec.days)
        .map(|_| DeviceLog {
            stationary_hours: rng.random_range(8.0..16.0),
            sleep_end_hour: Some((7.5 + 0.8 * noise.sample(&mut rng)).clamp(4.0, 12.0)),
            location_hours: rng.random_range(8.0..16.0),
            unlock_minutes: rng.random_range(60.0..300.0),
            unlock_count: rng.random_range(30..150),
        })
        .collect();

    let profile = UserProfile::default();
    let mut events = Vec::new();
    let start = START_EPOCH;
    for (day, &m) in states.iter().enumerate() {
        for source in Source::ALL {
            let (rate, volume) = match source {
                Source::Speech => (spec.speech_words_per_day, habits.volume[0]),
                Source::Keyboard => (spec.keyboard_words_per_day, habits.volume[1]),
            };
            let budget = (rate * volume * rng.random_range(0.7..1.3)).round() as usize;
            let mut produced = 0;
            while produced < budget {
                let len = match source {
                    Source::Speech => rng.random_range(30..=90),
                    Source::Keyboard => rng.random_range(5..=40),
                }
                .min(budget - produced);
                let mut event = draw_event(&mut rng, &habits, &user_id, source, start, day);
                let labels = assign_contexts_with_home(&event, &profile, habits.home);
                let in_signal = spec
                    .signal_context
                    .is_some_and(|k| k.source == source && labels.contains(&k.label));
                let share = if in_signal {
                    (1.0 - spec.signal_strength) * spec.base_signal_share()
                        + spec.signal_strength * MAX_SIGNAL_SHARE * m
                } else {
                    spec.base_signal_share()
                };
                event.tokens = (0..len)
                    .map(|_| {
                        let pool = if rng.random_bool(share) {
                            &spec.signal_words
                        } else {
                            &spec.noise_words
                        };
                        pool[rng.random_range(0..pool.len())].clone()
                    })
                    .collect();
                produced += len;
                events.push(event);
            }
        }
    }
    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.source.cmp(&b.source)));

    ClientDataset {
        user_id,
        profile,
        start_timestamp: start,
        days: spec.days,
        phq9: phq9_from_mean_state(mean_state),
        daily_labels,
        device_logs,
        events,
    }
}

fn assign_contexts_with_home(event: &TextEvent, profile: &UserProfile, home: Coordinates) -> Vec<ContextLabel> {
    let with_home = UserProfile {
        home_center: Some(home),
        ..profile.clone()
    };
    assign_contexts(event, &with_home)
}

fn draw_event(
    rng: &mut ChaCha8Rng,
    habits: &Habits,
    user_id: &str,
    source: Source,
    start: i64,
    day: usize,
) -> TextEvent {
    let night = rng.random_bool(habits.p_night);
    // night covers 18:00-09:00, sampled inside this calendar day
    let second_of_day = if night {
        let s = rng.random_range(0..15 * 3_600);
        if s < 6 * 3_600 {
            18 * 3_600 + s
        } else {
            s - 6 * 3_600
        }
    } else {
        rng.random_range(9 * 3_600..18 * 3_600)
    };
    let timestamp = start + day as i64 * 86_400 + second_of_day;
    let base = if rng.random_bool(habits.p_home) {
        habits.home
    } else {
        habits.places[rng.random_range(0..habits.places.len())]
    };
    let jitter = offset_by_meters(base, rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
    let motion = if rng.random_bool(habits.p_moving) {
        Motion::Moving
    } else {
        Motion::Stationary
    };
    let app_id = match source {
        Source::Speech => None,
        Source::Keyboard if rng.random_bool(habits.p_comm) => {
            Some(COMM_APPS[rng.random_range(0..COMM_APPS.len())].to_string())
        }
        Source::Keyboard => Some(OTHER_APPS[rng.random_range(0..OTHER_APPS.len())].to_string()),
    };
    TextEvent {
        user_id: user_id.to_string(),
        timestamp,
        source,
        tokens: Vec::new(),
        geo: GeoFix {
            lat: jitter.lat,
            lon: jitter.lon,
            timestamp,
        },
        motion,
        app_id,
    }
}

/// Generates every user from its own derived seed.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    Ok((0..spec.num_users)
        .into_par_iter()
        .map(|i| generate_user(spec, i))
        .collect())
}

/// The seven non-text features for one day, in [`NONTEXT_FEATURES`] order.
pub fn nontext_features(client: &ClientDataset, day: usize) -> Vec<f64> {
    let log = client.device_logs.get(day).copied().unwrap_or_default();
    let day_events: Vec<&TextEvent> = client.events_on(day).collect();
    let conversations = day_events.iter().filter(|e| e.source == Source::Speech).count();
    let fixes: Vec<GeoFix> = day_events.iter().map(|e| e.geo).collect();
    let places = leader_clusters(&fixes, client.profile.home_radius_m).len();
    vec![
        log.stationary_hours,
        conversations as f64,
        log.sleep_end_hour.unwrap_or(DEFAULT_SLEEP_END_HOUR),
        log.location_hours,
        log.unlock_minutes,
        f64::from(log.unlock_count),
        places as f64,
    ]
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum CohortRecord {
    Header {
        format: String,
        version: u32,
        num_users: usize,
    },
    User {
        user_id: String,
        profile: UserProfile,
        start_timestamp: i64,
        days: usize,
        phq9: u8,
        daily_labels: Vec<DailyLabels>,
        device_logs: Vec<DeviceLog>,
    },
    Event(TextEvent),
}

pub const COHORT_FORMAT: &str = "contextfed-cohort";

/// One header line, then each user followed by that user's events.
pub fn write_cohort<W: Write>(cohort: &[ClientDataset], out: &mut W) -> Result<()> {
    let header = CohortRecord::Header {
        format: COHORT_FORMAT.to_string(),
        version: 1,
        num_users: cohort.len(),
    };
    let io = |e| Error::io("cohort", e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for c in cohort {
        let user = CohortRecord::User {
            user_id: c.user_id.clone(),
            profile: c.profile.clone(),
            start_timestamp: c.start_timestamp,
            days: c.days,
            phq9: c.phq9,
            daily_labels: c.daily_labels.clone(),
            device_logs: c.device_logs.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&user)?).map_err(io)?;
        for e in &c.events {
            writeln!(out, "{}", serde_json::to_string(&CohortRecord::Event(e.clone()))?).map_err(io)?;
        }
    }
    Ok(())
}

pub fn save_cohort(cohort: &[ClientDataset], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_cohort(cohort, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_cohort(path: &Path) -> Result<Vec<ClientDataset>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(BufReader::new(file), &path.display().to_string())
}

pub fn read_cohort<R: BufRead>(reader: R, origin: &str) -> Result<Vec<ClientDataset>> {
    let mut users: Vec<ClientDataset> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CohortRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        match rec {
            CohortRecord::Header { format, version, .. } => {
                if format != COHORT_FORMAT || version != 1 {
                    return Err(Error::parse(origin, lineno, "not a contextfed-cohort v1 file"));
                }
            }
            CohortRecord::User {
                user_id,
                profile,
                start_timestamp,
                days,
                phq9,
                daily_labels,
                device_logs,
            } => {
                if index.contains_key(&user_id) {
                    return Err(Error::parse(origin, lineno, format!("duplicate user `{user_id}`")));
                }
                index.insert(user_id.clone(), users.len());
                users.push(ClientDataset {
                    user_id,
                    profile,
                    start_timestamp,
                    days,
                    phq9,
                    daily_labels,
                    device_logs,
                    events: Vec::new(),
                });
            }
            CohortRecord::Event(event) => {
                let &u = index.get(&event.user_id).ok_or_else(|| {
                    Error::parse(origin, lineno, format!("event for unknown user `{}`", event.user_id))
                })?;
                users[u].events.push(event);
            }
        }
    }
    for u in &mut users {
        u.events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.source.cmp(&b.source)));
        u.validate()?;
    }
    Ok(users)
}
