//! Temporal contexts for text events: time of day, location, motion and
//! foreground application.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::TextEvent;

const BUNDLED_COMM_APPS: &str = include_str!("../data/comm_apps.txt");

pub const DEFAULT_HOME_RADIUS_M: f64 = 250.0;
const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContextLabel {
    #[serde(rename = "T_D")]
    TimeDay,
    #[serde(rename = "T_N")]
    TimeNight,
    #[serde(rename = "L_H")]
    LocHome,
    #[serde(rename = "L_O")]
    LocOther,
    #[serde(rename = "M_S")]
    MotionStationary,
    #[serde(rename = "M_M")]
    MotionMoving,
    #[serde(rename = "A_C")]
    AppComm,
    #[serde(rename = "A_O")]
    AppOther,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContextFamily {
    Time,
    Location,
    Motion,
    App,
}

impl ContextLabel {
    pub const ALL: [ContextLabel; 8] = [
        ContextLabel::TimeDay,
        ContextLabel::TimeNight,
        ContextLabel::LocHome,
        ContextLabel::LocOther,
        ContextLabel::MotionStationary,
        ContextLabel::MotionMoving,
        ContextLabel::AppComm,
        ContextLabel::AppOther,
    ];

    pub fn family(self) -> ContextFamily {
        use ContextLabel::*;
        match self {
            TimeDay | TimeNight => ContextFamily::Time,
            LocHome | LocOther => ContextFamily::Location,
            MotionStationary | MotionMoving => ContextFamily::Motion,
            AppComm | AppOther => ContextFamily::App,
        }
    }

    pub fn code(self) -> &'static str {
        use ContextLabel::*;
        match self {
            TimeDay => "T_D",
            TimeNight => "T_N",
            LocHome => "L_H",
            LocOther => "L_O",
            MotionStationary => "M_S",
            MotionMoving => "M_M",
            AppComm => "A_C",
            AppOther => "A_O",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.code() == code)
    }
}

impl fmt::Display for ContextLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Speech,
    Keyboard,
}

impl Source {
    pub const ALL: [Source; 2] = [Source::Speech, Source::Keyboard];

    pub fn name(self) -> &'static str {
        match self {
            Source::Speech => "speech",
            Source::Keyboard => "keyboard",
        }
    }

    /// Context labels that apply to this source, in canonical order.
    pub fn labels(self) -> &'static [ContextLabel] {
        match self {
            Source::Speech => &ContextLabel::ALL[..6],
            Source::Keyboard => &ContextLabel::ALL,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Stationary,
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFix {
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
}

impl GeoFix {
    pub fn new(lat: f64, lon: f64, timestamp: i64) -> Result<Self> {
        if !(lat.abs() <= 90.0 && lon.abs() <= 180.0) {
            return Err(Error::Config(format!("coordinates out of range: ({lat}, {lon})")));
        }
        Ok(GeoFix { lat, lon, timestamp })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    #[serde(default)]
    pub utc_offset_minutes: i32,
    #[serde(default)]
    pub home_center: Option<Coordinates>,
    #[serde(default = "default_radius")]
    pub home_radius_m: f64,
    #[serde(default = "default_comm_apps")]
    pub comm_apps: BTreeSet<String>,
}

fn default_radius() -> f64 {
    DEFAULT_HOME_RADIUS_M
}

pub fn default_comm_apps() -> BTreeSet<String> {
    BUNDLED_COMM_APPS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

impl Default for UserProfile {
    fn default() -> Self {
        UserProfile {
            utc_offset_minutes: 0,
            home_center: None,
            home_radius_m: DEFAULT_HOME_RADIUS_M,
            comm_apps: default_comm_apps(),
        }
    }
}

impl UserProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.home_radius_m > 0.0) {
            return Err(Error::Config("home_radius_m must be positive".into()));
        }
        Ok(())
    }
}

/// Local hour in `[9, 18)` is daytime.
pub fn time_context(timestamp: i64, utc_offset_minutes: i32) -> ContextLabel {
    let local = timestamp + i64::from(utc_offset_minutes) * 60;
    let hour = local.rem_euclid(86_400) / 3_600;
    if (9..18).contains(&hour) {
        ContextLabel::TimeDay
    } else {
        ContextLabel::TimeNight
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: Coordinates, b: Coordinates) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

impl From<GeoFix> for Coordinates {
    fn from(f: GeoFix) -> Self {
        Coordinates { lat: f.lat, lon: f.lon }
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub leader: Coordinates,
    pub members: Vec<Coordinates>,
}

impl Cluster {
    pub fn centroid(&self) -> Coordinates {
        let n = self.members.len() as f64;
        let (lat, lon) = self
            .members
            .iter()
            .fold((0.0, 0.0), |(a, b), c| (a + c.lat, b + c.lon));
        Coordinates { lat: lat / n, lon: lon / n }
    }
}

/// Greedy leader clustering in timestamp order: a fix joins the first
/// cluster whose leader is within `radius_m`, otherwise it leads a new one.
pub fn leader_clusters(fixes: &[GeoFix], radius_m: f64) -> Vec<Cluster> {
    let mut ordered: Vec<&GeoFix> = fixes.iter().collect();
    ordered.sort_by_key(|f| f.timestamp);
    let mut clusters: Vec<Cluster> = Vec::new();
    for fix in ordered {
        let c = Coordinates::from(*fix);
        match clusters.iter_mut().find(|cl| haversine_m(cl.leader, c) <= radius_m) {
            Some(cl) => cl.members.push(c),
            None => clusters.push(Cluster {
                leader: c,
                members: vec![c],
            }),
        }
    }
    clusters
}

/// Centroid of the cluster with the most fixes; ties go to the earliest
/// founded cluster.
pub fn detect_home(fixes: &[GeoFix], radius_m: f64) -> Result<Coordinates> {
    let clusters = leader_clusters(fixes, radius_m);
    let mut best: Option<&Cluster> = None;
    for cl in &clusters {
        if best.is_none_or(|b| cl.members.len() > b.members.len()) {
            best = Some(cl);
        }
    }
    best.map(Cluster::centroid).ok_or(Error::NoLocationData)
}

pub fn location_context(fix: &GeoFix, profile: &UserProfile) -> ContextLabel {
    match profile.home_center {
        Some(home) if haversine_m(home, Coordinates::from(*fix)) <= profile.home_radius_m => {
            ContextLabel::LocHome
        }
        _ => ContextLabel::LocOther,
    }
}

pub fn motion_context(state: Motion) -> ContextLabel {
    match state {
        Motion::Stationary => ContextLabel::MotionStationary,
        Motion::Moving => ContextLabel::MotionMoving,
    }
}

pub fn app_context(app_id: &str, profile: &UserProfile) -> ContextLabel {
    if profile.comm_apps.contains(app_id) {
        ContextLabel::AppComm
    } else {
        ContextLabel::AppOther
    }
}

/// One label per family: four for keyboard events, three for speech.
pub fn assign_contexts(event: &TextEvent, profile: &UserProfile) -> Vec<ContextLabel> {
    let mut labels = vec![
        time_context(event.timestamp, profile.utc_offset_minutes),
        location_context(&event.geo, profile),
        motion_context(event.motion),
    ];
    if event.source == Source::Keyboard {
        labels.push(app_context(event.app_id.as_deref().unwrap_or(""), profile));
    }
    labels
}

pub fn load_profile(path: &Path) -> Result<UserProfile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let profile: UserProfile = serde_json::from_str(&text)?;
    profile.validate()?;
    Ok(profile)
}

#[derive(Deserialize)]
struct FixRow {
    timestamp: i64,
    lat: f64,
    lon: f64,
}

/// Reads a `timestamp,lat,lon` CSV trace with a header row.
pub fn read_fixes_csv<R: std::io::Read>(reader: R) -> Result<Vec<GeoFix>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: FixRow = row?;
        out.push(GeoFix::new(row.lat, row.lon, row.timestamp)?);
    }
    Ok(out)
}
