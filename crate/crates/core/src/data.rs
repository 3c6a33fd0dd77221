//! Check-in ingestion, cleaning, chronological splitting and the transition
//! triples `(poi, Δt, Δd)` the recurrent models consume. Also generates
//! synthetic corpora for desk-scale experiments.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::DateTime;
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }

    pub fn in_range(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in kilometres.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckIn {
    pub user: String,
    pub poi: String,
    /// Seconds since the Unix epoch, UTC.
    pub ts: i64,
    pub lat: f64,
    pub lon: f64,
}

impl CheckIn {
    pub fn location(&self) -> GeoPoint {
        GeoPoint::new(self.lat, self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// `user<TAB>time<TAB>lat<TAB>lon<TAB>location id`, time as ISO-8601 UTC.
    Snap,
    /// `user,poi,timestamp,lat,lon` with an optional header row; timestamp
    /// as integer Unix seconds or RFC 3339.
    Csv,
}

impl FromStr for InputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snap" => Ok(InputFormat::Snap),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub checkins: Vec<CheckIn>,
    pub lines: usize,
    pub malformed: usize,
    /// 1-based line numbers of the first few malformed lines.
    pub malformed_lines: Vec<usize>,
}

const MALFORMED_SAMPLE: usize = 10;

fn parse_time(s: &str) -> Option<i64> {
    if let Ok(secs) = s.parse::<i64>() {
        return Some(secs);
    }
    DateTime::parse_from_rfc3339(s).ok().map(|t| t.timestamp())
}

fn parse_line(line: &str, format: InputFormat) -> Option<CheckIn> {
    let fields: Vec<&str> = match format {
        InputFormat::Snap => line.split('\t').map(str::trim).collect(),
        InputFormat::Csv => line.split(',').map(str::trim).collect(),
    };
    if fields.len() != 5 {
        return None;
    }
    let (user, poi, ts, lat, lon) = match format {
        InputFormat::Snap => (fields[0], fields[4], fields[1], fields[2], fields[3]),
        InputFormat::Csv => (fields[0], fields[1], fields[2], fields[3], fields[4]),
    };
    if user.is_empty() || poi.is_empty() {
        return None;
    }
    let ts = parse_time(ts)?;
    let lat: f64 = lat.parse().ok()?;
    let lon: f64 = lon.parse().ok()?;
    let point = GeoPoint::new(lat, lon);
    if !point.in_range() {
        return None;
    }
    Some(CheckIn {
        user: user.to_string(),
        poi: poi.to_string(),
        ts,
        lat,
        lon,
    })
}

/// Parses check-ins from any reader. Malformed lines are counted and
/// skipped; more than half malformed is a format error.
pub fn parse_checkins<R: Read>(reader: R, format: InputFormat, origin: &Path) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if format == InputFormat::Csv && n == 0 && line.to_ascii_lowercase().starts_with("user") {
            continue;
        }
        report.lines += 1;
        match parse_line(line, format) {
            Some(c) => report.checkins.push(c),
            None => {
                report.malformed += 1;
                if report.malformed_lines.len() < MALFORMED_SAMPLE {
                    report.malformed_lines.push(n + 1);
                }
            }
        }
    }
    if report.lines == 0 {
        warn!("{}: no check-in records", origin.display());
    } else if report.malformed * 2 > report.lines {
        return Err(Error::Format {
            path: origin.to_path_buf(),
            msg: format!(
                "{} of {} lines malformed (first at lines {:?})",
                report.malformed, report.lines, report.malformed_lines
            ),
        });
    } else if report.malformed > 0 {
        warn!(
            "{}: skipped {} malformed lines (first at lines {:?})",
            origin.display(),
            report.malformed,
            report.malformed_lines
        );
    }
    Ok(report)
}

pub fn load_checkins_report(path: &Path, format: InputFormat) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_checkins(file, format, path)
}

pub fn load_checkins(path: &Path, format: InputFormat) -> Result<Vec<CheckIn>> {
    Ok(load_checkins_report(path, format)?.checkins)
}

/// Drops users with fewer than `min_user_checkins` check-ins and POIs
/// visited by fewer than `min_poi_users` distinct users, repeating until
/// neither rule removes anything. Input order is preserved.
pub fn clean(checkins: &[CheckIn], min_user_checkins: usize, min_poi_users: usize) -> Vec<CheckIn> {
    let mut kept: Vec<CheckIn> = checkins.to_vec();
    loop {
        let before = kept.len();

        let mut per_poi: HashMap<&str, HashSet<&str>> = HashMap::new();
        for c in &kept {
            per_poi.entry(&c.poi).or_default().insert(&c.user);
        }
        let bad_pois: HashSet<String> = per_poi
            .into_iter()
            .filter(|(_, users)| users.len() < min_poi_users)
            .map(|(p, _)| p.to_string())
            .collect();
        kept.retain(|c| !bad_pois.contains(&c.poi));

        let mut per_user: HashMap<&str, usize> = HashMap::new();
        for c in &kept {
            *per_user.entry(&c.user).or_default() += 1;
        }
        let bad_users: HashSet<String> = per_user
            .into_iter()
            .filter(|&(_, n)| n < min_user_checkins)
            .map(|(u, _)| u.to_string())
            .collect();
        kept.retain(|c| !bad_users.contains(&c.user));

        if kept.len() == before {
            return kept;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub pois: usize,
    pub checkins: usize,
    /// check-ins / (users × POIs)
    pub density: f64,
}

impl DatasetStats {
    pub fn of(checkins: &[CheckIn]) -> Self {
        let users: HashSet<&str> = checkins.iter().map(|c| c.user.as_str()).collect();
        let pois: HashSet<&str> = checkins.iter().map(|c| c.poi.as_str()).collect();
        let cells = users.len() as f64 * pois.len() as f64;
        DatasetStats {
            users: users.len(),
            pois: pois.len(),
            checkins: checkins.len(),
            density: if cells > 0.0 {
                checkins.len() as f64 / cells
            } else {
                0.0
            },
        }
    }
}

/// One recurrent input step: a POI and the intervals to the following
/// check-in of the same user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionTriple {
    pub poi: usize,
    /// Hours to the next check-in.
    pub dt: f64,
    /// Kilometres to the next check-in.
    pub dd: f64,
}

/// A user's full chronological history.
///
/// `pois[j]` is the j-th check-in and `triples[j]` carries the intervals
/// from check-in j to j+1, so there is one triple fewer than check-ins.
/// The first `n_train` check-ins form the training split. Training
/// transitions predict check-ins `1..n_train`; test instances predict every
/// test check-in `n_train..`, each conditioned on all earlier check-ins.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user: String,
    pub pois: Vec<usize>,
    pub triples: Vec<TransitionTriple>,
    pub n_train: usize,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn train_triples(&self) -> &[TransitionTriple] {
        &self.triples[..self.n_train.saturating_sub(1)]
    }

    pub fn train_targets(&self) -> &[usize] {
        &self.pois[1.min(self.n_train)..self.n_train]
    }

    /// Inputs of the test instances. The first one is the last training
    /// check-in, whose successor is the first test check-in.
    pub fn test_triples(&self) -> &[TransitionTriple] {
        &self.triples[self.n_train.saturating_sub(1)..]
    }

    pub fn test_targets(&self) -> &[usize] {
        &self.pois[self.n_train..]
    }

    pub fn n_test(&self) -> usize {
        self.pois.len() - self.n_train
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Dense POI index → raw POI id.
    pub vocab: Vec<String>,
    /// Coordinates of each dense POI (first observed location).
    pub locations: Vec<GeoPoint>,
    pub users: Vec<UserSequence>,
}

/// Number of leading check-ins assigned to training: `⌈frac·n⌉`, clamped so
/// both splits are non-empty. A 2-record user therefore keeps one record on
/// each side.
pub fn train_split_len(n: usize, train_frac: f64) -> usize {
    if n < 2 {
        return n;
    }
    let k = (train_frac * n as f64 - 1e-9).ceil().max(1.0) as usize;
    k.clamp(1, n - 1)
}

pub fn build_corpus(checkins: &[CheckIn], train_frac: f64) -> Corpus {
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<&CheckIn>> = HashMap::new();
    for c in checkins {
        let entry = by_user.entry(&c.user).or_default();
        if entry.is_empty() {
            order.push(&c.user);
        }
        entry.push(c);
    }

    let mut vocab = Vec::new();
    let mut locations = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut users = Vec::new();
    for user in order {
        let mut recs = by_user.remove(user).expect("grouped user");
        if recs.len() < 2 {
            warn!("dropping user {user}: fewer than 2 check-ins");
            continue;
        }
        // stable: equal timestamps keep input order
        recs.sort_by_key(|c| c.ts);
        let pois: Vec<usize> = recs
            .iter()
            .map(|c| {
                *index.entry(&c.poi).or_insert_with(|| {
                    vocab.push(c.poi.clone());
                    locations.push(c.location());
                    vocab.len() - 1
                })
            })
            .collect();
        let triples = recs
            .windows(2)
            .zip(&pois)
            .map(|(w, &poi)| TransitionTriple {
                poi,
                dt: (w[1].ts - w[0].ts) as f64 / 3600.0,
                dd: haversine(w[0].location(), w[1].location()),
            })
            .collect();
        users.push(UserSequence {
            user: user.to_string(),
            n_train: train_split_len(pois.len(), train_frac),
            pois,
            triples,
        });
    }
    Corpus {
        vocab,
        locations,
        users,
    }
}

/// Optional rescaling of raw intervals before they enter the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalScaling {
    /// Upper clip for Δt in hours.
    pub clip_dt: Option<f64>,
    /// Upper clip for Δd in kilometres.
    pub clip_dd: Option<f64>,
    /// Apply `ln(1 + x)` after clipping.
    pub log1p: bool,
}

impl IntervalScaling {
    pub const DEFAULT_CLIP_DT: f64 = 24.0 * 30.0;
    pub const DEFAULT_CLIP_DD: f64 = 100.0;

    pub fn clipped_log1p() -> Self {
        IntervalScaling {
            clip_dt: Some(Self::DEFAULT_CLIP_DT),
            clip_dd: Some(Self::DEFAULT_CLIP_DD),
            log1p: true,
        }
    }

    pub fn apply(&self, dt: f64, dd: f64) -> (f64, f64) {
        let dt = self.clip_dt.map_or(dt, |c| dt.min(c));
        let dd = self.clip_dd.map_or(dd, |c| dd.min(c));
        if self.log1p {
            (dt.ln_1p(), dd.ln_1p())
        } else {
            (dt, dd)
        }
    }
}

impl Corpus {
    pub fn n_pois(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_checkins(&self) -> usize {
        self.users.iter().map(|u| u.len()).sum()
    }

    const MAGIC: &'static [u8; 8] = b"STLCORP\0";
    const VERSION: u32 = 1;

    /// Serializes the corpus cache. Layout, all integers and floats
    /// little-endian:
    ///
    /// ```text
    /// magic "STLCORP\0" | u32 version
    /// u64 n_pois  | n_pois × (u32 len, utf-8 raw id, f64 lat, f64 lon)
    /// u64 n_users | n_users × (u32 len, utf-8 user id, u64 n_records, u64 n_train,
    ///                          n_records × u32 poi, (n_records-1) × (f64 dt, f64 dd))
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u64).to_le_bytes());
        for (id, loc) in self.vocab.iter().zip(&self.locations) {
            put_str(&mut out, id);
            out.extend_from_slice(&loc.lat.to_le_bytes());
            out.extend_from_slice(&loc.lon.to_le_bytes());
        }
        out.extend_from_slice(&(self.users.len() as u64).to_le_bytes());
        for u in &self.users {
            put_str(&mut out, &u.user);
            out.extend_from_slice(&(u.pois.len() as u64).to_le_bytes());
            out.extend_from_slice(&(u.n_train as u64).to_le_bytes());
            for &p in &u.pois {
                out.extend_from_slice(&(p as u32).to_le_bytes());
            }
            for t in &u.triples {
                out.extend_from_slice(&t.dt.to_le_bytes());
                out.extend_from_slice(&t.dd.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: origin.to_path_buf(),
            msg,
        };
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8).ok_or_else(|| fmt("truncated header".into()))?;
        if magic != Self::MAGIC {
            return Err(fmt("not a corpus cache (bad magic)".into()));
        }
        let version = r.u32().ok_or_else(|| fmt("truncated header".into()))?;
        if version != Self::VERSION {
            return Err(fmt(format!("unsupported corpus cache version {version}")));
        }
        let truncated = || fmt("truncated corpus cache".into());
        let n_pois = r.u64().ok_or_else(truncated)? as usize;
        let mut vocab = Vec::with_capacity(n_pois.min(1 << 24));
        let mut locations = Vec::with_capacity(n_pois.min(1 << 24));
        for _ in 0..n_pois {
            vocab.push(r.string().ok_or_else(truncated)?);
            let lat = r.f64().ok_or_else(truncated)?;
            let lon = r.f64().ok_or_else(truncated)?;
            locations.push(GeoPoint::new(lat, lon));
        }
        let n_users = r.u64().ok_or_else(truncated)? as usize;
        let mut users = Vec::with_capacity(n_users.min(1 << 24));
        for _ in 0..n_users {
            let user = r.string().ok_or_else(truncated)?;
            let n = r.u64().ok_or_else(truncated)? as usize;
            let n_train = r.u64().ok_or_else(truncated)? as usize;
            if n == 0 || n_train > n {
                return Err(fmt(format!("user {user}: invalid split {n_train}/{n}")));
            }
            let mut pois = Vec::with_capacity(n);
            for _ in 0..n {
                let p = r.u32().ok_or_else(truncated)? as usize;
                if p >= n_pois {
                    return Err(fmt(format!("user {user}: POI index {p} ≥ vocabulary {n_pois}")));
                }
                pois.push(p);
            }
            let mut triples = Vec::with_capacity(n - 1);
            for &poi in &pois[..n - 1] {
                let dt = r.f64().ok_or_else(truncated)?;
                let dd = r.f64().ok_or_else(truncated)?;
                triples.push(TransitionTriple { poi, dt, dd });
            }
            users.push(UserSequence {
                user,
                pois,
                triples,
                n_train,
            });
        }
        if !r.is_empty() {
            return Err(fmt("trailing bytes after corpus".into()));
        }
        Ok(Corpus {
            vocab,
            locations,
            users,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized corpus.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthPattern {
    /// Each user cycles through a home cluster of `cycle_len` nearby POIs
    /// every ~6 h. With probability `jump_prob` a step is replaced by a
    /// visit to a random far POI after a ~2 day gap, after which the cycle
    /// resumes where it left off.
    Periodic { cycle_len: usize, jump_prob: f64 },
    /// Each user alternates between two paired clusters. A short gap
    /// (1 to 3 h) keeps the user cycling in the current cluster; with
    /// probability `switch_prob` the gap is long (20 to 30 h) and the user
    /// moves to the next-in-cycle POI of the partner cluster, about 28 km
    /// away. The next POI is a function of the current POI and the gap.
    IntervalSwitch { cluster_size: usize, switch_prob: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_pois: usize,
    pub checkins_per_user: usize,
    pub train_frac: f64,
    pub pattern: SynthPattern,
}

impl SynthConfig {
    pub fn periodic(seed: u64, n_users: usize, n_pois: usize, cycle_len: usize) -> Self {
        SynthConfig {
            seed,
            n_users,
            n_pois,
            checkins_per_user: 30,
            train_frac: 0.7,
            pattern: SynthPattern::Periodic {
                cycle_len,
                jump_prob: 0.0,
            },
        }
    }

    pub fn interval_switch(seed: u64, n_users: usize, n_pois: usize) -> Self {
        SynthConfig {
            seed,
            n_users,
            n_pois,
            checkins_per_user: 40,
            train_frac: 0.7,
            pattern: SynthPattern::IntervalSwitch {
                cluster_size: 4,
                switch_prob: 0.3,
            },
        }
    }
}

/// POIs grouped into consecutive clusters of `size` (the last may be short)
/// with members within ~1 km of the centre. With `paired`, each odd
/// cluster sits ~28 km east of the preceding even one.
fn clustered_layout(rng: &mut ChaCha8Rng, n_pois: usize, size: usize, spread_deg: f64, paired: bool) -> Vec<GeoPoint> {
    let n_clusters = n_pois.div_ceil(size);
    let mut centres: Vec<GeoPoint> = Vec::with_capacity(n_clusters);
    for k in 0..n_clusters {
        let c = if paired && k % 2 == 1 {
            let home = centres[k - 1];
            GeoPoint::new(home.lat, home.lon + 0.32)
        } else {
            GeoPoint::new(
                37.0 + rng.gen_range(-spread_deg..spread_deg),
                -122.0 + rng.gen_range(-spread_deg..spread_deg),
            )
        };
        centres.push(c);
    }
    (0..n_pois)
        .map(|p| {
            let c = centres[p / size];
            GeoPoint::new(
                c.lat + rng.gen_range(-0.006..0.006),
                c.lon + rng.gen_range(-0.006..0.006),
            )
        })
        .collect()
}

/// Deterministic synthetic corpus: the same config always yields an
/// identical corpus. Dense POI ids are `0..n_pois` with raw ids `p<index>`.
pub fn synth_corpus(cfg: &SynthConfig) -> Corpus {
    assert!(cfg.n_users >= 1 && cfg.n_pois >= 1 && cfg.checkins_per_user >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_pois = cfg.n_pois;
    let start = 1_262_304_000i64; // 2010-01-01T00:00:00Z

    let (cluster_size, paired) = match cfg.pattern {
        SynthPattern::Periodic { cycle_len, .. } => (cycle_len.clamp(1, n_pois), false),
        SynthPattern::IntervalSwitch { cluster_size, .. } => (cluster_size.clamp(1, n_pois), true),
    };
    let locations = clustered_layout(&mut rng, n_pois, cluster_size, 2.0, paired);
    let n_full = (n_pois / cluster_size).max(1);
    let members = |k: usize| -> Vec<usize> { (k * cluster_size..((k + 1) * cluster_size).min(n_pois)).collect() };

    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut ts = start + rng.gen_range(0..86_400);
        let mut stamps = Vec::with_capacity(cfg.checkins_per_user);
        let mut pois = Vec::with_capacity(cfg.checkins_per_user);
        match cfg.pattern {
            SynthPattern::Periodic { jump_prob, .. } => {
                let home = members(rng.gen_range(0..n_full));
                let mut pos = rng.gen_range(0..home.len());
                let mut pending_gap = 6.0;
                while pois.len() < cfg.checkins_per_user {
                    let jump = n_pois > home.len() && !pois.is_empty() && rng.gen_bool(jump_prob.clamp(0.0, 1.0));
                    if !pois.is_empty() {
                        let hours = if jump { 48.0 } else { pending_gap };
                        ts += (hours * 3600.0 * rng.gen_range(0.9..1.1)) as i64;
                    }
                    if jump {
                        let far = loop {
                            let p = rng.gen_range(0..n_pois);
                            if !home.contains(&p) {
                                break p;
                            }
                        };
                        pois.push(far);
                        pending_gap = 48.0;
                    } else {
                        pois.push(home[pos]);
                        pos = (pos + 1) % home.len();
                        pending_gap = 6.0;
                    }
                    stamps.push(ts);
                }
            }
            SynthPattern::IntervalSwitch { switch_prob, .. } => {
                let n_pairs = (n_full / 2).max(1);
                let pair = rng.gen_range(0..n_pairs);
                let mut clusters = [members(2 * pair), members((2 * pair + 1).min(n_full - 1))];
                if rng.gen_bool(0.5) {
                    clusters.swap(0, 1);
                }
                let mut side = 0usize;
                let mut pos = rng.gen_range(0..clusters[0].len());
                pois.push(clusters[side][pos]);
                stamps.push(ts);
                while pois.len() < cfg.checkins_per_user {
                    let switch = rng.gen_bool(switch_prob.clamp(0.0, 1.0));
                    let hours = if switch {
                        rng.gen_range(20.0..30.0)
                    } else {
                        rng.gen_range(1.0..3.0)
                    };
                    ts += (hours * 3600.0) as i64;
                    if switch {
                        side = 1 - side;
                    }
                    let cluster = &clusters[side];
                    pos = (pos + 1) % cluster.len();
                    pois.push(cluster[pos]);
                    stamps.push(ts);
                }
            }
        }
        let triples = pois
            .windows(2)
            .zip(stamps.windows(2))
            .map(|(p, t)| TransitionTriple {
                poi: p[0],
                dt: (t[1] - t[0]) as f64 / 3600.0,
                dd: haversine(locations[p[0]], locations[p[1]]),
            })
            .collect();
        users.push(UserSequence {
            user: format!("u{u}"),
            n_train: train_split_len(pois.len(), cfg.train_frac),
            pois,
            triples,
        });
    }
    Corpus {
        vocab: (0..n_pois).map(|p| format!("p{p}")).collect(),
        locations,
        users,
    }
}

/// Shuffled copy of user indices for one epoch.
pub fn epoch_order(n_users: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_users).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}
