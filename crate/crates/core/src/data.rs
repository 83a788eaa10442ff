//! Naturalistic data: HighD-style track CSVs, car-following pair
//! extraction, and a synthetic generator with a known density.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::Gmm;
use crate::scenario::{fmt_f64, DataSummary, Maneuver, Scene, JOINT_DIM};

/// Share of malformed rows tolerated before a load fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub frame: u64,
    pub id: u64,
    /// Longitudinal position (m).
    pub x: f64,
    /// Longitudinal speed (m/s).
    pub speed: f64,
    /// Longitudinal acceleration (m/s²).
    pub accel: f64,
    /// 0 when there is no preceding vehicle.
    pub preceding_id: u64,
}

/// Header names of the track columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub frame: String,
    pub id: String,
    pub x: String,
    pub speed: String,
    pub accel: String,
    pub preceding_id: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            frame: "frame".into(),
            id: "id".into(),
            x: "x".into(),
            speed: "xVelocity".into(),
            accel: "xAcceleration".into(),
            preceding_id: "precedingId".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackTable {
    pub rows: Vec<TrackRow>,
    pub malformed: usize,
}

pub fn load_tracks_csv(path: &Path, columns: &ColumnMap) -> Result<TrackTable> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_tracks(file, columns)
}

pub fn read_tracks<R: Read>(reader: R, columns: &ColumnMap) -> Result<TrackTable> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx = [
        find(&columns.frame)?,
        find(&columns.id)?,
        find(&columns.x)?,
        find(&columns.speed)?,
        find(&columns.accel)?,
        find(&columns.preceding_id)?,
    ];
    let mut rows = Vec::new();
    let mut malformed = 0;
    for record in rdr.records() {
        let parsed = record.ok().and_then(|r| {
            let field = |i: usize| r.get(idx[i]).map(str::trim);
            let int = |i: usize| field(i)?.parse::<u64>().ok();
            let float = |i: usize| field(i)?.parse::<f64>().ok().filter(|v| v.is_finite());
            Some(TrackRow {
                frame: int(0)?,
                id: int(1)?,
                x: float(2)?,
                speed: float(3)?,
                accel: float(4)?,
                preceding_id: int(5)?,
            })
        });
        match parsed {
            Some(row) => rows.push(row),
            None => malformed += 1,
        }
    }
    let total = rows.len() + malformed;
    if malformed > 0 {
        log::warn!("skipped {malformed} malformed track rows of {total}");
    }
    if total > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::TooManyMalformed { bad: malformed, total });
    }
    Ok(TrackTable { rows, malformed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Minimum number of consecutive frames a follower/leader pair must
    /// persist.
    pub min_duration: u64,
    /// Recording frame rate (Hz).
    pub frame_rate: f64,
    /// Frames between consecutive samples.
    pub step_stride: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            min_duration: 50,
            frame_rate: 25.0,
            step_stride: 25,
        }
    }
}

/// Car-following `(scene, maneuver)` samples. The maneuver is the leader's
/// acceleration one stride after the scene.
///
/// Vehicles driving towards negative `x` are mirrored so every pair moves
/// forward; the gap is the leader's position minus the follower's.
pub fn extract_car_following(tracks: &TrackTable, cfg: &ExtractConfig) -> Result<Vec<(Scene, Maneuver)>> {
    if cfg.step_stride == 0 {
        return Err(Error::InvalidConfig("step_stride must be at least 1".into()));
    }
    let mut by_key: BTreeMap<(u64, u64), TrackRow> = BTreeMap::new();
    let mut by_vehicle: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for r in &tracks.rows {
        by_key.insert((r.id, r.frame), *r);
        by_vehicle.entry(r.id).or_default().push(r.frame);
    }
    let oriented = |r: &TrackRow| -> (f64, f64, f64) {
        if r.speed < 0.0 {
            (-r.x, -r.speed, -r.accel)
        } else {
            (r.x, r.speed, r.accel)
        }
    };
    let mut samples = Vec::new();
    for (&id, frames) in &mut by_vehicle {
        frames.sort_unstable();
        frames.dedup();
        // Split the follower's frames into runs with one leader present
        // on consecutive frames.
        let mut runs: Vec<(u64, Vec<u64>)> = Vec::new();
        for &f in frames.iter() {
            let row = by_key[&(id, f)];
            let lead = row.preceding_id;
            if lead == 0 || !by_key.contains_key(&(lead, f)) {
                continue;
            }
            match runs.last_mut() {
                Some((l, run)) if *l == lead && run.last() == Some(&(f - 1)) => run.push(f),
                _ => runs.push((lead, vec![f])),
            }
        }
        for (lead, run) in runs {
            if (run.len() as u64) < cfg.min_duration {
                continue;
            }
            let last = *run.last().unwrap_or(&0);
            for &f in run.iter().step_by(cfg.step_stride as usize) {
                let next = f + cfg.step_stride;
                if next > last {
                    break;
                }
                let (xf, vf, _) = oriented(&by_key[&(id, f)]);
                let (xl, vl, al) = oriented(&by_key[&(lead, f)]);
                let (_, _, a_next) = oriented(&by_key[&(lead, next)]);
                let gap = xl - xf;
                if gap > 0.0 {
                    samples.push((Scene::new(vf, vl, gap, al), Maneuver::new(a_next)));
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::NoPairsFound);
    }
    Ok(samples)
}

/// One Gaussian cluster of `(v_av, v_lead, gap)` with its own mean lead
/// acceleration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCluster {
    pub weight: f64,
    /// Mean of `(v_av, v_lead, gap)`.
    pub mean: [f64; 3],
    /// Row-major covariance of `(v_av, v_lead, gap)`.
    pub cov: [[f64; 3]; 3],
    /// Mean-reversion target of the lead acceleration (m/s²).
    pub accel_mean: f64,
}

/// Generating law of the synthetic naturalistic data.
///
/// Scenes come from a mixture of Gaussian clusters. Within a cluster the
/// lead acceleration follows a stationary AR(1) process around
/// `accel_mean`, so `a_lead ~ N(μ, σ²/(1−ρ²))` and the maneuver is
/// `m = μ + ρ(a_lead − μ) + σε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clusters: Vec<SceneCluster>,
    /// AR(1) coefficient ρ of the lead acceleration.
    pub accel_persistence: f64,
    /// Innovation standard deviation σ (m/s²).
    pub accel_noise: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let cov = |sa: f64, sl: f64, sg: f64, rho: f64| {
            [
                [sa * sa, rho * sa * sl, 0.0],
                [rho * sa * sl, sl * sl, 0.0],
                [0.0, 0.0, sg * sg],
            ]
        };
        Self {
            clusters: vec![
                SceneCluster {
                    weight: 0.535,
                    mean: [30.0, 31.0, 70.0],
                    cov: cov(3.0, 3.0, 12.0, 0.9),
                    accel_mean: 0.0,
                },
                SceneCluster {
                    weight: 0.435,
                    mean: [22.0, 22.5, 45.0],
                    cov: cov(3.0, 3.0, 8.0, 0.9),
                    accel_mean: 0.0,
                },
                SceneCluster {
                    weight: 0.03,
                    mean: [31.0, 21.0, 25.0],
                    cov: cov(3.0, 3.0, 5.0, 0.6),
                    accel_mean: -0.5,
                },
            ],
            accel_persistence: 0.6,
            accel_noise: 0.6,
            n_samples: 100_000,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() || self.n_samples == 0 {
            return Err(Error::InvalidConfig("synthetic data needs clusters and a positive sample count".into()));
        }
        if !(self.accel_persistence.abs() < 1.0) || !(self.accel_noise >= 0.0) {
            return Err(Error::InvalidConfig("need |persistence| < 1 and noise >= 0".into()));
        }
        if self.clusters.iter().any(|c| !(c.weight > 0.0)) {
            return Err(Error::InvalidConfig("cluster weights must be positive".into()));
        }
        Ok(())
    }

    fn accel_variance(&self) -> f64 {
        self.accel_noise.powi(2) / (1.0 - self.accel_persistence.powi(2))
    }

    /// The exact generating density over `[m, v_av, v_lead, gap, a_lead]`
    /// (ignoring the negligible rejection of non-positive gaps and speeds).
    pub fn exact_density(&self) -> Result<Gmm> {
        self.validate()?;
        let rho = self.accel_persistence;
        let va = self.accel_variance();
        let total: f64 = self.clusters.iter().map(|c| c.weight).sum();
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in &self.clusters {
            weights.push(c.weight / total);
            means.push(vec![c.accel_mean, c.mean[0], c.mean[1], c.mean[2], c.accel_mean]);
            let mut cov = vec![0.0; JOINT_DIM * JOINT_DIM];
            for i in 0..3 {
                for j in 0..3 {
                    cov[(i + 1) * JOINT_DIM + (j + 1)] = c.cov[i][j];
                }
            }
            cov[0] = va;
            cov[4 * JOINT_DIM + 4] = va;
            cov[4] = rho * va;
            cov[4 * JOINT_DIM] = rho * va;
            covs.push(cov);
        }
        Gmm::new(weights, means, covs)
    }
}

/// Synthetic samples and, when the noise is positive, their exact density.
pub struct SynthData {
    pub samples: Vec<(Scene, Maneuver)>,
    pub density: Option<Gmm>,
}

pub fn synth_naturalistic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total: f64 = cfg.clusters.iter().map(|c| c.weight).sum();
    let chols: Vec<[[f64; 3]; 3]> = cfg.clusters.iter().map(|c| cholesky3(&c.cov)).collect::<Result<_>>()?;
    let sd_a = cfg.accel_variance().sqrt();
    let rho = cfg.accel_persistence;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    while samples.len() < cfg.n_samples {
        let mut u = rng.random::<f64>() * total;
        let mut k = cfg.clusters.len() - 1;
        for (i, c) in cfg.clusters.iter().enumerate() {
            if u < c.weight {
                k = i;
                break;
            }
            u -= c.weight;
        }
        let c = &cfg.clusters[k];
        let e: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let l = &chols[k];
        let x: Vec<f64> = (0..3)
            .map(|i| c.mean[i] + (0..=i).map(|j| l[i][j] * e[j]).sum::<f64>())
            .collect();
        let a_lead = c.accel_mean + sd_a * rng.sample::<f64, _>(StandardNormal);
        let m = c.accel_mean + rho * (a_lead - c.accel_mean) + cfg.accel_noise * rng.sample::<f64, _>(StandardNormal);
        if x[0] < 0.0 || x[1] < 0.0 || x[2] <= 0.0 {
            continue;
        }
        samples.push((Scene::new(x[0], x[1], x[2], a_lead), Maneuver::new(m)));
    }
    let density = if cfg.accel_noise > 0.0 {
        Some(cfg.exact_density()?)
    } else {
        None
    };
    Ok(SynthData { samples, density })
}

fn cholesky3(a: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return Err(Error::InvalidConfig("cluster covariance is not positive definite".into()));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

const SAMPLE_COLUMNS: [&str; 5] = ["v_av", "v_lead", "gap", "a_lead", "m"];

pub fn write_samples_csv<W: Write>(samples: &[(Scene, Maneuver)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SAMPLE_COLUMNS)?;
    for (s, m) in samples {
        w.write_record([
            fmt_f64(s.v_av),
            fmt_f64(s.v_lead),
            fmt_f64(s.gap),
            fmt_f64(s.a_lead),
            fmt_f64(m.a_cmd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<(Scene, Maneuver)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = SAMPLE_COLUMNS
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let v: Vec<f64> = idx
            .iter()
            .map(|&i| {
                record
                    .get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::InvalidInput(format!("bad value on sample row {}", line + 1)))
            })
            .collect::<Result<_>>()?;
        out.push((Scene::new(v[0], v[1], v[2], v[3]), Maneuver::new(v[4])));
    }
    if out.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(out)
}

pub fn save_samples(samples: &[(Scene, Maneuver)], path: &Path) -> Result<()> {
    write_samples_csv(samples, std::fs::File::create(path)?)
}

pub fn load_samples(path: &Path) -> Result<Vec<(Scene, Maneuver)>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_samples_csv(file)
}

pub fn save_summary(summary: &DataSummary, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

pub fn load_summary(path: &Path) -> Result<DataSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "frame,id,x,xVelocity,xAcceleration,precedingId\n";

    #[test]
    fn three_rows() {
        let text = format!("{HEADER}1,1,0.0,20.0,0.0,0\n2,1,0.8,20.0,0.0,0\n3,1,1.6,20.0,0.0,0\n");
        let t = read_tracks(text.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.malformed, 0);
    }

    #[test]
    fn missing_column_is_named() {
        let text = "frame,id,x,xAcceleration,precedingId\n1,1,0,0,0\n";
        match read_tracks(text.as_bytes(), &ColumnMap::default()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "xVelocity"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_rows_counted() {
        let mut text = HEADER.to_string();
        for f in 0..200 {
            text.push_str(&format!("{f},1,{},20.0,0.0,0\n", f as f64 * 0.8));
        }
        text.push_str("201,1,0.0,fast,0.0,0\n");
        let t = read_tracks(text.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!((t.rows.len(), t.malformed), (200, 1));
        let bad = format!("{HEADER}1,1,0.0,fast,0.0,0\n2,1,0.0,20,0.0,0\n");
        assert!(matches!(
            read_tracks(bad.as_bytes(), &ColumnMap::default()),
            Err(Error::TooManyMalformed { bad: 1, total: 2 })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_tracks_csv(Path::new("/nonexistent/tracks.csv"), &ColumnMap::default()),
            Err(Error::FileNotFound(_))
        ));
    }

    fn pair_tracks(lead_accel: f64, follower_has_lead: bool) -> TrackTable {
        let dt = 1.0 / 25.0;
        let mut rows = Vec::new();
        for f in 0..200u64 {
            let t = f as f64 * dt;
            let v_lead = 25.0 + lead_accel * t;
            let x_lead = 40.0 + 25.0 * t + 0.5 * lead_accel * t * t;
            rows.push(TrackRow {
                frame: f,
                id: 2,
                x: x_lead,
                speed: v_lead,
                accel: lead_accel,
                preceding_id: 0,
            });
            rows.push(TrackRow {
                frame: f,
                id: 1,
                x: 20.0 * t,
                speed: 20.0,
                accel: 0.0,
                preceding_id: if follower_has_lead { 2 } else { 0 },
            });
        }
        TrackTable { rows, malformed: 0 }
    }

    #[test]
    fn constant_speed_pair() {
        let s = extract_car_following(&pair_tracks(0.0, true), &ExtractConfig::default()).unwrap();
        assert_eq!(s.len(), 7);
        assert!(s.iter().all(|(sc, m)| sc.v_av == 20.0 && sc.v_lead == 25.0 && m.a_cmd == 0.0));
        assert!((s[0].0.gap - 40.0).abs() < 1e-12);
    }

    #[test]
    fn braking_leader() {
        let s = extract_car_following(&pair_tracks(-1.5, true), &ExtractConfig::default()).unwrap();
        assert!(s.iter().all(|(_, m)| (m.a_cmd + 1.5).abs() < 1e-6));
    }

    #[test]
    fn no_leader_no_pairs() {
        assert!(matches!(
            extract_car_following(&pair_tracks(0.0, false), &ExtractConfig::default()),
            Err(Error::NoPairsFound)
        ));
    }

    #[test]
    fn reverse_direction_is_mirrored() {
        let mut t = pair_tracks(0.0, true);
        for r in &mut t.rows {
            r.x = -r.x;
            r.speed = -r.speed;
        }
        let s = extract_car_following(&t, &ExtractConfig::default()).unwrap();
        assert!((s[0].0.gap - 40.0).abs() < 1e-12 && s[0].0.v_av == 20.0);
    }

    #[test]
    fn synth_is_reproducible_and_positive() {
        let cfg = SynthConfig {
            n_samples: 2000,
            ..SynthConfig::default()
        };
        let a = synth_naturalistic(&cfg).unwrap();
        let b = synth_naturalistic(&cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(a.samples.iter().all(|(s, _)| s.gap > 0.0));
        let summary = DataSummary::from_samples(&a.samples).unwrap();
        let lo = a.samples.iter().map(|(_, m)| m.a_cmd).fold(f64::INFINITY, f64::min);
        assert_eq!(summary.m_min, lo);
    }

    #[test]
    fn zero_noise_maneuvers_hit_the_target() {
        let mut cfg = SynthConfig {
            n_samples: 100,
            accel_noise: 0.0,
            ..SynthConfig::default()
        };
        for c in &mut cfg.clusters {
            c.accel_mean = -0.25;
        }
        let d = synth_naturalistic(&cfg).unwrap();
        assert!(d.density.is_none());
        assert!(d.samples.iter().all(|(_, m)| m.a_cmd == -0.25));
    }

    #[test]
    fn samples_csv_round_trip() {
        let cfg = SynthConfig {
            n_samples: 50,
            ..SynthConfig::default()
        };
        let d = synth_naturalistic(&cfg).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&d.samples, &mut buf).unwrap();
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), d.samples);
    }
}
