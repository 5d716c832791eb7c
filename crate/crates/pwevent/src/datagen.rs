//! Synthetic stream generators and CSV ingestion with grid binning.
//!
//! The synthetic streams are binary: a probability sequence p_1..p_T is
//! generated first, then each user independently lands in bucket 1 with
//! probability p_t (bucket 0 otherwise). CSV ingestion turns event logs
//! into the same `StreamBatch` representation, bucketing rows into fixed
//! time slots with either a categorical column or a lon/lat grid cell as
//! the bucket.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::types::StreamBatch;
use crate::Error;

/// Which synthetic probability model produced a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Truncated Gaussian random walk.
    Tlns,
    /// Sinusoid, deterministic.
    Sin,
    /// Logistic ramp, deterministic.
    Log,
}

/// A probability sequence with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbabilitySequence {
    pub p: Vec<f64>,
    pub kind: GeneratorKind,
    pub seed: Option<u64>,
    /// Number of steps clipped back into [0, 1] (walk generator only).
    pub clip_events: usize,
}

impl ProbabilitySequence {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn clip_fraction(&self) -> f64 {
        if self.p.is_empty() {
            0.0
        } else {
            self.clip_events as f64 / self.p.len() as f64
        }
    }
}

pub const TLNS_INITIAL: f64 = 0.05;
pub const TLNS_STEP_STD: f64 = 0.0025;

/// Gaussian random walk starting at 0.05 with step deviation 0.0025,
/// clipped into [0, 1]; clip events are counted.
pub fn gen_tlns(t_len: usize, seed: u64) -> ProbabilitySequence {
    gen_tlns_with(t_len, seed, TLNS_STEP_STD)
}

/// Walk with a configurable step deviation; zero disables the perturbation
/// entirely and yields the constant initial value.
pub fn gen_tlns_with(t_len: usize, seed: u64, step_std: f64) -> ProbabilitySequence {
    assert!(t_len >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut p = Vec::with_capacity(t_len);
    let mut clip_events = 0usize;
    let mut cur = TLNS_INITIAL;
    let normal = (step_std > 0.0).then(|| Normal::new(0.0, step_std).unwrap());
    for _ in 0..t_len {
        let step = normal.as_ref().map_or(0.0, |n| n.sample(&mut rng));
        let raw = cur + step;
        cur = raw.clamp(0.0, 1.0);
        if raw != cur {
            clip_events += 1;
        }
        p.push(cur);
    }
    ProbabilitySequence { p, kind: GeneratorKind::Tlns, seed: Some(seed), clip_events }
}

/// `p_t = 0.05 sin(0.01 t) + 0.075` for t = 1..T; range [0.025, 0.125].
pub fn gen_sin(t_len: usize) -> ProbabilitySequence {
    assert!(t_len >= 1);
    let p = (1..=t_len).map(|t| 0.05 * (0.01 * t as f64).sin() + 0.075).collect();
    ProbabilitySequence { p, kind: GeneratorKind::Sin, seed: None, clip_events: 0 }
}

/// `p_t = 0.25 / (1 + e^(-0.01 t))`, monotone toward 0.25.
pub fn gen_log(t_len: usize) -> ProbabilitySequence {
    assert!(t_len >= 1);
    let p = (1..=t_len).map(|t| 0.25 / (1.0 + (-0.01 * t as f64).exp())).collect();
    ProbabilitySequence { p, kind: GeneratorKind::Log, seed: None, clip_events: 0 }
}

/// Realizes a two-bucket stream: each user lands in bucket 1 with
/// probability p_t, independently per slot and user.
pub fn realize_binary_stream(
    p: &ProbabilitySequence,
    n_users: usize,
    seed: u64,
) -> Vec<StreamBatch> {
    assert!(n_users >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    p.p.iter()
        .enumerate()
        .map(|(idx, &prob)| StreamBatch {
            slot: idx as u64 + 1,
            assignments: (0..n_users)
                .map(|_| Some(if rng.gen::<f64>() < prob { 1u32 } else { 0 }))
                .collect(),
        })
        .collect()
}

/// Uniform lon/lat grid; cells are indexed row-major by latitude row then
/// longitude column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    /// Cells per axis; d = g^2.
    pub g: u32,
}

impl GridSpec {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64, g: u32) -> Result<Self, Error> {
        let ordered = lon_min < lon_max && lat_min < lat_max;
        if !ordered {
            return Err(Error::invalid("grid bounds must satisfy max > min"));
        }
        if g < 1 {
            return Err(Error::invalid("grid side must be >= 1"));
        }
        Ok(GridSpec { lon_min, lon_max, lat_min, lat_max, g })
    }

    pub fn dim(&self) -> usize {
        (self.g as usize) * (self.g as usize)
    }

    /// Cell index for a point, or `None` when outside the box. Points on
    /// the upper boundary clamp into the last row/column.
    pub fn cell(&self, lon: f64, lat: f64) -> Option<u32> {
        if lon < self.lon_min || lon > self.lon_max || lat < self.lat_min || lat > self.lat_max {
            return None;
        }
        let g = self.g as f64;
        let col = (((lon - self.lon_min) / (self.lon_max - self.lon_min)) * g) as u32;
        let row = (((lat - self.lat_min) / (self.lat_max - self.lat_min)) * g) as u32;
        Some(row.min(self.g - 1) * self.g + col.min(self.g - 1))
    }
}

/// How CSV rows map to buckets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CsvSchema {
    /// A categorical column is the bucket; categories are numbered by first
    /// appearance and the mapping is persisted next to the input.
    Category { user_col: String, time_col: String, category_col: String },
    /// Longitude/latitude columns are binned on a grid.
    Geo { user_col: String, time_col: String, lon_col: String, lat_col: String, grid: GridSpec },
}

/// Outcome counters of one ingestion pass. Row conservation:
/// `parsed = bucketed + skipped + out_of_box + deduplicated`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub parsed: usize,
    pub bucketed: usize,
    pub skipped: usize,
    pub out_of_box: usize,
    pub deduplicated: usize,
    pub n_users: usize,
    pub n_slots: usize,
    pub d: usize,
}

/// An ingested stream plus its report and the category mapping, when one
/// was built.
#[derive(Debug, Clone)]
pub struct IngestedStream {
    pub batches: Vec<StreamBatch>,
    pub report: IngestReport,
    pub category_map: Option<Vec<String>>,
    pub d: usize,
}

/// Reads a headered CSV and buckets rows into slots of `slot_width` time
/// units, measured from the smallest timestamp. Later duplicates of a
/// (user, slot) pair win; malformed rows are skipped and counted.
///
/// In category mode the first-appearance category mapping is persisted as
/// a JSON sidecar (`<path>.categories.json`) so repeated runs stay stable.
pub fn ingest_csv(path: &Path, schema: &CsvSchema, slot_width: f64) -> Result<IngestedStream, Error> {
    if slot_width.is_nan() || slot_width <= 0.0 {
        return Err(Error::invalid("slot width must be > 0"));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, Error> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("missing CSV column '{name}'")))
    };

    let (user_idx, time_idx) = match schema {
        CsvSchema::Category { user_col, time_col, .. } => (col(user_col)?, col(time_col)?),
        CsvSchema::Geo { user_col, time_col, .. } => (col(user_col)?, col(time_col)?),
    };
    let bucket_cols = match schema {
        CsvSchema::Category { category_col, .. } => (Some(col(category_col)?), None, None),
        CsvSchema::Geo { lon_col, lat_col, .. } => (None, Some(col(lon_col)?), Some(col(lat_col)?)),
    };

    let mut category_map: Vec<String> = load_category_sidecar(path).unwrap_or_default();
    let mut category_index: HashMap<String, u32> =
        category_map.iter().enumerate().map(|(i, c)| (c.clone(), i as u32)).collect();

    struct Row {
        user: String,
        time: f64,
        bucket: u32,
    }

    let mut report = IngestReport::default();
    let mut rows: Vec<Row> = Vec::new();
    let mut out_of_box = 0usize;
    for record in reader.records() {
        let record = record?;
        report.parsed += 1;
        let mut parse = || -> Option<(String, f64, u32)> {
            let user = record.get(user_idx)?.trim().to_string();
            if user.is_empty() {
                return None;
            }
            let time: f64 = record.get(time_idx)?.trim().parse().ok()?;
            let bucket = match (schema, bucket_cols) {
                (CsvSchema::Category { .. }, (Some(ci), _, _)) => {
                    let cat = record.get(ci)?.trim().to_string();
                    if cat.is_empty() {
                        return None;
                    }
                    *category_index.entry(cat.clone()).or_insert_with(|| {
                        category_map.push(cat);
                        (category_map.len() - 1) as u32
                    })
                }
                (CsvSchema::Geo { grid, .. }, (_, Some(lo), Some(la))) => {
                    let lon: f64 = record.get(lo)?.trim().parse().ok()?;
                    let lat: f64 = record.get(la)?.trim().parse().ok()?;
                    match grid.cell(lon, lat) {
                        Some(c) => c,
                        None => return Some((user, time, u32::MAX)),
                    }
                }
                _ => unreachable!(),
            };
            Some((user, time, bucket))
        };
        match parse() {
            Some((_, _, u32::MAX)) => out_of_box += 1,
            Some((user, time, bucket)) => rows.push(Row { user, time, bucket }),
            None => report.skipped += 1,
        }
    }
    report.out_of_box = out_of_box;

    if rows.is_empty() {
        let d = match schema {
            CsvSchema::Category { .. } => category_map.len().max(1),
            CsvSchema::Geo { grid, .. } => grid.dim(),
        };
        return Ok(IngestedStream {
            batches: Vec::new(),
            report,
            category_map: matches!(schema, CsvSchema::Category { .. }).then_some(category_map),
            d,
        });
    }

    let t_min = rows.iter().map(|r| r.time).fold(f64::INFINITY, f64::min);
    let n_slots = rows
        .iter()
        .map(|r| ((r.time - t_min) / slot_width) as usize + 1)
        .max()
        .unwrap();

    let mut user_index: HashMap<String, usize> = HashMap::new();
    for row in &rows {
        let next = user_index.len();
        user_index.entry(row.user.clone()).or_insert(next);
    }
    let n_users = user_index.len();

    // Later rows overwrite earlier ones for the same (user, slot).
    let mut assignments = vec![vec![None; n_users]; n_slots];
    let mut dedup = 0usize;
    for row in &rows {
        let slot = ((row.time - t_min) / slot_width) as usize;
        let user = user_index[&row.user];
        if assignments[slot][user].is_some() {
            dedup += 1;
        }
        assignments[slot][user] = Some(row.bucket);
    }
    report.deduplicated = dedup;
    report.bucketed = rows.len() - dedup;
    report.n_users = n_users;
    report.n_slots = n_slots;

    let d = match schema {
        CsvSchema::Category { .. } => {
            save_category_sidecar(path, &category_map)?;
            category_map.len()
        }
        CsvSchema::Geo { grid, .. } => grid.dim(),
    };
    report.d = d;

    let batches = assignments
        .into_iter()
        .enumerate()
        .map(|(idx, assignments)| StreamBatch { slot: idx as u64 + 1, assignments })
        .collect();

    Ok(IngestedStream {
        batches,
        report,
        category_map: matches!(schema, CsvSchema::Category { .. }).then_some(category_map),
        d,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".categories.json");
    path.with_file_name(name)
}

fn load_category_sidecar(path: &Path) -> Option<Vec<String>> {
    let text = fs::read_to_string(sidecar_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

fn save_category_sidecar(path: &Path, categories: &[String]) -> Result<(), Error> {
    fs::write(sidecar_path(path), serde_json::to_string_pretty(categories)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn tlns_zero_noise_is_constant() {
        let s = gen_tlns_with(100, 1, 0.0);
        assert!(s.p.iter().all(|&p| p == TLNS_INITIAL));
        assert_eq!(s.clip_events, 0);
    }

    #[test]
    fn tlns_deterministic_per_seed() {
        assert_eq!(gen_tlns(1000, 9).p, gen_tlns(1000, 9).p);
        assert_ne!(gen_tlns(1000, 9).p, gen_tlns(1000, 10).p);
    }

    #[test]
    fn tlns_stays_in_unit_interval_and_counts_clips() {
        // A huge step deviation forces frequent clipping; the counter and
        // the range invariant must both hold.
        let s = gen_tlns_with(2000, 3, 0.5);
        assert!(s.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(s.clip_events > 0);
        assert!((s.clip_fraction() - s.clip_events as f64 / 2000.0).abs() < 1e-15);
    }

    #[test]
    fn sin_range_and_quarter_period() {
        let s = gen_sin(100_000);
        let min = s.p.iter().copied().fold(f64::INFINITY, f64::min);
        let max = s.p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= 0.025 && max <= 0.125);
        // The offset 0.075 is the t=0 limit of the formula.
        assert!((s.p[0] - (0.05 * 0.01f64.sin() + 0.075)).abs() < 1e-15);
        assert!((s.p[0] - 0.075).abs() < 1e-3);
        // Quarter period at t = pi / 0.02 ~ 157.08.
        assert!((s.p[156] - 0.125).abs() < 1e-4);
    }

    #[test]
    fn log_limit_and_monotonicity() {
        let s = gen_log(10_000);
        assert!((s.p[0] - 0.25 / (1.0 + (-0.01f64).exp())).abs() < 1e-12);
        // Half the asymptote near t = 0, the asymptote by t = 1000.
        assert!((s.p[0] - 0.125).abs() < 1e-3);
        assert!((s.p[999] - 0.25 / (1.0 + (-10.0f64).exp())).abs() < 1e-5);
        assert!((s.p[999] - 0.24999).abs() < 1e-4);
        assert!(s.p.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn binary_stream_degenerate_probabilities() {
        let zero = ProbabilitySequence {
            p: vec![0.0; 3],
            kind: GeneratorKind::Sin,
            seed: None,
            clip_events: 0,
        };
        for b in realize_binary_stream(&zero, 10, 1) {
            assert!(b.assignments.iter().all(|a| *a == Some(0)));
        }
        let one = ProbabilitySequence { p: vec![1.0; 3], ..zero };
        for b in realize_binary_stream(&one, 10, 1) {
            assert!(b.assignments.iter().all(|a| *a == Some(1)));
        }
    }

    #[test]
    fn binary_stream_rate_within_binomial_band() {
        let p = ProbabilitySequence {
            p: vec![0.3],
            kind: GeneratorKind::Sin,
            seed: None,
            clip_events: 0,
        };
        let n = 100_000usize;
        let batches = realize_binary_stream(&p, n, 5);
        let ones = batches[0].histogram(2).values[1];
        let sd = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((ones - n as f64 * 0.3).abs() < 3.0 * sd);
    }

    #[test]
    fn grid_center_cell_and_boundary_clamp() {
        let g = GridSpec::new(0.0, 1.0, 0.0, 1.0, 10).unwrap();
        assert_eq!(g.cell(0.55, 0.55), Some(55));
        assert_eq!(g.cell(1.0, 0.0), Some(9), "upper lon boundary clamps to last column");
        assert_eq!(g.cell(1.0, 1.0), Some(99));
        assert_eq!(g.cell(1.5, 0.5), None);
    }

    fn write_csv(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        p
    }

    #[test]
    fn ingest_category_mode_with_dedup_and_skip() {
        let dir = std::env::temp_dir().join(format!("pwevent_ingest_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let csv = "user,ts,place\nu1,0,home\nu2,0,work\nu1,0,work\nbadrow,,\nu1,60,home\n";
        let path = write_csv(&dir, "cat.csv", csv);
        let schema = CsvSchema::Category {
            user_col: "user".into(),
            time_col: "ts".into(),
            category_col: "place".into(),
        };
        let out = ingest_csv(&path, &schema, 60.0).unwrap();
        assert_eq!(out.report.parsed, 5);
        assert_eq!(out.report.skipped, 1);
        assert_eq!(out.report.deduplicated, 1, "u1 slot 0 occurred twice, last wins");
        assert_eq!(out.report.bucketed, 2 + 1);
        assert_eq!(
            out.report.parsed,
            out.report.bucketed + out.report.skipped + out.report.out_of_box + out.report.deduplicated
        );
        assert_eq!(out.d, 2);
        assert_eq!(out.batches.len(), 2);
        // Last occurrence wins: u1 at slot 1 is "work" (index 1).
        assert_eq!(out.batches[0].assignments[0], Some(1));
        let sidecar = fs::read_to_string(sidecar_path(&path)).unwrap();
        let cats: Vec<String> = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(cats, vec!["home".to_string(), "work".to_string()]);
        // Re-ingesting reuses the persisted mapping.
        let again = ingest_csv(&path, &schema, 60.0).unwrap();
        assert_eq!(again.category_map.unwrap(), cats);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ingest_geo_mode_counts_out_of_box() {
        let dir = std::env::temp_dir().join(format!("pwevent_geo_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let csv = "id,t,lon,lat\na,0,0.55,0.55\nb,0,2.0,0.5\n";
        let path = write_csv(&dir, "geo.csv", csv);
        let schema = CsvSchema::Geo {
            user_col: "id".into(),
            time_col: "t".into(),
            lon_col: "lon".into(),
            lat_col: "lat".into(),
            grid: GridSpec::new(0.0, 1.0, 0.0, 1.0, 10).unwrap(),
        };
        let out = ingest_csv(&path, &schema, 60.0).unwrap();
        assert_eq!(out.report.out_of_box, 1);
        assert_eq!(out.report.bucketed, 1);
        assert_eq!(out.d, 100);
        assert_eq!(out.batches[0].assignments[0], Some(55));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ingest_empty_file_is_empty_stream() {
        let dir = std::env::temp_dir().join(format!("pwevent_empty_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = write_csv(&dir, "empty.csv", "user,ts,place\n");
        let schema = CsvSchema::Category {
            user_col: "user".into(),
            time_col: "ts".into(),
            category_col: "place".into(),
        };
        let out = ingest_csv(&path, &schema, 60.0).unwrap();
        assert!(out.batches.is_empty());
        assert_eq!(out.report.parsed, 0);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ingest_missing_file_is_io_error() {
        let schema = CsvSchema::Category {
            user_col: "user".into(),
            time_col: "ts".into(),
            category_col: "place".into(),
        };
        assert!(ingest_csv(Path::new("/nonexistent/x.csv"), &schema, 1.0).is_err());
    }
}
