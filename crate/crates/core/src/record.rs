//! Observation/action trajectories and their on-disk layout: a directory
//! with `manifest.txt`, one 8-bit PGM per frame channel under `frames/`,
//! and `measurements.csv` / `actions.csv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gridops::{ChannelRole, GridSpec, Ogm, ValueMode};
use crate::kinematics::{replay, ActionCmd, EgoState, Measurements, PoseDelta};

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub grid: GridSpec,
    pub dt: f64,
    /// `T` frames.
    pub frames: Vec<Ogm>,
    /// `T` ego measurements, one per frame.
    pub measurements: Vec<Measurements>,
    /// `T − 1` actions; action `t` leads from frame `t` to `t + 1`.
    pub actions: Vec<ActionCmd>,
    /// Simulation steps with overlapping vehicles; not stored on disk.
    pub collisions: usize,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Per-step ego motion, replayed from the first measurement through the
    /// recorded actions.
    pub fn deltas(&self) -> Result<Vec<PoseDelta>> {
        let first = self
            .measurements
            .first()
            .ok_or_else(|| Error::invalid("empty record"))?;
        let mut ego = EgoState::new(*first, 0.0);
        let mut out = Vec::with_capacity(self.actions.len());
        for a in &self.actions {
            let (next, d) = ego.step(a, self.dt)?;
            out.push(d);
            ego = next;
        }
        Ok(out)
    }

    /// Structural consistency of the in-memory record.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t < 2 {
            return Err(Error::invalid(format!(
                "a record needs at least 2 frames, got {t}"
            )));
        }
        if self.measurements.len() != t || self.actions.len() != t - 1 {
            return Err(Error::invalid(format!(
                "{t} frames need {t} measurements and {} actions, got {} and {}",
                t - 1,
                self.measurements.len(),
                self.actions.len()
            )));
        }
        if let Some(f) = self.frames.iter().find(|f| f.grid != self.grid) {
            return Err(Error::Shape {
                op: "record",
                left: format!("{:?}", self.grid.shape()),
                right: format!("{:?}", f.grid.shape()),
            });
        }
        Ok(())
    }
}

pub const MANIFEST: &str = "manifest.txt";
pub const MEASUREMENTS: &str = "measurements.csv";
pub const ACTIONS: &str = "actions.csv";

/// Manifest contents; field order is the file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub grid: GridSpec,
    pub dt: f64,
    pub length: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let roles: Vec<&str> = g.roles.iter().map(|r| r.as_str()).collect();
        format!(
            "h={}\nw={}\nc={}\nmeters_per_pixel={}\ndt={}\nego_anchor_row={}\nego_anchor_col={}\nvalue_mode={}\nchannel_roles={}\nlength={}\n",
            g.h,
            g.w,
            g.c(),
            g.meters_per_pixel,
            self.dt,
            g.anchor[0],
            g.anchor[1],
            g.mode,
            roles.join(","),
            self.length
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::data(path, reason);
        let mut fields = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
            if fields
                .insert(k.trim().to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(bad(format!("duplicate key `{}`", k.trim())));
            }
        }
        const KEYS: [&str; 10] = [
            "h",
            "w",
            "c",
            "meters_per_pixel",
            "dt",
            "ego_anchor_row",
            "ego_anchor_col",
            "value_mode",
            "channel_roles",
            "length",
        ];
        if let Some(k) = fields.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(bad(format!("unknown key `{k}`")));
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| bad(format!("missing key `{k}`")))
        };
        fn num<T: std::str::FromStr>(v: &str, k: &str, path: &Path) -> Result<T> {
            v.parse()
                .map_err(|_| Error::data(path, format!("`{k}` has invalid value `{v}`")))
        }
        let roles = get("channel_roles")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<ChannelRole>()
                    .map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let c: usize = num(get("c")?, "c", path)?;
        if c != roles.len() {
            return Err(bad(format!("c={c} but {} channel roles", roles.len())));
        }
        let grid = GridSpec {
            h: num(get("h")?, "h", path)?,
            w: num(get("w")?, "w", path)?,
            roles,
            anchor: [
                num(get("ego_anchor_row")?, "ego_anchor_row", path)?,
                num(get("ego_anchor_col")?, "ego_anchor_col", path)?,
            ],
            meters_per_pixel: num(get("meters_per_pixel")?, "meters_per_pixel", path)?,
            mode: get("value_mode")?
                .parse::<ValueMode>()
                .map_err(|e| bad(e.to_string()))?,
        };
        grid.validate().map_err(|e| bad(e.to_string()))?;
        let dt: f64 = num(get("dt")?, "dt", path)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(bad(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            grid,
            dt,
            length: num(get("length")?, "length", path)?,
        })
    }
}

pub fn frame_path(dir: &Path, t: usize, ch: usize) -> PathBuf {
    dir.join("frames").join(format!("t{t:05}_c{ch}.pgm"))
}

/// Stores one plane as binary PGM. Values are rounded to the nearest of
/// the 256 levels.
pub fn encode_pgm(plane: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        plane
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Parses a binary PGM with maxval 255 into `(h, w, bytes)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| Error::data(path, reason.to_string());
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?,
        );
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad("invalid PGM dimensions"))
    };
    let (w, h) = (dim(tokens[1])?, dim(tokens[2])?);
    if tokens[3] != "255" {
        return Err(bad("PGM maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != h * w {
        return Err(bad(&format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            h * w
        )));
    }
    Ok((h, w, raster.to_vec()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::data(path, e.to_string())
}

/// Writes `record` into `dir`, creating it if needed.
pub fn write_record(record: &SequenceRecord, dir: &Path) -> Result<()> {
    record.validate()?;
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    let manifest = Manifest {
        grid: record.grid.clone(),
        dt: record.dt,
        length: record.len(),
    };
    write_file(&dir.join(MANIFEST), manifest.to_text().as_bytes())?;
    let (h, w) = (record.grid.h, record.grid.w);
    for (t, frame) in record.frames.iter().enumerate() {
        for ch in 0..record.grid.c() {
            write_file(
                &frame_path(dir, t, ch),
                &encode_pgm(frame.channel(ch), h, w),
            )?;
        }
    }
    let path = dir.join(MEASUREMENTS);
    let mut out = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    out.write_record(["t", "px", "py", "vx", "vy"])
        .map_err(|e| csv_err(&path, e))?;
    for (t, m) in record.measurements.iter().enumerate() {
        out.write_record([
            t.to_string(),
            m.p[0].to_string(),
            m.p[1].to_string(),
            m.v[0].to_string(),
            m.v[1].to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join(ACTIONS);
    let mut out = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    out.write_record(["t", "alpha", "tau"])
        .map_err(|e| csv_err(&path, e))?;
    for (t, a) in record.actions.iter().enumerate() {
        out.write_record([t.to_string(), a.alpha.to_string(), a.tau.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

/// Reads the rows of a numeric CSV with the given header; the first column
/// must count up from 0.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found = reader.headers().map_err(|e| csv_err(path, e))?;
    if found.iter().collect::<Vec<_>>() != header {
        return Err(Error::data(
            path,
            format!("expected header {}", header.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.get(0).and_then(|s| s.parse::<usize>().ok()) != Some(i) {
            return Err(Error::data(
                path,
                format!("row {} should have t={i}", i + 1),
            ));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::data(path, format!("row {} has a non-numeric value", i + 1)))?;
        rows.push(vals);
    }
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

pub fn read_record(dir: &Path) -> Result<SequenceRecord> {
    let manifest = read_manifest(dir)?;
    let grid = manifest.grid.clone();
    let (h, w) = (grid.h, grid.w);
    let mut frames = Vec::with_capacity(manifest.length);
    for t in 0..manifest.length {
        let mut data = Vec::with_capacity(grid.len());
        for ch in 0..grid.c() {
            let path = frame_path(dir, t, ch);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (fh, fw, raster) = decode_pgm(&bytes, &path)?;
            if (fh, fw) != (h, w) {
                return Err(Error::data(
                    &path,
                    format!("frame is {fh}×{fw}, manifest says {h}×{w}"),
                ));
            }
            if grid.mode == ValueMode::Binary {
                if let Some(v) = raster.iter().find(|&&v| v != 0 && v != 255) {
                    return Err(Error::data(&path, format!("binary frame holds level {v}")));
                }
            }
            data.extend(raster.iter().map(|&v| v as f32 / 255.0));
        }
        frames.push(Ogm::new(grid.clone(), data)?);
    }
    let path = dir.join(MEASUREMENTS);
    let measurements: Vec<Measurements> = read_rows(&path, &["t", "px", "py", "vx", "vy"])?
        .into_iter()
        .map(|r| Measurements {
            p: [r[0], r[1]],
            v: [r[2], r[3]],
        })
        .collect();
    if measurements.len() != manifest.length {
        return Err(Error::data(
            &path,
            format!("{} rows, expected {}", measurements.len(), manifest.length),
        ));
    }
    let path = dir.join(ACTIONS);
    let actions: Vec<ActionCmd> = read_rows(&path, &["t", "alpha", "tau"])?
        .into_iter()
        .map(|r| ActionCmd::new(r[0], r[1]))
        .collect();
    if actions.len() + 1 != manifest.length {
        return Err(Error::data(
            &path,
            format!(
                "{} rows, expected {}",
                actions.len(),
                manifest.length.saturating_sub(1)
            ),
        ));
    }
    let record = SequenceRecord {
        grid,
        dt: manifest.dt,
        frames,
        measurements,
        actions,
        collisions: 0,
    };
    record
        .validate()
        .map_err(|e| Error::data(dir, e.to_string()))?;
    Ok(record)
}

/// Every problem found in a stored record, one line each. Empty means the
/// record is valid.
pub fn check_record(dir: &Path) -> Vec<String> {
    let record = match read_record(dir) {
        Ok(r) => r,
        Err(e) => return vec![e.to_string()],
    };
    let mut failures = Vec::new();
    let heading = record.measurements[0].heading().unwrap_or(0.0);
    match replay(&record.measurements[0], heading, &record.actions, record.dt) {
        Ok(path) => {
            for (t, (a, b)) in path.iter().zip(&record.measurements).enumerate() {
                let err = (0..2)
                    .map(|i| (a.p[i] - b.p[i]).abs().max((a.v[i] - b.v[i]).abs()))
                    .fold(0.0, f64::max);
                if err > 1e-6 {
                    failures.push(format!(
                        "{}: row {t} disagrees with the replayed actions by {err:.3e}",
                        dir.join(MEASUREMENTS).display()
                    ));
                    break;
                }
            }
        }
        Err(e) => failures.push(format!("{}: {e}", dir.join(ACTIONS).display())),
    }
    let egos = record.grid.channels_with(ChannelRole::Ego);
    if egos.is_empty() {
        failures.push(format!("{}: no ego channel", dir.join(MANIFEST).display()));
    }
    for (t, f) in record.frames.iter().enumerate() {
        for &ch in &egos {
            if f.mass(ch) == 0.0 {
                failures.push(format!(
                    "{}: empty ego channel",
                    frame_path(dir, t, ch).display()
                ));
            }
        }
    }
    failures
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_level_survives_pgm() {
        let plane: Vec<f32> = (0..=255u8).map(|v| v as f32 / 255.0).collect();
        let bytes = encode_pgm(&plane, 16, 16);
        let (h, w, raster) = decode_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((h, w), (16, 16));
        assert_eq!(raster, (0..=255u8).collect::<Vec<_>>());
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        assert_eq!(
            decode_pgm(&bytes, Path::new("x")).unwrap(),
            (1, 2, vec![7, 9])
        );
    }

    #[test]
    fn truncated_pgm_names_the_file() {
        let bytes = &encode_pgm(&[0.5; 4], 2, 2)[..12];
        let err = decode_pgm(bytes, Path::new("frames/t00003_c1.pgm")).unwrap_err();
        assert!(err.to_string().contains("t00003_c1.pgm"), "{err}");
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = Manifest {
            grid: GridSpec {
                h: 32,
                w: 48,
                roles: vec![ChannelRole::Occupancy, ChannelRole::Ego],
                anchor: [16, 24],
                meters_per_pixel: 0.75,
                mode: ValueMode::Binary,
            },
            dt: 0.1,
            length: 40,
        };
        let text = m.to_text();
        let back = Manifest::parse(&text, Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let text = "h=1\nw=1\nc=1\nmeters_per_pixel=1\ndt=0.1\nego_anchor_row=0\nego_anchor_col=0\nvalue_mode=real\nchannel_roles=ego\nlength=2\ncolour=red\n";
        let err = Manifest::parse(text, Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("colour"));
    }
}
