//! Dataset file formats: PGM images, TUM trajectories, IMU and track CSVs,
//! intrinsics JSON and result tables.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Vector3};
use serde::{Deserialize, Serialize};

use crate::energy::ImagePlane;
use crate::error::{Error, Result};
use crate::fusion::{CorrespondenceUncertainty, EstimateMode};
use crate::geometry::{CameraModel, ImuSample, Pixel, Pose};

pub const RESULTS_HEADER: &str = "frame,track,x_mean,y_mean,sxx,sxy,syy,k_star,lambda,clipped";

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------- PGM

/// Reads binary (P5) or ASCII (P2) PGM; intensities are divided by the maxval.
pub fn parse_pgm(bytes: &[u8], file: &str) -> Result<ImagePlane> {
    let mut pos = 0;
    let mut line = 1;
    let token = |pos: &mut usize, line: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                if bytes[*pos] == b'\n' {
                    *line += 1;
                }
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos, &mut line).ok_or_else(|| parse_err(file, 1, "empty file"))?;
    if magic != "P5" && magic != "P2" {
        return Err(parse_err(
            file,
            1,
            format!("unsupported magic '{magic}', expected P5 or P2"),
        ));
    }
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let t = token(&mut pos, &mut line).ok_or_else(|| parse_err(file, line, format!("missing {name}")))?;
        *slot = t
            .parse()
            .map_err(|_| parse_err(file, line, format!("invalid {name} '{t}'")))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(file, line, format!("maxval {maxval} outside 1..=65535")));
    }
    let count = width * height;
    let scale = maxval as f64;
    let mut values = Vec::with_capacity(count);
    if magic == "P5" {
        pos += 1;
        let size = if maxval < 256 { 1 } else { 2 };
        let data = bytes.get(pos..).unwrap_or(&[]);
        if data.len() < count * size {
            return Err(parse_err(
                file,
                line,
                format!("expected {} pixel bytes, found {}", count * size, data.len()),
            ));
        }
        for i in 0..count {
            let raw = if size == 1 {
                data[i] as usize
            } else {
                ((data[2 * i] as usize) << 8) | data[2 * i + 1] as usize
            };
            if raw > maxval {
                return Err(parse_err(file, line, format!("pixel {i} value {raw} exceeds maxval")));
            }
            values.push(raw as f64 / scale);
        }
    } else {
        for i in 0..count {
            let t = token(&mut pos, &mut line)
                .ok_or_else(|| parse_err(file, line, format!("expected {count} pixels, found {i}")))?;
            let raw: usize = t
                .parse()
                .map_err(|_| parse_err(file, line, format!("invalid pixel value '{t}'")))?;
            if raw > maxval {
                return Err(parse_err(file, line, format!("pixel value {raw} exceeds maxval")));
            }
            values.push(raw as f64 / scale);
        }
    }
    ImagePlane::new(width, height, values).map_err(|e| parse_err(file, 1, e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<ImagePlane> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_pgm(&bytes, &file_name(path))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(image: &ImagePlane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.intensities.iter().map(|v| quantize(*v)));
    out
}

pub fn encode_pgm_ascii(image: &ImagePlane) -> String {
    let mut out = format!("P2\n{} {}\n255\n", image.width, image.height);
    for row in image.intensities.chunks(image.width) {
        let line: Vec<String> = row.iter().map(|v| quantize(*v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Rounds every intensity to the nearest multiple of 1/255.
pub fn quantize_image(image: &ImagePlane) -> ImagePlane {
    ImagePlane {
        width: image.width,
        height: image.height,
        intensities: image.intensities.iter().map(|v| quantize(*v) as f64 / 255.0).collect(),
    }
}

// ---------------------------------------------------------------- delimited tables

struct Table {
    columns: HashMap<String, usize>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn get(&self, row: &[String], name: &str) -> Option<String> {
        self.columns.get(name).and_then(|&i| row.get(i)).cloned()
    }
}

/// Reads comma-separated records. A first record whose first field is not
/// numeric is a header; otherwise `positional` names the columns in order.
fn read_table(text: &str, file: &str, required: &[&str], positional: &[&str]) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut columns: Option<HashMap<String, usize>> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(file, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let fields: Vec<String> = record.iter().map(str::to_string).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        if columns.is_none() && rows.is_empty() && fields[0].parse::<f64>().is_err() {
            columns = Some(
                fields
                    .iter()
                    .enumerate()
                    .map(|(i, f)| (f.to_ascii_lowercase(), i))
                    .collect(),
            );
            continue;
        }
        rows.push((line, fields));
    }
    let columns = columns.unwrap_or_else(|| positional.iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect());
    for name in required {
        if !columns.contains_key(*name) {
            return Err(parse_err(file, 1, format!("missing column '{name}'")));
        }
    }
    Ok(Table { columns, rows })
}

fn field<T: std::str::FromStr>(table: &Table, row: &(usize, Vec<String>), name: &str, file: &str) -> Result<T> {
    let raw = table
        .get(&row.1, name)
        .ok_or_else(|| parse_err(file, row.0, format!("missing field '{name}'")))?;
    raw.parse()
        .map_err(|_| parse_err(file, row.0, format!("invalid {name} '{raw}'")))
}

fn finite(v: f64, name: &str, file: &str, line: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(file, line, format!("{name} must be finite, got {v}")))
    }
}

fn optional_f64(table: &Table, row: &(usize, Vec<String>), name: &str, file: &str) -> Result<Option<f64>> {
    match table.get(&row.1, name) {
        None => Ok(None),
        Some(s) if s.is_empty() => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| parse_err(file, row.0, format!("invalid {name} '{s}'"))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------- trajectories

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// TUM format: `timestamp tx ty tz qx qy qz qw`, whitespace separated, `#` comments.
pub fn parse_tum(text: &str, file: &str) -> Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let vals = content
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(file, line, format!("invalid number '{s}'")))
                    .and_then(|v| finite(v, "value", file, line))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 8 {
            return Err(parse_err(
                file,
                line,
                format!("expected 8 values, found {}", vals.len()),
            ));
        }
        let pose = Pose::from_quaternion(
            [vals[4], vals[5], vals[6], vals[7]],
            Vector3::new(vals[1], vals[2], vals[3]),
        )
        .map_err(|e| parse_err(file, line, e.to_string()))?;
        out.push(StampedPose {
            timestamp: vals[0],
            pose,
        });
    }
    Ok(out)
}

pub fn format_tum(poses: &[StampedPose]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let q = p.pose.quaternion();
        let t = p.pose.position;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        );
    }
    out
}

const IMU_COLUMNS: [&str; 7] = ["timestamp", "wx", "wy", "wz", "ax", "ay", "az"];

pub fn parse_imu_csv(text: &str, file: &str) -> Result<Vec<ImuSample>> {
    let table = read_table(text, file, &IMU_COLUMNS, &IMU_COLUMNS)?;
    table
        .rows
        .iter()
        .map(|row| {
            let mut v = [0.0; 7];
            for (slot, name) in v.iter_mut().zip(IMU_COLUMNS) {
                *slot = finite(field(&table, row, name, file)?, name, file, row.0)?;
            }
            Ok(ImuSample {
                timestamp: v[0],
                angular_velocity: Vector3::new(v[1], v[2], v[3]),
                acceleration: Vector3::new(v[4], v[5], v[6]),
            })
        })
        .collect()
}

pub fn format_imu_csv(samples: &[ImuSample]) -> String {
    let mut out = IMU_COLUMNS.join(",");
    out.push('\n');
    for s in samples {
        let (w, a) = (s.angular_velocity, s.acceleration);
        let _ = writeln!(out, "{},{},{},{},{},{},{}", s.timestamp, w.x, w.y, w.z, a.x, a.y, a.z);
    }
    out
}

pub fn parse_intrinsics(text: &str, file: &str) -> Result<CameraModel> {
    let camera: CameraModel = serde_json::from_str(text).map_err(|e| parse_err(file, e.line(), e.to_string()))?;
    camera.validate().map_err(|e| parse_err(file, 1, e.to_string()))?;
    Ok(camera)
}

pub fn format_intrinsics(camera: &CameraModel) -> String {
    serde_json::to_string_pretty(camera).expect("camera serializes") + "\n"
}

// ---------------------------------------------------------------- frames and tracks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame: u64,
    pub timestamp: f64,
    /// Image path, relative to the frame list's directory unless absolute.
    pub image: PathBuf,
}

pub fn parse_frames(text: &str, file: &str) -> Result<Vec<FrameEntry>> {
    let cols = ["frame", "timestamp", "image"];
    let table = read_table(text, file, &cols, &cols)?;
    let mut seen = HashSet::new();
    table
        .rows
        .iter()
        .map(|row| {
            let frame: u64 = field(&table, row, "frame", file)?;
            if !seen.insert(frame) {
                return Err(parse_err(file, row.0, format!("duplicate frame {frame}")));
            }
            let timestamp = finite(field(&table, row, "timestamp", file)?, "timestamp", file, row.0)?;
            let image: String = field(&table, row, "image", file)?;
            if image.is_empty() {
                return Err(parse_err(file, row.0, "empty image path"));
            }
            Ok(FrameEntry {
                frame,
                timestamp,
                image: PathBuf::from(image),
            })
        })
        .collect()
}

pub fn format_frames(frames: &[FrameEntry]) -> String {
    let mut out = String::from("frame,timestamp,image\n");
    for f in frames {
        let _ = writeln!(out, "{},{},{}", f.frame, f.timestamp, f.image.display());
    }
    out
}

/// One observation of a track: the visual point in `frame`, with an optional
/// depth prior of the point in that frame's camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub frame: u64,
    pub track: u64,
    pub point: Pixel,
    #[serde(default)]
    pub depth: Option<f64>,
}

pub fn parse_tracks(text: &str, file: &str) -> Result<Vec<TrackObservation>> {
    let table = read_table(
        text,
        file,
        &["frame", "track", "x", "y"],
        &["frame", "track", "x", "y", "depth"],
    )?;
    let mut seen = HashSet::new();
    table
        .rows
        .iter()
        .map(|row| {
            let frame: u64 = field(&table, row, "frame", file)?;
            let track: u64 = field(&table, row, "track", file)?;
            if !seen.insert((frame, track)) {
                return Err(parse_err(
                    file,
                    row.0,
                    format!("duplicate observation of track {track} in frame {frame}"),
                ));
            }
            let x = finite(field(&table, row, "x", file)?, "x", file, row.0)?;
            let y = finite(field(&table, row, "y", file)?, "y", file, row.0)?;
            let depth = optional_f64(&table, row, "depth", file)?;
            if let Some(d) = depth {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(parse_err(file, row.0, format!("depth must be positive, got {d}")));
                }
            }
            Ok(TrackObservation {
                frame,
                track,
                point: Pixel::new(x, y),
                depth,
            })
        })
        .collect()
}

pub fn format_tracks(tracks: &[TrackObservation]) -> String {
    let with_depth = tracks.iter().any(|t| t.depth.is_some());
    let mut out = String::from(if with_depth {
        "frame,track,x,y,depth\n"
    } else {
        "frame,track,x,y\n"
    });
    for t in tracks {
        let _ = write!(out, "{},{},{},{}", t.frame, t.track, t.point.x, t.point.y);
        if with_depth {
            let _ = write!(out, ",{}", fmt_opt(t.depth));
        }
        out.push('\n');
    }
    out
}

/// True correspondence of a track in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub frame: u64,
    pub track: u64,
    pub point: Pixel,
}

pub fn parse_truth(text: &str, file: &str) -> Result<Vec<TruthRow>> {
    Ok(parse_tracks(text, file)?
        .into_iter()
        .map(|t| TruthRow {
            frame: t.frame,
            track: t.track,
            point: t.point,
        })
        .collect())
}

pub fn format_truth(rows: &[TruthRow]) -> String {
    let mut out = String::from("frame,track,x,y\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.frame, r.track, r.point.x, r.point.y);
    }
    out
}

// ---------------------------------------------------------------- results

/// One estimated correspondence as written to result files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub frame: u64,
    pub track: u64,
    pub x_mean: f64,
    pub y_mean: f64,
    pub sxx: f64,
    pub sxy: f64,
    pub syy: f64,
    pub k_star: Option<f64>,
    pub lambda: Option<f64>,
    pub clipped: bool,
    /// Visual point; carried in JSON output only.
    #[serde(default)]
    pub visual: Option<Pixel>,
    #[serde(default)]
    pub mode: Option<EstimateMode>,
}

impl ResultRow {
    pub fn from_estimate(frame: u64, track: u64, u: &CorrespondenceUncertainty) -> Self {
        let nan_none = |v: f64| (!v.is_nan()).then_some(v);
        ResultRow {
            frame,
            track,
            x_mean: u.mean.x,
            y_mean: u.mean.y,
            sxx: u.covariance[(0, 0)],
            sxy: 0.5 * (u.covariance[(0, 1)] + u.covariance[(1, 0)]),
            syy: u.covariance[(1, 1)],
            k_star: nan_none(u.mean_k_star()),
            lambda: nan_none(u.mean_lambda()),
            clipped: u.any_clipped(),
            visual: Some(u.visual_point),
            mode: Some(u.mode),
        }
    }

    pub fn mean(&self) -> Pixel {
        Pixel::new(self.x_mean, self.y_mean)
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        Matrix2::new(self.sxx, self.sxy, self.sxy, self.syy)
    }
}

pub fn format_results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.track,
            r.x_mean,
            r.y_mean,
            r.sxx,
            r.sxy,
            r.syy,
            fmt_opt(r.k_star),
            fmt_opt(r.lambda),
            r.clipped
        );
    }
    out
}

pub fn parse_results_csv(text: &str, file: &str) -> Result<Vec<ResultRow>> {
    let cols: Vec<&str> = RESULTS_HEADER.split(',').collect();
    let table = read_table(text, file, &cols, &cols)?;
    table
        .rows
        .iter()
        .map(|row| {
            let num = |name: &str| -> Result<f64> { finite(field(&table, row, name, file)?, name, file, row.0) };
            let clipped: String = field(&table, row, "clipped", file)?;
            let clipped = match clipped.as_str() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(parse_err(file, row.0, format!("invalid clipped flag '{other}'"))),
            };
            Ok(ResultRow {
                frame: field(&table, row, "frame", file)?,
                track: field(&table, row, "track", file)?,
                x_mean: num("x_mean")?,
                y_mean: num("y_mean")?,
                sxx: num("sxx")?,
                sxy: num("sxy")?,
                syy: num("syy")?,
                k_star: optional_f64(&table, row, "k_star", file)?,
                lambda: optional_f64(&table, row, "lambda", file)?,
                clipped,
                visual: None,
                mode: None,
            })
        })
        .collect()
}

pub fn format_results_json(rows: &[ResultRow]) -> String {
    serde_json::to_string_pretty(rows).expect("results serialize") + "\n"
}

pub fn parse_results_json(text: &str, file: &str) -> Result<Vec<ResultRow>> {
    serde_json::from_str(text).map_err(|e| parse_err(file, e.line(), e.to_string()))
}

/// Reads results as JSON when the path ends in `.json`, CSV otherwise.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_results_json(&text, &file_name(path))
    } else {
        parse_results_csv(&text, &file_name(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_binary_and_ascii() {
        let img = ImagePlane::new(3, 2, vec![0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0, 0.5, 0.25]).unwrap();
        let q = quantize_image(&img);
        assert_eq!(parse_pgm(&encode_pgm(&img), "a.pgm").unwrap(), q);
        assert_eq!(parse_pgm(encode_pgm_ascii(&img).as_bytes(), "a.pgm").unwrap(), q);
        let with_comment = b"P2\n# made by hand\n2 2\n# max\n4\n0 4\n2 1\n";
        assert_eq!(
            parse_pgm(with_comment, "c.pgm").unwrap().intensities,
            vec![0.0, 1.0, 0.5, 0.25]
        );
    }

    #[test]
    fn pgm_errors_carry_lines() {
        match parse_pgm(b"P2\n2 2\n255\n0 1\nx 3\n", "bad.pgm") {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, "bad.pgm");
                assert_eq!(line, 5);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_pgm(b"P6\n1 1\n255\n", "x").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00", "x").is_err());
    }

    #[test]
    fn tum_parse() {
        let text = "# comment\n1.5 1 2 3 0 0 0 1\n\n2.0 0 0 0 0 0 0.7071067811865476 0.7071067811865476 # tail\n";
        let poses = parse_tum(text, "t.txt").unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].pose.position, Vector3::new(1.0, 2.0, 3.0));
        let bad = parse_tum("1 2 3\n", "t.txt").unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 1, .. }), "{bad}");
    }

    #[test]
    fn imu_optional_header() {
        let a = parse_imu_csv("timestamp,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.81\n", "i.csv").unwrap();
        let b = parse_imu_csv("0,0,0,0,0,0,9.81\n", "i.csv").unwrap();
        assert_eq!(a, b);
        let err = parse_imu_csv("0,0,0,0,0,0,9.81\n0.1,0,0,zz,0,0,9.81\n", "i.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn tracks_reject_duplicates_and_reordered_headers_work() {
        let err = parse_tracks("frame,track,x,y\n0,1,2,3\n0,1,4,5\n", "t.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let t = parse_tracks("y,x,track,frame,depth\n3,2,1,0,\n", "t.csv").unwrap();
        assert_eq!(t[0].point, Pixel::new(2.0, 3.0));
        assert_eq!(t[0].depth, None);
        assert!(parse_tracks("frame,track,x\n0,1,2\n", "t.csv").is_err());
    }

    #[test]
    fn results_header_is_exact() {
        let text = format_results_csv(&[]);
        assert_eq!(text, "frame,track,x_mean,y_mean,sxx,sxy,syy,k_star,lambda,clipped\n");
    }

    fn finite_f64() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6..1e6f64, Just(0.0), Just(1e-300), Just(-2.5e-7)]
    }

    prop_compose! {
        fn pose_strategy()(axis in prop::array::uniform3(-1.0..1.0f64), angle in -3.0..3.0f64,
                           p in prop::array::uniform3(-100.0..100.0f64)) -> Pose {
            let r = nalgebra::Rotation3::new(Vector3::from(axis).normalize() * angle);
            Pose { rotation: r, position: Vector3::from(p) }
        }
    }

    proptest! {
        #[test]
        fn tracks_round_trip(rows in prop::collection::vec((0u64..50, finite_f64(), finite_f64(), prop::option::of(0.1..100.0f64)), 0..30)) {
            let tracks: Vec<TrackObservation> = rows.iter().enumerate().map(|(i, (f, x, y, d))| TrackObservation {
                frame: *f, track: i as u64, point: Pixel::new(*x, *y), depth: *d,
            }).collect();
            prop_assert_eq!(parse_tracks(&format_tracks(&tracks), "t").unwrap(), tracks);
        }

        #[test]
        fn results_round_trip(rows in prop::collection::vec((finite_f64(), finite_f64(), 0.0..10.0f64, prop::option::of(0.0..100.0f64), prop::option::of(0.0..1.0f64), any::<bool>()), 0..20)) {
            let results: Vec<ResultRow> = rows.iter().enumerate().map(|(i, (x, y, s, k, l, c))| ResultRow {
                frame: i as u64 / 3, track: i as u64, x_mean: *x, y_mean: *y, sxx: *s, sxy: -s / 3.0, syy: s * 2.0,
                k_star: *k, lambda: *l, clipped: *c, visual: None, mode: None,
            }).collect();
            prop_assert_eq!(&parse_results_csv(&format_results_csv(&results), "r").unwrap(), &results);
            prop_assert_eq!(&parse_results_json(&format_results_json(&results), "r").unwrap(), &results);
        }

        #[test]
        fn imu_round_trip(vals in prop::collection::vec(prop::array::uniform6(finite_f64()), 0..20)) {
            let samples: Vec<ImuSample> = vals.iter().enumerate().map(|(i, v)| ImuSample {
                timestamp: i as f64 * 0.005,
                angular_velocity: Vector3::new(v[0], v[1], v[2]),
                acceleration: Vector3::new(v[3], v[4], v[5]),
            }).collect();
            prop_assert_eq!(parse_imu_csv(&format_imu_csv(&samples), "i").unwrap(), samples);
        }

        #[test]
        fn tum_round_trip(poses in prop::collection::vec(pose_strategy(), 0..10)) {
            let stamped: Vec<StampedPose> = poses.iter().enumerate()
                .map(|(i, p)| StampedPose { timestamp: i as f64 * 0.05, pose: *p }).collect();
            let back = parse_tum(&format_tum(&stamped), "t").unwrap();
            prop_assert_eq!(back.len(), stamped.len());
            for (a, b) in back.iter().zip(&stamped) {
                prop_assert_eq!(a.timestamp, b.timestamp);
                prop_assert_eq!(a.pose.position, b.pose.position);
                prop_assert!((a.pose.rotation.matrix() - b.pose.rotation.matrix()).abs().max() < 1e-12);
            }
        }

        #[test]
        fn frames_round_trip(n in 0usize..20, t0 in 0.0..1e5f64) {
            let frames: Vec<FrameEntry> = (0..n).map(|i| FrameEntry {
                frame: i as u64 * 2, timestamp: t0 + i as f64 * 0.05, image: PathBuf::from(format!("img/{i:04}.pgm")),
            }).collect();
            prop_assert_eq!(parse_frames(&format_frames(&frames), "f").unwrap(), frames);
        }

        #[test]
        fn pgm_round_trip(w in 2usize..12, h in 2usize..12, seed in any::<u64>()) {
            let mut x = seed;
            let vals: Vec<f64> = (0..w * h).map(|_| { x = crate::synthlab::splitmix64(x); (x % 256) as f64 / 255.0 }).collect();
            let img = ImagePlane::new(w, h, vals).unwrap();
            prop_assert_eq!(&parse_pgm(&encode_pgm(&img), "p").unwrap(), &img);
            prop_assert_eq!(&parse_pgm(encode_pgm_ascii(&img).as_bytes(), "p").unwrap(), &img);
        }

        #[test]
        fn intrinsics_round_trip(fx in 1.0..1e3f64, frac in 0.0..1.0f64, w in 2u32..2000) {
            let c = CameraModel { fx, fy: fx * 1.01, cx: frac * w as f64, cy: frac * (w / 2) as f64, width: w, height: w / 2 + 2 };
            prop_assert_eq!(parse_intrinsics(&format_intrinsics(&c), "c").unwrap(), c);
        }
    }
}
