use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Matrix3;

use super::{AnnotationFormat, RawDetection, Units};
use crate::error::{Error, Result};

/// Frame size of the UCY videos; `.vsp` coordinates are centered on it.
pub const UCY_FRAME_SIZE: (f64, f64) = (720.0, 576.0);

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn numbers(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| parse_err(path, line_no, format!("'{tok}' is not a number")))
        })
        .collect()
}

fn as_frame(path: &Path, line: usize, v: f64) -> Result<i64> {
    if v.fract() != 0.0 || v < 0.0 || !v.is_finite() {
        return Err(parse_err(path, line, format!("invalid frame index {v}")));
    }
    Ok(v as i64)
}

/// Reads annotations and returns them sorted by `(frame, agent_id)`.
///
/// `scene_id` labels formats that do not carry one (`eth_obsmat`, `ucy_vsp`).
pub fn parse_annotations(path: &Path, format: AnnotationFormat, scene_id: &str) -> Result<Vec<RawDetection>> {
    let text = fs::read_to_string(path)?;
    let mut dets = match format {
        AnnotationFormat::EthObsmat => parse_obsmat(path, &text, scene_id)?,
        AnnotationFormat::UcyVsp => parse_vsp(path, &text, scene_id)?,
        AnnotationFormat::InternalTsv => parse_tsv(path, &text)?,
    };
    dets.sort_by_key(|d| (d.frame, d.agent_id));
    Ok(dets)
}

fn check_unique(path: &Path, seen: &mut HashSet<(String, i64, i64)>, d: &RawDetection, line: usize) -> Result<()> {
    if !d.position.iter().all(|v| v.is_finite()) {
        return Err(parse_err(path, line, "non-finite position"));
    }
    if !seen.insert((d.scene_id.clone(), d.frame, d.agent_id)) {
        return Err(parse_err(
            path,
            line,
            format!("duplicate detection for agent {} at frame {}", d.agent_id, d.frame),
        ));
    }
    Ok(())
}

fn parse_obsmat(path: &Path, text: &str, scene_id: &str) -> Result<Vec<RawDetection>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v = numbers(path, line_no, line)?;
        if v.len() != 8 {
            return Err(parse_err(path, line_no, format!("expected 8 columns, found {}", v.len())));
        }
        // frame, ped, pos_x, pos_z, pos_y, v_x, v_z, v_y
        let d = RawDetection {
            scene_id: scene_id.to_string(),
            frame: as_frame(path, line_no, v[0])?,
            agent_id: v[1] as i64,
            position: [v[2], v[4]],
            units: Units::Meters,
        };
        check_unique(path, &mut seen, &d, line_no)?;
        out.push(d);
    }
    Ok(out)
}

/// Control points are linearly interpolated to every integer frame of a spline.
fn parse_vsp(path: &Path, text: &str, scene_id: &str) -> Result<Vec<RawDetection>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let mut cursor = lines.iter();
    let leading_count = |entry: Option<&(usize, &str)>| -> Result<(usize, usize)> {
        let &(line_no, l) = entry.ok_or_else(|| parse_err(path, 0, "unexpected end of file"))?;
        let tok = l.split_whitespace().next().unwrap_or("");
        tok.parse::<usize>()
            .map(|n| (line_no, n))
            .map_err(|_| parse_err(path, line_no, format!("expected a count, found '{l}'")))
    };
    let (_, splines) = leading_count(cursor.next())?;
    let (w, h) = UCY_FRAME_SIZE;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for agent in 0..splines {
        let (_, points) = leading_count(cursor.next())?;
        let mut ctrl: Vec<(i64, [f64; 2], usize)> = Vec::with_capacity(points);
        for _ in 0..points {
            let &(line_no, l) = cursor
                .next()
                .ok_or_else(|| parse_err(path, 0, "unexpected end of file inside spline"))?;
            let v = numbers(path, line_no, l)?;
            if v.len() < 3 {
                return Err(parse_err(path, line_no, "control point needs x y frame"));
            }
            let frame = as_frame(path, line_no, v[2])?;
            ctrl.push((frame, [v[0] + w / 2.0, h / 2.0 - v[1]], line_no));
        }
        ctrl.sort_by_key(|c| c.0);
        for (k, &(frame, pos, line_no)) in ctrl.iter().enumerate() {
            let d = RawDetection {
                scene_id: scene_id.to_string(),
                frame,
                agent_id: agent as i64,
                position: pos,
                units: Units::Pixels,
            };
            check_unique(path, &mut seen, &d, line_no)?;
            out.push(d);
            if let Some(&(next_frame, next_pos, _)) = ctrl.get(k + 1) {
                let span = (next_frame - frame) as f64;
                for f in frame + 1..next_frame {
                    let t = (f - frame) as f64 / span;
                    out.push(RawDetection {
                        scene_id: scene_id.to_string(),
                        frame: f,
                        agent_id: agent as i64,
                        position: [
                            pos[0] + t * (next_pos[0] - pos[0]),
                            pos[1] + t * (next_pos[1] - pos[1]),
                        ],
                        units: Units::Pixels,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn parse_tsv(path: &Path, text: &str) -> Result<Vec<RawDetection>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() != 5 {
            return Err(parse_err(path, line_no, format!("expected 5 columns, found {}", cols.len())));
        }
        let int = |s: &str, what: &str| {
            s.parse::<i64>()
                .map_err(|_| parse_err(path, line_no, format!("invalid {what} '{s}'")))
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(path, line_no, format!("'{s}' is not a number")))
        };
        let frame = int(cols[1], "frame")?;
        if frame < 0 {
            return Err(parse_err(path, line_no, "negative frame"));
        }
        let d = RawDetection {
            scene_id: cols[0].to_string(),
            frame,
            agent_id: int(cols[2], "agent id")?,
            position: [num(cols[3])?, num(cols[4])?],
            units: Units::Pixels,
        };
        check_unique(path, &mut seen, &d, line_no)?;
        out.push(d);
    }
    Ok(out)
}

pub fn read_tsv(path: &Path) -> Result<Vec<RawDetection>> {
    parse_annotations(path, AnnotationFormat::InternalTsv, "")
}

/// Writes the internal format: `scene frame agent x y`, one detection per line.
pub fn write_tsv<W: Write>(mut out: W, detections: &[RawDetection]) -> Result<()> {
    for d in detections {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", d.scene_id, d.frame, d.agent_id, d.position[0], d.position[1])?;
    }
    Ok(())
}

/// Reads a 3x3 matrix written as three whitespace-separated rows.
pub fn parse_homography(path: &Path) -> Result<Matrix3<f64>> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::with_capacity(9);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = numbers(path, i + 1, line)?;
        if row.len() != 3 {
            return Err(parse_err(path, i + 1, "homography rows need 3 values"));
        }
        values.extend(row);
    }
    if values.len() != 9 {
        return Err(parse_err(path, 0, format!("homography needs 3 rows, found {}", values.len() / 3)));
    }
    Ok(Matrix3::from_row_slice(&values))
}
