use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{RawDetection, TrajectorySample};
use crate::error::{Error, Result};

/// All samples of one scene that share a start frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGroup {
    pub scene_id: String,
    pub start_frame: i64,
    pub samples: Vec<TrajectorySample>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<WindowGroup>,
    pub val: Vec<WindowGroup>,
    pub test: Vec<WindowGroup>,
}

impl Splits {
    pub fn flatten(groups: &[WindowGroup]) -> Vec<TrajectorySample> {
        groups.iter().flat_map(|g| g.samples.iter().cloned()).collect()
    }
}

/// Every frame is a candidate start; an agent contributes a sample for a
/// start frame iff it is present in all `obs_len + pred_len` frames.
///
/// Output is ordered by `(scene, start_frame, agent)`.
pub fn extract_windows(detections: &[RawDetection], obs_len: usize, pred_len: usize) -> Vec<TrajectorySample> {
    let len = (obs_len + pred_len) as i64;
    let mut tracks: BTreeMap<(&str, i64), BTreeMap<i64, [f64; 2]>> = BTreeMap::new();
    for d in detections {
        tracks
            .entry((d.scene_id.as_str(), d.agent_id))
            .or_default()
            .insert(d.frame, d.position);
    }
    let mut samples = Vec::new();
    for ((scene, agent), track) in &tracks {
        let frames: Vec<i64> = track.keys().copied().collect();
        let positions: Vec<[f64; 2]> = track.values().copied().collect();
        let mut run_start = 0;
        for i in 1..=frames.len() {
            if i < frames.len() && frames[i] == frames[i - 1] + 1 {
                continue;
            }
            // frames[run_start..i] are consecutive
            let run = (i - run_start) as i64;
            for offset in 0..(run - len + 1).max(0) as usize {
                let s = run_start + offset;
                samples.push(TrajectorySample {
                    scene_id: scene.to_string(),
                    agent_id: *agent,
                    start_frame: frames[s],
                    observed: positions[s..s + obs_len].to_vec(),
                    future: positions[s + obs_len..s + obs_len + pred_len].to_vec(),
                });
            }
            run_start = i;
        }
    }
    samples.sort_by(|a, b| {
        (a.scene_id.as_str(), a.start_frame, a.agent_id).cmp(&(b.scene_id.as_str(), b.start_frame, b.agent_id))
    });
    samples
}

/// Groups samples by `(scene, start_frame)`, in that order.
pub fn group_by_start(samples: &[TrajectorySample]) -> Vec<WindowGroup> {
    let mut groups: BTreeMap<(String, i64), Vec<TrajectorySample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.scene_id.clone(), s.start_frame))
            .or_default()
            .push(s.clone());
    }
    groups
        .into_iter()
        .map(|((scene_id, start_frame), samples)| WindowGroup {
            scene_id,
            start_frame,
            samples,
        })
        .collect()
}

/// Per scene, assigns contiguous start-frame ranges: earliest groups to
/// train, then validation, then test.
///
/// Validation and test sizes are `fraction * groups` rounded to nearest (at
/// least one group each); training takes the rest. Every split is then within
/// one group of its target.
pub fn temporal_split(groups: &[WindowGroup], fractions: (f64, f64, f64)) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut by_scene: BTreeMap<&str, Vec<&WindowGroup>> = BTreeMap::new();
    for g in groups {
        by_scene.entry(g.scene_id.as_str()).or_default().push(g);
    }
    let mut splits = Splits::default();
    for (scene, mut scene_groups) in by_scene {
        let n = scene_groups.len();
        if n < 3 {
            return Err(Error::Split {
                scene: scene.to_string(),
                groups: n,
            });
        }
        scene_groups.sort_by_key(|g| g.start_frame);
        let n_val = ((fv * n as f64).round() as usize).max((fv > 0.0) as usize);
        let n_test = ((fs * n as f64).round() as usize).max((fs > 0.0) as usize);
        let n_train = n - n_val - n_test;
        splits.train.extend(scene_groups[..n_train].iter().map(|g| (*g).clone()));
        splits.val.extend(scene_groups[n_train..n_train + n_val].iter().map(|g| (*g).clone()));
        splits.test.extend(scene_groups[n_train + n_val..].iter().map(|g| (*g).clone()));
    }
    Ok(splits)
}

/// One sample per line: `scene agent start O P x y x y ...` (observed then future).
pub fn write_samples<W: Write>(mut out: W, samples: &[TrajectorySample]) -> Result<()> {
    for s in samples {
        write!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.scene_id,
            s.agent_id,
            s.start_frame,
            s.observed.len(),
            s.future.len()
        )?;
        for p in s.observed.iter().chain(&s.future) {
            write!(out, "\t{}\t{}", p[0], p[1])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<TrajectorySample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m.to_string(),
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 5 {
            return Err(err("sample rows need at least 5 columns"));
        }
        let int = |s: &str| s.parse::<i64>().map_err(|_| err("bad integer"));
        let (o, p) = (int(cols[3])? as usize, int(cols[4])? as usize);
        if cols.len() != 5 + 2 * (o + p) {
            return Err(err("coordinate count does not match O and P"));
        }
        let coords = cols[5..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err("bad coordinate")))
            .collect::<Result<Vec<f64>>>()?;
        let pts: Vec<[f64; 2]> = coords.chunks(2).map(|c| [c[0], c[1]]).collect();
        out.push(TrajectorySample {
            scene_id: cols[0].to_string(),
            agent_id: int(cols[1])?,
            start_frame: int(cols[2])?,
            observed: pts[..o].to_vec(),
            future: pts[o..].to_vec(),
        });
    }
    Ok(out)
}
