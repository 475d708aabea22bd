//! Recording interchange format: one CSV per recording with header
//! `frame,joint,x,y,z` and one row per joint, joints in layout order
//! within each frame.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::JointLayout;
use crate::preprocess::RawRecording;

pub const RECORDING_HEADER: [&str; 5] = ["frame", "joint", "x", "y", "z"];

/// Parses recording CSV text into frame-major coordinates. `path` only
/// labels errors.
pub fn parse_recording<R: Read>(reader: R, path: &Path, layout: &JointLayout) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if headers.iter().ne(RECORDING_HEADER) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {}, found {}", RECORDING_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let names = layout.joint_names();
    let joints = names.len();
    let mut coords = Vec::new();
    let mut rows = 0usize;
    let mut last_line = 1;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(last_line + 1, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(last_line + 1, |p| p.line());
        last_line = line;
        if record.len() != 5 {
            return Err(Error::parse(path, line, format!("expected 5 columns, found {}", record.len())));
        }
        let (frame, joint) = (rows / joints, rows % joints);
        let got_frame: usize = record[0]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad frame index {:?}", &record[0])))?;
        if got_frame != frame {
            return Err(Error::parse(path, line, format!("expected frame {frame}, found {got_frame}")));
        }
        let name_ok = record[1] == *names[joint];
        let index_ok = record[1].parse::<usize>().is_ok_and(|j| j == joint);
        if !name_ok && !index_ok {
            return Err(Error::parse(
                path,
                line,
                format!("expected joint {} ({joint}), found {:?}", names[joint], &record[1]),
            ));
        }
        for k in 2..5 {
            let v: f64 = record[k]
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad coordinate {:?}", &record[k])))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("non-finite coordinate {v}")));
            }
            coords.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(path, last_line, "recording has no frames"));
    }
    if rows % joints != 0 {
        return Err(Error::parse(
            path,
            last_line,
            format!("last frame has {} of {joints} joints", rows % joints),
        ));
    }
    Ok(coords)
}

/// Reads one recording file for the given subject and class.
pub fn load_recording(
    path: &Path,
    layout: &JointLayout,
    subject_id: &str,
    gait_class: usize,
) -> Result<RawRecording> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let coords = parse_recording(std::io::BufReader::new(file), path, layout)?;
    RawRecording::new(subject_id, gait_class, layout.joint_count(), coords)
}

/// Writes `rec` in the interchange format with joint names from `layout`.
/// Coordinates are written in shortest round-trip form.
pub fn write_recording(path: &Path, rec: &RawRecording, layout: &JointLayout) -> Result<()> {
    if rec.joints != layout.joint_count() {
        return Err(Error::Layout(format!(
            "recording has {} joints, layout {} has {}",
            rec.joints,
            layout.name(),
            layout.joint_count()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(RECORDING_HEADER).map_err(io)?;
    let names = layout.joint_names();
    for t in 0..rec.frames {
        for (j, name) in names.iter().enumerate() {
            let [x, y, z] = rec.point(t, j);
            w.write_record([t.to_string(), name.clone(), x.to_string(), y.to_string(), z.to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
