//! JSONL frame files with a JSON metadata sidecar.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, DatasetMeta, LabeledFrame, Result, Trajectory};

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const META_FILE: &str = "meta.json";

pub fn write_frames<'a, W: Write>(writer: W, frames: impl IntoIterator<Item = &'a LabeledFrame>) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses one frame per non-blank line; errors carry the 1-based line number.
pub fn read_frames<R: Read>(reader: R) -> Result<Vec<LabeledFrame>> {
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        frames.push(frame);
    }
    Ok(frames)
}

/// Groups frames into trajectories in order of first appearance.
pub fn assemble(meta: DatasetMeta, frames: Vec<LabeledFrame>) -> Result<Dataset> {
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for f in frames {
        let k = *index.entry(f.traj.clone()).or_insert_with(|| {
            trajectories.push(Trajectory {
                id: f.traj.clone(),
                frames: Vec::new(),
            });
            trajectories.len() - 1
        });
        trajectories[k].frames.push(f);
    }
    let ds = Dataset { meta, trajectories };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = serde_json::to_string_pretty(&ds.meta)?;
    meta.push('\n');
    fs::write(dir.join(META_FILE), meta)?;
    write_frames(File::create(dir.join(FRAMES_FILE))?, ds.frames())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| DataError::Inconsistent(format!("{}: {e}", meta_path.display())))?;
    let frames = read_frames(File::open(dir.join(FRAMES_FILE))?)?;
    assemble(meta, frames)
}
