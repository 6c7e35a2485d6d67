//! Camera trajectory files: a provenance line, then one JSON record per
//! trajectory.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use camplan::geom::CameraTrajectory;
use camplan::synth::Provenance;

use crate::CliError;

pub const FORMAT: &str = "camplan-trajectories";

#[derive(Serialize, Deserialize)]
struct Record {
    index: usize,
    fps: f64,
    camera: Vec<[f64; 9]>,
}

pub fn write_trajectories(
    path: &Path,
    trajs: &[CameraTrajectory],
    seed: u64,
) -> anyhow::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &Provenance::new(FORMAT, seed))?;
    w.write_all(b"\n")?;
    for (index, t) in trajs.iter().enumerate() {
        let rec = Record {
            index,
            fps: t.fps,
            camera: t.to_9d(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> anyhow::Result<Vec<CameraTrajectory>> {
    let r = BufReader::new(
        std::fs::File::open(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?,
    );
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() || serde_json::from_str::<Provenance>(&line).is_ok() {
            continue;
        }
        let index = out.len();
        let bad = |msg: String| CliError::Data {
            index: Some(index),
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let t = CameraTrajectory::from_9d(&rec.camera, rec.fps).map_err(|e| bad(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use camplan::synth::dataset_sample;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let ts: Vec<_> = (0..3)
            .map(|i| dataset_sample(1, i, 8).unwrap().camera)
            .collect();
        write_trajectories(&p, &ts, 4).unwrap();
        let back = read_trajectories(&p).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&ts) {
            for (x, y) in a.to_9d().iter().zip(b.to_9d()) {
                assert!(x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12));
            }
        }
    }
}
