//! TUM-format dataset ingestion and trajectory file I/O.
//!
//! `rgb.txt` lists "timestamp filename" pairs ('#' starts a comment),
//! `groundtruth.txt` lists "timestamp tx ty tz qx qy qz qw" with the pose as
//! camera-to-world. Depth maps, when present, follow `depth.txt` with the
//! 16-bit PNG scale of 5000.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geom::Pose;

#[derive(Clone, Debug)]
pub struct TumFrame {
    pub timestamp: f64,
    pub rgb_path: PathBuf,
    pub depth_path: Option<PathBuf>,
    /// Ground-truth camera-to-world pose associated by nearest timestamp.
    pub gt_pose: Option<Pose>,
}

#[derive(Clone, Debug)]
pub struct TumDataset {
    pub root: PathBuf,
    pub frames: Vec<TumFrame>,
    pub groundtruth: Trajectory,
}

fn parse_timed_lines(path: &Path, fields: usize) -> Result<Vec<(f64, Vec<String>)>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        if parts.len() != fields {
            return Err(Error::ParseLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected {fields} fields, got {}", parts.len()),
            });
        }
        let timestamp: f64 = parts[0].parse().map_err(|_| Error::ParseLine {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("bad timestamp {:?}", parts[0]),
        })?;
        out.push((
            timestamp,
            parts[1..].iter().map(|s| s.to_string()).collect(),
        ));
    }
    Ok(out)
}

/// Parse a groundtruth-style file into a trajectory (camera-to-world poses).
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let rows = parse_timed_lines(path, 8)?;
    let mut sorted = rows;
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut traj = Trajectory::new();
    for (lineno, (timestamp, fields)) in sorted.into_iter().enumerate() {
        let num = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| Error::ParseLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad number {:?}", fields[i]),
            })
        };
        let t = Vector3::new(num(0)?, num(1)?, num(2)?);
        let (qx, qy, qz, qw) = (num(3)?, num(4)?, num(5)?, num(6)?);
        let rot = UnitQuaternion::new_normalize(Quaternion::new(qw, qx, qy, qz));
        traj.push(timestamp, Pose::new(rot, t)).map_err(|e| {
            Error::ParseLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            }
        })?;
    }
    Ok(traj)
}

/// Write a trajectory in TUM format: "timestamp tx ty tz qx qy qz qw".
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (t, pose) in traj.timestamps.iter().zip(&traj.poses) {
        let q = pose.rotation.quaternion();
        writeln!(
            file,
            "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            pose.translation.x, pose.translation.y, pose.translation.z, q.i, q.j, q.k, q.w
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Load a TUM-format dataset root: `rgb.txt` and `groundtruth.txt` required,
/// `depth.txt` optional. Frames come out timestamp-sorted with ground truth
/// associated by nearest timestamp within 20 ms.
pub fn load_tum_dataset(root: &Path) -> Result<TumDataset> {
    let rgb_file = root.join("rgb.txt");
    let gt_file = root.join("groundtruth.txt");
    if !rgb_file.exists() {
        return Err(Error::MissingFile(rgb_file));
    }
    if !gt_file.exists() {
        return Err(Error::MissingFile(gt_file));
    }

    let mut rgb_rows = parse_timed_lines(&rgb_file, 2)?;
    rgb_rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let groundtruth = load_trajectory(&gt_file)?;

    // Optional depth listing, associated by nearest timestamp.
    let depth_rows = {
        let depth_file = root.join("depth.txt");
        if depth_file.exists() {
            let mut rows = parse_timed_lines(&depth_file, 2)?;
            rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            rows
        } else {
            Vec::new()
        }
    };
    let nearest_depth = |t: f64| -> Option<PathBuf> {
        if depth_rows.is_empty() {
            return None;
        }
        let idx = depth_rows.partition_point(|(x, _)| *x < t);
        let mut best: Option<(f64, &str)> = None;
        for cand in [idx.wrapping_sub(1), idx] {
            if let Some((ts, fields)) = depth_rows.get(cand) {
                let d = (ts - t).abs();
                if best.is_none() || d < best.unwrap().0 {
                    best = Some((d, &fields[0]));
                }
            }
        }
        best.filter(|(d, _)| *d <= 0.02).map(|(_, f)| root.join(f))
    };

    let mut frames = Vec::with_capacity(rgb_rows.len());
    for (timestamp, fields) in rgb_rows {
        let gt_pose = {
            let idx = groundtruth
                .timestamps
                .partition_point(|&x| x < timestamp);
            let mut best: Option<(f64, Pose)> = None;
            for cand in [idx.wrapping_sub(1), idx] {
                if cand < groundtruth.timestamps.len() {
                    let d = (groundtruth.timestamps[cand] - timestamp).abs();
                    if best.is_none() || d < best.unwrap().0 {
                        best = Some((d, groundtruth.poses[cand]));
                    }
                }
            }
            best.filter(|(d, _)| *d <= 0.02).map(|(_, p)| p)
        };
        frames.push(TumFrame {
            timestamp,
            rgb_path: root.join(&fields[0]),
            depth_path: nearest_depth(timestamp),
            gt_pose,
        });
    }

    Ok(TumDataset {
        root: root.to_path_buf(),
        frames,
        groundtruth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn write(path: &Path, content: &str) {
        std::fs::write(path, content).unwrap();
    }

    #[test]
    fn rgb_parsing_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        write(
            &dir.path().join("rgb.txt"),
            "# color images\n1.0 rgb/1.png\n2.0 rgb/2.png\n",
        );
        write(
            &dir.path().join("groundtruth.txt"),
            "# gt\n1.0 0 0 0 0 0 0 1\n2.0 0.1 0 0 0 0 0 1\n",
        );
        let ds = load_tum_dataset(dir.path()).unwrap();
        assert_eq!(ds.frames.len(), 2);
        assert_eq!(ds.frames[0].rgb_path, dir.path().join("rgb/1.png"));
    }

    #[test]
    fn identity_quaternion_gives_identity_pose() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("rgb.txt"), "1.0 rgb/1.png\n");
        write(&dir.path().join("groundtruth.txt"), "1.0 1 2 3 0 0 0 1\n");
        let ds = load_tum_dataset(dir.path()).unwrap();
        let pose = ds.frames[0].gt_pose.unwrap();
        assert_relative_eq!(pose.rotation.angle(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(pose.translation.x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shuffled_lines_come_out_sorted() {
        let dir = tempfile::tempdir().unwrap();
        write(
            &dir.path().join("rgb.txt"),
            "3.0 rgb/3.png\n1.0 rgb/1.png\n2.0 rgb/2.png\n",
        );
        write(
            &dir.path().join("groundtruth.txt"),
            "2.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 0 1\n3.0 0 0 0 0 0 0 1\n",
        );
        let ds = load_tum_dataset(dir.path()).unwrap();
        let times: Vec<f64> = ds.frames.iter().map(|f| f.timestamp).collect();
        assert_eq!(times, vec![1.0, 2.0, 3.0]);
        assert!(ds
            .groundtruth
            .timestamps
            .windows(2)
            .all(|w| w[0] < w[1]));
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("rgb.txt"), "1.0 rgb/1.png\noops\n");
        write(&dir.path().join("groundtruth.txt"), "1.0 0 0 0 0 0 0 1\n");
        match load_tum_dataset(dir.path()) {
            Err(Error::ParseLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_tum_dataset(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn trajectory_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let mut traj = Trajectory::new();
        for i in 0..20 {
            let xi = nalgebra::Vector6::from_fn(|c, _| 0.1 * ((i * 7 + c) as f64).sin());
            traj.push(i as f64 / 30.0, crate::geom::se3_exp(&xi)).unwrap();
        }
        write_trajectory(&path, &traj).unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for i in 0..traj.len() {
            assert!((back.timestamps[i] - traj.timestamps[i]).abs() < 1e-6);
            assert!((back.poses[i].translation - traj.poses[i].translation).norm() < 1e-8);
            assert!(back.poses[i].rotation.angle_to(&traj.poses[i].rotation) < 1e-8);
        }
    }
}
