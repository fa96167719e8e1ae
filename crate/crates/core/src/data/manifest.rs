use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{DataError, Result};
use crate::geometry::{CameraIntrinsics, Se3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One frame as listed in a manifest. Paths are absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub trajectory: String,
    pub frame_index: u64,
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
    pub semantic: Option<PathBuf>,
    /// World-from-camera pose.
    pub pose: Option<Se3>,
    pub intrinsics: Option<CameraIntrinsics>,
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.txt", split.as_str()))
}

pub fn intrinsics_path(root: &Path) -> PathBuf {
    root.join("intrinsics.txt")
}

/// Parses `fx fy cx cy width height`.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let bad = |msg: &str| DataError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: msg.to_string(),
    };
    let f: Vec<&str> = text.split_whitespace().collect();
    if f.len() != 6 {
        return Err(bad("expected `fx fy cx cy width height`"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad size"));
    CameraIntrinsics::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, int(f[4])?, int(f[5])?)
        .map_err(|e| bad(&e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let text = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

/// Reads `<root>/<split>.txt`. Records come back sorted by trajectory, then
/// frame index.
///
/// Line format: `trajectory frame image depth|- semantic|- pose`, where pose
/// is 12 numbers (row-major rotation, then translation) or a single `-`.
/// Blank lines and lines starting with `#` are skipped.
pub fn load_manifest(root: &Path, split: Split) -> Result<Vec<FrameRecord>> {
    let path = manifest_path(root, split);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let k_path = intrinsics_path(root);
    let intrinsics = if k_path.exists() {
        Some(read_intrinsics(&k_path)?)
    } else {
        None
    };
    let mut records = parse_manifest(&text, root, &path)?;
    for r in &mut records {
        r.intrinsics = intrinsics;
    }
    Ok(records)
}

pub fn parse_manifest(text: &str, root: &Path, source: &Path) -> Result<Vec<FrameRecord>> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| DataError::Parse {
            path: source.to_path_buf(),
            line: n + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 && f.len() != 17 {
            return Err(bad(format!("expected 6 or 17 fields, got {}", f.len())));
        }
        let frame_index: u64 = f[1]
            .parse()
            .map_err(|_| bad(format!("bad frame index {:?}", f[1])))?;
        let opt = |s: &str| (s != "-").then(|| root.join(s));
        let pose = if f.len() == 6 {
            if f[5] != "-" {
                return Err(bad("pose must be 12 numbers or `-`".into()));
            }
            None
        } else {
            let mut v = [0.0; 12];
            for (slot, s) in v.iter_mut().zip(&f[5..]) {
                *slot = s.parse().map_err(|_| bad(format!("bad pose number {s:?}")))?;
            }
            Some(Se3::from_row_major(&v).map_err(|e| bad(e.to_string()))?)
        };
        let trajectory = f[0].to_string();
        if !seen.insert((trajectory.clone(), frame_index)) {
            return Err(DataError::DuplicateFrame {
                trajectory,
                frame_index,
            });
        }
        records.push(FrameRecord {
            trajectory,
            frame_index,
            image: root.join(f[2]),
            depth: opt(f[3]),
            semantic: opt(f[4]),
            pose,
            intrinsics: None,
        });
    }
    records.sort_by(|a, b| (&a.trajectory, a.frame_index).cmp(&(&b.trajectory, b.frame_index)));
    Ok(records)
}

/// One manifest line for `record`, with paths relative to `root`.
pub fn format_record(record: &FrameRecord, root: &Path) -> String {
    let rel = |p: &Path| {
        p.strip_prefix(root)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let opt = |p: &Option<PathBuf>| p.as_deref().map(rel).unwrap_or_else(|| "-".into());
    let pose = match &record.pose {
        Some(p) => p
            .to_row_major()
            .iter()
            .map(|v| format!("{v:.17e}"))
            .collect::<Vec<_>>()
            .join(" "),
        None => "-".into(),
    };
    format!(
        "{} {} {} {} {} {}",
        record.trajectory,
        record.frame_index,
        rel(&record.image),
        opt(&record.depth),
        opt(&record.semantic),
        pose
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const POSE: &str = "1 0 0 0 1 0 0 0 1 0.5 0 0";

    #[test]
    fn empty_manifest_is_empty() {
        let r = parse_manifest("# nothing\n\n", Path::new("/d"), Path::new("m")).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn depthless_record_and_ordering() {
        let text = format!("b 0 i0.png - s0.png {POSE}\na 2 i2.png d.pfm - {POSE}\na 1 i1.png - - -\n");
        let r = parse_manifest(&text, Path::new("/d"), Path::new("m")).unwrap();
        assert_eq!(
            r.iter().map(|r| (r.trajectory.as_str(), r.frame_index)).collect::<Vec<_>>(),
            vec![("a", 1), ("a", 2), ("b", 0)]
        );
        assert!(r[0].depth.is_none() && r[0].pose.is_none());
        assert_eq!(r[1].depth.as_deref(), Some(Path::new("/d/d.pfm")));
        assert_eq!(r[2].semantic.as_deref(), Some(Path::new("/d/s0.png")));
    }

    #[test]
    fn duplicate_frame_is_rejected() {
        let text = format!("a 1 x.png - - {POSE}\na 1 y.png - - {POSE}\n");
        assert!(matches!(
            parse_manifest(&text, Path::new("/d"), Path::new("m")),
            Err(DataError::DuplicateFrame { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("a 1 x.png - - {POSE}\n\na two x.png - - {POSE}\n");
        match parse_manifest(&text, Path::new("/d"), Path::new("m")) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn format_parse_roundtrip() {
        let rec = FrameRecord {
            trajectory: "t0".into(),
            frame_index: 4,
            image: "/d/img/4.png".into(),
            depth: Some("/d/depth/4.pfm".into()),
            semantic: None,
            pose: Some(Se3::from_axis_angle(
                nalgebra::Vector3::new(0.1, -0.2, 0.3),
                nalgebra::Vector3::new(1.0, 2.0, 3.0),
            )),
            intrinsics: None,
        };
        let line = format_record(&rec, Path::new("/d"));
        let back = parse_manifest(&line, Path::new("/d"), Path::new("m")).unwrap();
        assert_eq!(back[0], rec);
    }
}
