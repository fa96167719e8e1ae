use std::path::Path;

use super::classes::ClassMapping;
use super::io::{read_labels, read_pfm, read_rgb};
use super::manifest::FrameRecord;
use super::{DataError, Result};
use crate::geometry::{relative_motion, CameraIntrinsics, DepthMap, LabelMap, Se3};
use crate::model::SequenceInput;
use crate::tensor::Tensor;

/// A window of `n` consecutive records of one trajectory; the target is the
/// last one. `motions[j]` maps frame `j + 1` into frame `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    pub records: Vec<usize>,
    pub motions: Vec<Se3>,
}

/// Sliding windows of length `n`, stride 1, never crossing a trajectory
/// boundary. `records` must be sorted by trajectory and frame index.
pub fn make_sequences(records: &[FrameRecord], n: usize) -> Result<Vec<SequenceWindow>> {
    if n == 0 {
        return Err(DataError::Config("window length must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let mut end = start + 1;
        while end < records.len() && records[end].trajectory == records[start].trajectory {
            if records[end].frame_index <= records[end - 1].frame_index {
                return Err(DataError::Config(format!(
                    "trajectory {} is not time-ordered",
                    records[start].trajectory
                )));
            }
            end += 1;
        }
        for first in start..start + (end - start).saturating_sub(n - 1) {
            let idx: Vec<usize> = (first..first + n).collect();
            let motions = idx
                .windows(2)
                .map(|w| {
                    let pose = |i: usize| {
                        records[i].pose.ok_or_else(|| {
                            DataError::Config(format!(
                                "frame {} of {} has no pose",
                                records[i].frame_index, records[i].trajectory
                            ))
                        })
                    };
                    Ok(relative_motion(&pose(w[0])?, &pose(w[1])?)?)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SequenceWindow {
                records: idx,
                motions,
            });
        }
        start = end;
    }
    Ok(out)
}

/// A decoded frame with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Tensor,
    pub depth: Option<DepthMap>,
    pub labels: Option<LabelMap>,
}

/// `n` frames, `n − 1` relative motions, shared intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequenceSample {
    pub frames: Vec<Frame>,
    pub motions: Vec<Se3>,
    pub intrinsics: CameraIntrinsics,
}

impl FrameSequenceSample {
    pub fn target(&self) -> &Frame {
        self.frames.last().expect("samples are non-empty")
    }

    pub fn to_input(&self) -> SequenceInput {
        SequenceInput {
            frames: self.frames.iter().map(|f| f.image.clone()).collect(),
            motions: self.motions.clone(),
            intrinsics: self.intrinsics,
            semantic_prior: None,
        }
    }
}

/// Decodes one record. Labels are remapped when `mapping` is given.
pub fn load_frame(record: &FrameRecord, mapping: Option<&ClassMapping>) -> Result<Frame> {
    let image = read_rgb(&record.image)?;
    let (w, h) = (image.width(), image.height());
    let check = |what: &str, path: &Path, size: (usize, usize)| {
        if size != (w, h) {
            return Err(DataError::Image {
                path: path.to_path_buf(),
                message: format!("{what} is {}x{}, image is {w}x{h}", size.0, size.1),
            });
        }
        Ok(())
    };
    let depth = match &record.depth {
        Some(p) => {
            let d = read_pfm(p)?;
            check("depth", p, (d.width, d.height))?;
            Some(d)
        }
        None => None,
    };
    let labels = match &record.semantic {
        Some(p) => {
            let l = read_labels(p)?;
            check("label map", p, (l.width, l.height))?;
            Some(match mapping {
                Some(m) => m.remap(&l)?,
                None => l,
            })
        }
        None => None,
    };
    Ok(Frame {
        image,
        depth,
        labels,
    })
}

pub fn load_sample(
    records: &[FrameRecord],
    window: &SequenceWindow,
    mapping: Option<&ClassMapping>,
) -> Result<FrameSequenceSample> {
    let target = &records[*window.records.last().expect("non-empty window")];
    let intrinsics = target
        .intrinsics
        .ok_or_else(|| DataError::Config("sequence samples need camera intrinsics".into()))?;
    let frames = window
        .records
        .iter()
        .map(|&i| load_frame(&records[i], mapping))
        .collect::<Result<Vec<_>>>()?;
    for (f, &i) in frames.iter().zip(&window.records) {
        if (f.image.width(), f.image.height()) != (intrinsics.width, intrinsics.height) {
            return Err(DataError::Image {
                path: records[i].image.clone(),
                message: "image size differs from the intrinsics".into(),
            });
        }
    }
    Ok(FrameSequenceSample {
        frames,
        motions: window.motions.clone(),
        intrinsics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn rec(traj: &str, i: u64, pose: Se3) -> FrameRecord {
        FrameRecord {
            trajectory: traj.into(),
            frame_index: i,
            image: format!("{traj}{i}.png").into(),
            depth: None,
            semantic: None,
            pose: Some(pose),
            intrinsics: None,
        }
    }

    #[test]
    fn window_counts_and_boundaries() {
        let mut records: Vec<_> = (0..5)
            .map(|i| rec("a", i, Se3::from_translation(Vector3::new(i as f64, 0.0, 0.0))))
            .collect();
        assert_eq!(make_sequences(&records, 3).unwrap().len(), 3);
        records.extend((0..4).map(|i| rec("b", i, Se3::identity())));
        let w = make_sequences(&records, 3).unwrap();
        assert_eq!(w.len(), 3 + 2);
        for win in &w {
            let t = &records[win.records[0]].trajectory;
            assert!(win.records.iter().all(|&i| &records[i].trajectory == t));
        }
        assert!(make_sequences(&records[..2], 3).unwrap().is_empty());
    }

    #[test]
    fn static_camera_gives_identity_motion() {
        let p = Se3::from_axis_angle(Vector3::new(0.3, 0.1, -0.2), Vector3::new(4.0, 5.0, 6.0));
        let records: Vec<_> = (0..4).map(|i| rec("s", i, p)).collect();
        for w in make_sequences(&records, 3).unwrap() {
            for m in &w.motions {
                let d = m.to_homogeneous() - Se3::identity().to_homogeneous();
                assert!(d.abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn motions_are_relative_poses() {
        let poses = [
            Se3::from_axis_angle(Vector3::new(0.0, 0.1, 0.0), Vector3::new(0.0, 0.0, 0.0)),
            Se3::from_axis_angle(Vector3::new(0.05, 0.0, 0.02), Vector3::new(1.0, 0.2, 0.0)),
        ];
        let records: Vec<_> = (0..2).map(|i| rec("m", i, poses[i as usize])).collect();
        let w = make_sequences(&records, 2).unwrap();
        let expect = poses[0].inverse().compose(&poses[1]).to_homogeneous();
        assert!((w[0].motions[0].to_homogeneous() - expect).abs().max() < 1e-9);
    }
}
