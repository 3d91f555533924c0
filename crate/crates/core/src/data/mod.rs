//! Synthetic indoor sequences with exact ground truth, plus a loader for the
//! on-disk sequence layout.

mod io;
mod noise;
mod scene;

pub use io::{
    load_sequence, load_sequence_with, read_depth_png, read_rgb_png, write_depth_png, write_rgb_png, write_sequence,
    LoadOptions, DEPTH_SCALE,
};
pub use noise::ValueNoise;
pub use scene::{generate_synthetic_scene, Scene, SyntheticSceneConfig, TrajectoryKind};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, ImageFrame};
use crate::geometry::{CameraIntrinsics, RigidTransform};

/// One frame of a sequence. `pose` is camera-to-world.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: ImageFrame,
    pub depth: Option<DepthMap>,
    pub pose: Option<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
}

/// A target frame with its two temporal neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Index of the target frame within the sequence.
    pub index: usize,
    pub target: ImageFrame,
    /// Frames `t - 1` and `t + 1`.
    pub sources: [ImageFrame; 2],
    pub gt_depth: Option<DepthMap>,
    /// Camera-to-world poses of `t - 1`, `t`, `t + 1`.
    pub gt_poses: Option<[RigidTransform; 3]>,
    pub intrinsics: CameraIntrinsics,
}

impl SequenceSample {
    /// Ground-truth target-to-source transform for source `i` (0 = previous,
    /// 1 = next): maps target camera coordinates into the source camera.
    pub fn gt_target_to_source(&self, i: usize) -> Option<RigidTransform> {
        let p = self.gt_poses.as_ref()?;
        Some(p[if i == 0 { 0 } else { 2 }].inverse().compose(&p[1]))
    }
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks sizes, intrinsics and index contiguity.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(Error::NonContiguousFrames {
                    expected: i,
                    found: f.index,
                });
            }
            let depth_ok = f.depth.as_ref().is_none_or(|d| d.width() == w && d.height() == h);
            if f.image.width() != w || f.image.height() != h || f.image.channels() != 3 || !depth_ok {
                return Err(Error::Shape(format!("frame {i} does not match the {w}x{h} camera")));
            }
        }
        Ok(())
    }

    /// `(t - 1, t, t + 1)` windows; the first and last frames are never targets.
    pub fn samples(&self) -> Vec<SequenceSample> {
        if self.frames.len() < 3 {
            return Vec::new();
        }
        (1..self.frames.len() - 1).map(|t| self.sample(t)).collect()
    }

    fn sample(&self, t: usize) -> SequenceSample {
        let [a, b, c] = [&self.frames[t - 1], &self.frames[t], &self.frames[t + 1]];
        let gt_poses = match (a.pose, b.pose, c.pose) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        SequenceSample {
            index: t,
            target: b.image.clone(),
            sources: [a.image.clone(), c.image.clone()],
            gt_depth: b.depth.clone(),
            gt_poses,
            intrinsics: self.intrinsics,
        }
    }

    /// Keeps every `stride`-th frame and renumbers from zero.
    pub fn temporally_downsampled(&self, stride: usize) -> Result<Sequence> {
        if stride == 0 {
            return Err(Error::Config("temporal stride must be positive".into()));
        }
        let frames = self
            .frames
            .iter()
            .step_by(stride)
            .enumerate()
            .map(|(i, f)| Frame { index: i, ..f.clone() })
            .collect();
        Ok(Sequence {
            intrinsics: self.intrinsics,
            frames,
        })
    }

    /// Camera-to-world trajectory, if every frame carries a pose.
    pub fn poses(&self) -> Option<Vec<RigidTransform>> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}
