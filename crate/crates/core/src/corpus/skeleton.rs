//! Articulated stick figure: a 9-joint skeleton driven by forward
//! kinematics, plus the cyclic action scripts that animate it.
//!
//! Coordinates follow image conventions (x right, y down, angle 0 along +x,
//! angles in radians growing clockwise on screen).

/// Annotated joints, in the order used by joints.txt and every metric.
pub const JOINT_NAMES: [&str; 9] = [
    "nose",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
];

pub const NUM_JOINTS: usize = 9;

pub const NOSE: usize = 0;
pub const L_SHOULDER: usize = 1;
pub const R_SHOULDER: usize = 2;
pub const L_ELBOW: usize = 3;
pub const R_ELBOW: usize = 4;
pub const L_WRIST: usize = 5;
pub const R_WRIST: usize = 6;
pub const L_HIP: usize = 7;
pub const R_HIP: usize = 8;

/// One rigid segment. `parent` indexes a previous bone in the list (the
/// segment starts at that bone's endpoint) or is `None` for bones anchored
/// at the root. `rest_angle` is relative to the parent bone's direction.
#[derive(Debug, Clone)]
pub struct Bone {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Skeleton node this bone's endpoint defines.
    pub end_node: usize,
    pub length: f32,
    pub rest_angle: f32,
}

/// Bone tree rooted at the hip midpoint, with the mapping from annotated
/// joints to skeleton nodes and the torso reference pair used for
/// normalization (left shoulder, right hip).
#[derive(Debug, Clone)]
pub struct SkeletonModel {
    pub bones: Vec<Bone>,
    pub node_count: usize,
    /// node index of each annotated joint, in `JOINT_NAMES` order
    pub joint_nodes: [usize; NUM_JOINTS],
    pub head_radius: f32,
}

// bone indices, used by the action scripts
pub const BONE_SPINE: usize = 0;
pub const BONE_HEAD: usize = 1;
pub const BONE_L_COLLAR: usize = 2;
pub const BONE_R_COLLAR: usize = 3;
pub const BONE_L_UPPER_ARM: usize = 4;
pub const BONE_L_FOREARM: usize = 5;
pub const BONE_R_UPPER_ARM: usize = 6;
pub const BONE_R_FOREARM: usize = 7;
pub const BONE_L_PELVIS: usize = 8;
pub const BONE_R_PELVIS: usize = 9;

use std::f32::consts::{FRAC_PI_2, PI};

/// Desk-scale skeleton sized for 96x96 frames; rest pose is a T-pose.
pub fn default_skeleton() -> SkeletonModel {
    // nodes: 0 root, 1 neck, 2 nose, 3 l_shoulder, 4 r_shoulder,
    // 5 l_elbow, 6 r_elbow, 7 l_wrist, 8 r_wrist, 9 l_hip, 10 r_hip
    let bones = vec![
        Bone { name: "spine", parent: None, end_node: 1, length: 16.0, rest_angle: -FRAC_PI_2 },
        Bone { name: "head", parent: Some(BONE_SPINE), end_node: 2, length: 8.0, rest_angle: 0.0 },
        Bone { name: "l_collar", parent: Some(BONE_SPINE), end_node: 3, length: 7.0, rest_angle: -FRAC_PI_2 },
        Bone { name: "r_collar", parent: Some(BONE_SPINE), end_node: 4, length: 7.0, rest_angle: FRAC_PI_2 },
        Bone { name: "l_upper_arm", parent: Some(BONE_L_COLLAR), end_node: 5, length: 10.0, rest_angle: 0.0 },
        Bone { name: "l_forearm", parent: Some(BONE_L_UPPER_ARM), end_node: 7, length: 9.0, rest_angle: 0.0 },
        Bone { name: "r_upper_arm", parent: Some(BONE_R_COLLAR), end_node: 6, length: 10.0, rest_angle: 0.0 },
        Bone { name: "r_forearm", parent: Some(BONE_R_UPPER_ARM), end_node: 8, length: 9.0, rest_angle: 0.0 },
        Bone { name: "l_pelvis", parent: None, end_node: 9, length: 5.0, rest_angle: PI },
        Bone { name: "r_pelvis", parent: None, end_node: 10, length: 5.0, rest_angle: 0.0 },
    ];
    SkeletonModel {
        bones,
        node_count: 11,
        joint_nodes: [2, 3, 4, 5, 6, 7, 8, 9, 10],
        head_radius: 3.0,
    }
}

impl SkeletonModel {
    /// Node positions for a root placement and per-bone angle offsets.
    /// Angles accumulate down the tree, so rotating a bone carries its
    /// descendants.
    pub fn forward_kinematics(&self, root: (f32, f32), deltas: &[f32]) -> Vec<(f32, f32)> {
        assert_eq!(deltas.len(), self.bones.len());
        let mut nodes = vec![(0.0f32, 0.0f32); self.node_count];
        nodes[0] = root;
        let mut angles = vec![0.0f32; self.bones.len()];
        for (i, bone) in self.bones.iter().enumerate() {
            let (parent_angle, start) = match bone.parent {
                Some(p) => (angles[p], nodes[self.bones[p].end_node]),
                None => (0.0, root),
            };
            let angle = parent_angle + bone.rest_angle + deltas[i];
            angles[i] = angle;
            nodes[bone.end_node] = (
                start.0 + bone.length * angle.cos(),
                start.1 + bone.length * angle.sin(),
            );
        }
        nodes
    }

    /// Annotated joint positions in `JOINT_NAMES` order.
    pub fn joint_positions(&self, root: (f32, f32), deltas: &[f32]) -> [(f32, f32); NUM_JOINTS] {
        let nodes = self.forward_kinematics(root, deltas);
        std::array::from_fn(|j| nodes[self.joint_nodes[j]])
    }

    /// Start and end points of every rendered segment (bones plus no extras).
    pub fn segments(&self, root: (f32, f32), deltas: &[f32]) -> Vec<((f32, f32), (f32, f32))> {
        let nodes = self.forward_kinematics(root, deltas);
        self.bones
            .iter()
            .map(|b| {
                let start = match b.parent {
                    Some(p) => nodes[self.bones[p].end_node],
                    None => root,
                };
                (start, nodes[b.end_node])
            })
            .collect()
    }

}

/// Cyclic per-bone angle trajectory.
#[derive(Debug, Clone, Copy)]
pub struct BoneTrajectory {
    pub bone: usize,
    /// radians
    pub amplitude: f32,
    /// cycles per frame
    pub frequency: f32,
    /// radians
    pub phase: f32,
}

/// An action: a set of bone oscillations plus a constant global translation
/// velocity in pixels per frame.
#[derive(Debug, Clone)]
pub struct ActionScript {
    pub id: usize,
    pub name: &'static str,
    pub trajectories: Vec<BoneTrajectory>,
    pub velocity: (f32, f32),
}

impl ActionScript {
    /// Bone angle offsets at frame `t`, with per-clip jitter applied as an
    /// amplitude scale and a common phase shift.
    pub fn deltas_at(
        &self,
        t: usize,
        num_bones: usize,
        amp_scale: f32,
        phase_shift: f32,
    ) -> Vec<f32> {
        let mut deltas = vec![0.0f32; num_bones];
        for tr in &self.trajectories {
            let omega = 2.0 * PI * tr.frequency;
            deltas[tr.bone] +=
                tr.amplitude * amp_scale * (omega * t as f32 + tr.phase + phase_shift).sin();
        }
        deltas
    }

    pub fn root_at(&self, t: usize, start: (f32, f32)) -> (f32, f32) {
        (
            start.0 + self.velocity.0 * t as f32,
            start.1 + self.velocity.1 * t as f32,
        )
    }
}

/// The four desk-scale actions. Names describe the dominant motion.
pub fn default_actions() -> Vec<ActionScript> {
    vec![
        ActionScript {
            id: 0,
            name: "wave",
            trajectories: vec![BoneTrajectory {
                bone: BONE_R_FOREARM,
                amplitude: 0.9,
                frequency: 1.0 / 15.0,
                phase: -FRAC_PI_2,
            }],
            velocity: (0.0, 0.0),
        },
        ActionScript {
            id: 1,
            name: "bend",
            trajectories: vec![BoneTrajectory {
                bone: BONE_SPINE,
                amplitude: 0.45,
                frequency: 1.0 / 20.0,
                phase: -FRAC_PI_2,
            }],
            velocity: (0.0, 0.0),
        },
        ActionScript {
            id: 2,
            name: "raise",
            trajectories: vec![
                BoneTrajectory {
                    bone: BONE_L_UPPER_ARM,
                    amplitude: 0.8,
                    frequency: 1.0 / 18.0,
                    phase: -FRAC_PI_2,
                },
                BoneTrajectory {
                    bone: BONE_R_UPPER_ARM,
                    amplitude: -0.8,
                    frequency: 1.0 / 18.0,
                    phase: -FRAC_PI_2,
                },
            ],
            velocity: (0.0, 0.0),
        },
        ActionScript {
            id: 3,
            name: "march",
            trajectories: vec![
                BoneTrajectory {
                    bone: BONE_L_UPPER_ARM,
                    amplitude: 0.45,
                    frequency: 1.0 / 12.0,
                    phase: 0.0,
                },
                BoneTrajectory {
                    bone: BONE_R_UPPER_ARM,
                    amplitude: 0.45,
                    frequency: 1.0 / 12.0,
                    phase: PI,
                },
            ],
            velocity: (0.7, 0.0),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_pose_geometry() {
        let skel = default_skeleton();
        let joints = skel.joint_positions((48.0, 60.0), &vec![0.0; skel.bones.len()]);
        // nose straight above the root
        assert!((joints[NOSE].0 - 48.0).abs() < 1e-4);
        assert!(joints[NOSE].1 < 60.0 - 20.0);
        // shoulders level, wrists at shoulder height in T-pose
        assert!((joints[L_SHOULDER].1 - joints[R_SHOULDER].1).abs() < 1e-4);
        assert!((joints[L_WRIST].1 - joints[L_SHOULDER].1).abs() < 1e-4);
        assert!(joints[L_SHOULDER].0 < joints[R_SHOULDER].0);
        // hips straddle the root horizontally
        assert!((joints[L_HIP].1 - 60.0).abs() < 1e-4);
        assert!(joints[L_HIP].0 < 48.0 && joints[R_HIP].0 > 48.0);
    }

    #[test]
    fn bone_lengths_invariant_under_pose() {
        let skel = default_skeleton();
        let deltas: Vec<f32> = (0..skel.bones.len()).map(|i| (i as f32) * 0.37 - 1.1).collect();
        let nodes = skel.forward_kinematics((40.0, 50.0), &deltas);
        for bone in &skel.bones {
            let start = match bone.parent {
                Some(p) => nodes[skel.bones[p].end_node],
                None => (40.0, 50.0),
            };
            let end = nodes[bone.end_node];
            let len = ((end.0 - start.0).powi(2) + (end.1 - start.1).powi(2)).sqrt();
            assert!(
                (len - bone.length).abs() < 1e-3,
                "{}: {} vs {}",
                bone.name,
                len,
                bone.length
            );
        }
    }

    #[test]
    fn wave_wrist_extrema_match_the_configured_frequency() {
        // analytic forward-kinematics oracle: with only the right forearm
        // oscillating from a horizontal rest, wrist y is monotone in the
        // oscillator, so its extrema sit half a period apart
        let skel = default_skeleton();
        let wave = &default_actions()[0];
        let period = (1.0 / wave.trajectories[0].frequency).round() as usize; // 15 frames
        let ys: Vec<f32> = (0..4 * period)
            .map(|t| {
                let deltas = wave.deltas_at(t, skel.bones.len(), 1.0, 0.0);
                skel.joint_positions((48.0, 60.0), &deltas)[R_WRIST].1
            })
            .collect();
        let mut extrema = Vec::new();
        for t in 1..ys.len() - 1 {
            let rising = ys[t] - ys[t - 1];
            let falling = ys[t + 1] - ys[t];
            if rising * falling < 0.0 {
                extrema.push(t);
            }
        }
        assert!(extrema.len() >= 5, "found extrema {extrema:?}");
        for pair in extrema.windows(2) {
            let gap = pair[1] - pair[0];
            assert!(
                (gap as i64 - (period / 2) as i64).abs() <= 1,
                "extrema spacing {gap}, expected about {}",
                period / 2
            );
        }
    }

    #[test]
    fn trajectories_are_periodic() {
        let skel = default_skeleton();
        for action in default_actions() {
            let freq = action
                .trajectories
                .first()
                .map(|t| t.frequency)
                .unwrap_or(1.0 / 15.0);
            let period = (1.0 / freq).round() as usize;
            let d0 = action.deltas_at(0, skel.bones.len(), 1.0, 0.3);
            let d1 = action.deltas_at(period, skel.bones.len(), 1.0, 0.3);
            for (a, b) in d0.iter().zip(&d1) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }
}
