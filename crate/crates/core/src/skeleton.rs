//! MPII 16-joint layout.

pub const NUM_KEYPOINTS: usize = 16;

pub const JOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

/// Edges of the kinematic tree, one part affinity field each.
pub const LIMBS: [(usize, usize); 15] = [
    (0, 1),
    (1, 2),
    (2, 6),
    (3, 6),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (8, 9),
    (10, 11),
    (11, 12),
    (12, 7),
    (13, 7),
    (13, 14),
    (14, 15),
];

/// Right/left joint pairs swapped by a horizontal flip.
pub const FLIP_PAIRS: [(usize, usize); 6] = [(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)];

/// Reporting groups. Pelvis and thorax are not reported.
pub const PCKH_GROUPS: [(&str, [usize; 2]); 7] = [
    ("Head", [8, 9]),
    ("Shoulder", [12, 13]),
    ("Elbow", [11, 14]),
    ("Wrist", [10, 15]),
    ("Hip", [2, 3]),
    ("Knee", [1, 4]),
    ("Ankle", [0, 5]),
];

/// Channel permutation applied to keypoint maps of a flipped image.
pub fn flip_permutation(q: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..q).collect();
    for &(a, b) in pairs {
        if a < q && b < q {
            perm.swap(a, b);
        }
    }
    perm
}
