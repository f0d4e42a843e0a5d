//! Desk-scale synthetic skull triplets.
//!
//! A complete shape is a hollow ellipsoidal shell (the cranium) fused with a
//! solid anterior-inferior ellipsoid (the face). Defects are carved out of
//! the complete shape: a sphere near the vertex for the cranial defect and an
//! axis-aligned box over the face for the facial defect.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::grid::{BoundingBox, VoxelGrid};
use crate::error::{invalid, Result};
use crate::rng;

/// Smallest extent the shell geometry fits in.
pub const MIN_SYNTH_EXTENT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectBoxes {
    pub cranial: BoundingBox,
    pub facial: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkullTriplet {
    pub subject_id: String,
    pub complete: VoxelGrid,
    pub cranial_defect: VoxelGrid,
    pub facial_defect: VoxelGrid,
    pub defect_boxes: Option<DefectBoxes>,
}

impl SkullTriplet {
    /// Checks shape agreement, `defect ⊆ complete` and nonempty defects.
    pub fn validate(&self) -> Result<()> {
        self.complete.same_shape(&self.cranial_defect)?;
        self.complete.same_shape(&self.facial_defect)?;
        for (name, defective) in [("cranial", &self.cranial_defect), ("facial", &self.facial_defect)] {
            if !defective.is_subset_of(&self.complete) {
                return Err(invalid(format!(
                    "{}: {name} defect grid is not a subset of the complete grid",
                    self.subject_id
                )));
            }
            if defective.occupied() >= self.complete.occupied() {
                return Err(invalid(format!("{}: {name} defect is empty", self.subject_id)));
            }
        }
        Ok(())
    }

    /// The grid of one class.
    pub fn grid(&self, class: ShapeClass) -> &VoxelGrid {
        match class {
            ShapeClass::Complete => &self.complete,
            ShapeClass::Cranial => &self.cranial_defect,
            ShapeClass::Facial => &self.facial_defect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Complete,
    Cranial,
    Facial,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Complete, ShapeClass::Cranial, ShapeClass::Facial];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::Complete => "complete",
            ShapeClass::Cranial => "cranial",
            ShapeClass::Facial => "facial",
        }
    }
}

impl std::fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShapeClass {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(ShapeClass::Complete),
            "cranial" => Ok(ShapeClass::Cranial),
            "facial" => Ok(ShapeClass::Facial),
            other => Err(invalid(format!("unknown shape class '{other}'"))),
        }
    }
}

pub fn subject_id(index: usize) -> String {
    format!("subject-{index:03}")
}

/// Generates `n` triplets; subject `i` draws from its own random stream so
/// the first `k` subjects do not depend on `n`.
pub fn generate_synthetic_triplets(n: usize, dims: [usize; 3], seed: u64) -> Result<Vec<SkullTriplet>> {
    if n == 0 {
        return Err(invalid("number of triplets must be at least 1"));
    }
    if dims.iter().any(|&e| e < MIN_SYNTH_EXTENT) {
        return Err(invalid(format!(
            "dims {dims:?} are too small to fit the skull shell (need {MIN_SYNTH_EXTENT} per axis)"
        )));
    }
    (0..n)
        .map(|i| {
            let t = generate_one(i, dims, seed)?;
            t.validate()?;
            Ok(t)
        })
        .collect()
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn radius2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum()
    }
}

fn generate_one(index: usize, dims: [usize; 3], seed: u64) -> Result<SkullTriplet> {
    let mut rng = rng::stream(seed, index as u64);
    let ext = dims.map(|e| e as f64);
    let min_ext = ext.iter().copied().fold(f64::INFINITY, f64::min);

    let center = [
        ext[0] * 0.47 + uniform(&mut rng, -1.0, 1.0) * ext[0] / 32.0,
        ext[1] * 0.45 + uniform(&mut rng, -1.0, 1.0) * ext[1] / 32.0,
        ext[2] * 0.50 + uniform(&mut rng, -1.0, 1.0) * ext[2] / 32.0,
    ];
    let axes = [
        ext[0] * uniform(&mut rng, 0.30, 0.34),
        ext[1] * uniform(&mut rng, 0.33, 0.37),
        ext[2] * uniform(&mut rng, 0.29, 0.33),
    ];
    let thickness = 0.1 * min_ext;
    let outer = Ellipsoid { center, axes };
    let inner = Ellipsoid {
        center,
        axes: axes.map(|a| a - thickness),
    };
    let face = Ellipsoid {
        center: [
            center[0] - 0.35 * axes[0],
            center[1] + 0.72 * axes[1],
            center[2],
        ],
        axes: [
            0.38 * axes[0] * uniform(&mut rng, 0.9, 1.1),
            0.32 * axes[1] * uniform(&mut rng, 0.9, 1.1),
            0.55 * axes[2] * uniform(&mut rng, 0.9, 1.1),
        ],
    };

    // Cranial defect: a sphere centred on the mid-shell surface near the vertex.
    let tilt = uniform(&mut rng, 0.0, 0.5);
    let azimuth = uniform(&mut rng, 0.0, std::f64::consts::TAU);
    let dir = [tilt.cos(), tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin()];
    let mid_axes = axes.map(|a| a - 0.5 * thickness);
    let reach = 1.0 / (0..3).map(|a| (dir[a] / mid_axes[a]).powi(2)).sum::<f64>().sqrt();
    let sphere_center = [0, 1, 2].map(|a| center[a] + reach * dir[a]);
    let sphere_radius = min_ext * uniform(&mut rng, 0.18, 0.22);

    // Facial defect: a box over the front of the face.
    let half = [
        0.5 * face.axes[0] * uniform(&mut rng, 0.9, 1.1),
        0.6 * face.axes[1] * uniform(&mut rng, 0.9, 1.1),
        0.6 * face.axes[2] * uniform(&mut rng, 0.9, 1.1),
    ];
    let box_center = [
        face.center[0] + 0.2 * face.axes[0] * uniform(&mut rng, -1.0, 1.0),
        face.center[1] + 0.5 * face.axes[1],
        face.center[2] + 0.2 * face.axes[2] * uniform(&mut rng, -1.0, 1.0),
    ];

    let mut complete = VoxelGrid::zeros(dims)?;
    let mut cranial = VoxelGrid::zeros(dims)?;
    let mut facial = VoxelGrid::zeros(dims)?;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5];
                let outside_cavity = inner.radius2(p) > 1.0;
                let shell = outer.radius2(p) <= 1.0 && outside_cavity;
                let face_voxel = face.radius2(p) <= 1.0 && outside_cavity;
                if !(shell || face_voxel) {
                    continue;
                }
                complete.set(d, h, w, 1.0);
                let in_sphere =
                    (0..3).map(|a| (p[a] - sphere_center[a]).powi(2)).sum::<f64>() <= sphere_radius.powi(2);
                if !in_sphere {
                    cranial.set(d, h, w, 1.0);
                }
                let in_box = (0..3).all(|a| (p[a] - box_center[a]).abs() <= half[a]);
                if !in_box {
                    facial.set(d, h, w, 1.0);
                }
            }
        }
    }

    let cranial_box = clip_box(
        sphere_center.map(|c| c - sphere_radius),
        sphere_center.map(|c| c + sphere_radius),
        dims,
    );
    let facial_box = clip_box(
        [0, 1, 2].map(|a| box_center[a] - half[a]),
        [0, 1, 2].map(|a| box_center[a] + half[a]),
        dims,
    );

    Ok(SkullTriplet {
        subject_id: subject_id(index),
        complete,
        cranial_defect: cranial,
        facial_defect: facial,
        defect_boxes: Some(DefectBoxes {
            cranial: cranial_box,
            facial: facial_box,
        }),
    })
}

fn uniform(rng: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Voxel box covering every voxel whose centre lies in `[lo, hi]`.
fn clip_box(lo: [f64; 3], hi: [f64; 3], dims: [usize; 3]) -> BoundingBox {
    let min = [0, 1, 2].map(|a| ((lo[a] - 0.5).ceil().max(0.0) as usize).min(dims[a]));
    let max = [0, 1, 2].map(|a| (((hi[a] - 0.5).floor() + 1.0).max(0.0) as usize).min(dims[a]));
    BoundingBox { min, max }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_valid_triplets() {
        let ts = generate_synthetic_triplets(30, [32, 32, 32], 7).unwrap();
        assert_eq!(ts.len(), 30);
        for t in &ts {
            t.validate().unwrap();
            assert!(t.complete.is_binary());
            let full = t.complete.occupied();
            for defective in [&t.cranial_defect, &t.facial_defect] {
                let removed = full - defective.occupied();
                assert!(removed > 0 && 2 * removed < full, "{}: removed {removed} of {full}", t.subject_id);
            }
        }
    }

    #[test]
    fn removed_voxels_lie_in_recorded_boxes() {
        for t in generate_synthetic_triplets(10, [32, 32, 32], 3).unwrap() {
            let boxes = t.defect_boxes.unwrap();
            for (defective, bbox) in [(&t.cranial_defect, boxes.cranial), (&t.facial_defect, boxes.facial)] {
                let [nd, nh, nw] = t.complete.dims();
                for d in 0..nd {
                    for h in 0..nh {
                        for w in 0..nw {
                            if t.complete.get(d, h, w) == 1.0 && defective.get(d, h, w) == 0.0 {
                                assert!(bbox.contains(d, h, w), "{} ({d},{h},{w})", t.subject_id);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic_triplets(4, [32, 32, 32], 11).unwrap();
        let b = generate_synthetic_triplets(4, [32, 32, 32], 11).unwrap();
        let c = generate_synthetic_triplets(4, [32, 32, 32], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].complete, c[0].complete);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_synthetic_triplets(0, [32, 32, 32], 0).is_err());
        assert!(generate_synthetic_triplets(1, [8, 32, 32], 0).is_err());
    }

    #[test]
    fn non_cubic_dims() {
        let ts = generate_synthetic_triplets(2, [32, 32, 16], 5).unwrap();
        assert_eq!(ts[0].complete.dims(), [32, 32, 16]);
    }
}
