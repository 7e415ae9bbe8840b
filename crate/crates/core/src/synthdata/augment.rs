use nalgebra::Matrix3;
use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use super::render::PairedTriplet;
use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::raster::{warp_inverse, Gray};
use crate::rng;

pub const MAX_ROTATION_DEG: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationParams {
    pub rotation_deg: f64,
    /// `(row, col)` of the crop's top-left corner in the rotated canvas.
    pub crop_origin: (usize, usize),
    /// `(height, width)`.
    pub crop_size: (usize, usize),
    pub flip_horizontal: bool,
    pub seed: u64,
}

impl AugmentationParams {
    pub fn identity(size: (usize, usize)) -> Self {
        AugmentationParams {
            rotation_deg: 0.0,
            crop_origin: (0, 0),
            crop_size: size,
            flip_horizontal: false,
            seed: 0,
        }
    }

    /// Rotation uniform in ±5°, crop origin uniform, fair coin for the flip.
    pub fn random(seed: u64, size: (usize, usize), crop_size: (usize, usize)) -> Result<Self> {
        if crop_size.0 > size.0 || crop_size.1 > size.1 {
            return Err(Error::invalid("crop larger than image"));
        }
        let mut rng = rng::stream(seed, "augment");
        Ok(AugmentationParams {
            rotation_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            crop_origin: (
                rng.gen_range(0..=size.0 - crop_size.0),
                rng.gen_range(0..=size.1 - crop_size.1),
            ),
            crop_size,
            flip_horizontal: rng.gen_bool(0.5),
            seed,
        })
    }

    fn validate(&self, size: (usize, usize)) -> Result<()> {
        if !(self.rotation_deg.abs() <= MAX_ROTATION_DEG) {
            return Err(Error::invalid(format!(
                "rotation {} outside ±{MAX_ROTATION_DEG}°",
                self.rotation_deg
            )));
        }
        let (r, c) = self.crop_origin;
        let (ch, cw) = self.crop_size;
        if ch == 0 || cw == 0 || r + ch > size.0 || c + cw > size.1 {
            return Err(Error::invalid(format!(
                "crop {:?}+{:?} out of bounds for {:?}",
                self.crop_origin, self.crop_size, size
            )));
        }
        Ok(())
    }

    /// Forward map from input pixel coordinates `(x, y)` to output coordinates.
    fn transform(&self, size: (usize, usize)) -> Matrix3<f64> {
        let (h, w) = size;
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let t = self.rotation_deg.to_radians();
        let (s, c) = t.sin_cos();
        let to_center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let back = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let crop = Matrix3::new(
            1.0,
            0.0,
            -(self.crop_origin.1 as f64),
            0.0,
            1.0,
            -(self.crop_origin.0 as f64),
            0.0,
            0.0,
            1.0,
        );
        let flip = if self.flip_horizontal {
            Matrix3::new(-1.0, 0.0, self.crop_size.1 as f64 - 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
        } else {
            Matrix3::identity()
        };
        flip * crop * back * rot * to_center
    }
}

fn apply_plane(img: &Gray, p: &AugmentationParams) -> Gray {
    let (r0, c0) = p.crop_origin;
    let (ch, cw) = p.crop_size;
    let rotated = if p.rotation_deg == 0.0 {
        img.clone()
    } else {
        let full = img.dim();
        let rot_only = AugmentationParams {
            crop_origin: (0, 0),
            crop_size: full,
            flip_horizontal: false,
            ..p.clone()
        };
        let inv = rot_only
            .transform(full)
            .try_inverse()
            .expect("rotation is invertible");
        warp_inverse(img, &inv, 0.0)
    };
    let mut out = rotated
        .slice(ndarray::s![r0..r0 + ch, c0..c0 + cw])
        .to_owned();
    if p.flip_horizontal {
        out.invert_axis(Axis(1));
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Applies one geometric augmentation jointly to every plane of a triplet.
pub fn augment(t: &PairedTriplet, p: &AugmentationParams) -> Result<PairedTriplet> {
    let size = t.size();
    p.validate(size)?;
    let slo_planes: Vec<Gray> = t
        .slo
        .axis_iter(Axis(0))
        .map(|ch| apply_plane(&ch.to_owned(), p))
        .collect();
    let (ch, cw) = p.crop_size;
    let slo = Array3::from_shape_fn((3, ch, cw), |(c, r, col)| slo_planes[c][[r, col]]);
    let lesion_mask = t
        .lesion_mask
        .as_ref()
        .map(|m| apply_plane(m, p).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
    let misalignment = match &t.misalignment {
        Some(m) => {
            let fwd = p.transform(size);
            let inv = fwd.try_inverse().expect("augmentation transform is invertible");
            Some(Homography::new(fwd * m.matrix() * inv)?)
        }
        None => None,
    };
    Ok(PairedTriplet {
        slo,
        early: apply_plane(&t.early, p),
        late: apply_plane(&t.late, p),
        lesion_mask,
        misalignment,
        seed: t.seed,
    })
}

/// Intersection over union of two boolean masks.
pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}
