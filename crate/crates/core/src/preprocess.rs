//! Classical CT preprocessing: lung mask, normalisation, crop, rigid
//! registration.
//!
//! The mask pipeline binarises at an air threshold, keeps interior
//! connected components that are large and central enough, separates the
//! two lungs with erosion, regrows them with dilation, and closes pleural
//! indentations with a dilated per-slice (axial) convex hull. Intensities
//! are then clamped and scaled to [0,1] with a constant fill outside the
//! mask, later screens are rigidly aligned onto the first by maximising
//! normalised cross-correlation over a resolution pyramid, and everything
//! is cropped to the first screen's lung bounding box.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::config::PreprocessConfig;
use crate::volume::{CtVolume, SeriesCase, Spacing, Stage, TimepointScan};
use crate::{Error, Result};

/// Registrations whose final correlation falls below this are rejected.
const NCC_FLOOR: f64 = 0.2;

/// Lung segmentation of one volume. `left` and `right` are the separated
/// lungs (named by image-space x coordinate, lower x first); `mask` is
/// their dilated per-slice convex hulls, so each side is contained in it.
#[derive(Debug, Clone)]
pub struct LungMask {
    pub mask: Array3<bool>,
    pub left: Array3<bool>,
    pub right: Array3<bool>,
}

impl LungMask {
    pub fn lung_voxels(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Rigid map from fixed-frame to moving-frame coordinates, stored in the
/// affine form `p = rotation . q + translation_mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation_mm: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation_mm: [0.0; 3],
        }
    }

    /// Build from a rotation (degrees, z then y then x) about `centre`
    /// followed by a shift, both in mm.
    pub fn about_centre(centre: [f64; 3], euler_deg: [f64; 3], shift_mm: [f64; 3]) -> Self {
        let r = crate::phantom::RigidMotion { translation_mm: shift_mm, rotation_deg: euler_deg }.matrix();
        // fold the centring into the translation: R(q-c)+c+t = Rq + (c+t-Rc)
        let mut t = [0.0; 3];
        for i in 0..3 {
            t[i] = centre[i] + shift_mm[i]
                - (r[i][0] * centre[0] + r[i][1] * centre[1] + r[i][2] * centre[2]);
        }
        RigidTransform { rotation: r, translation_mm: t }
    }

    pub fn apply(&self, q: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2] + self.translation_mm[0],
            r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2] + self.translation_mm[1],
            r[2][0] * q[0] + r[2][1] * q[1] + r[2][2] * q[2] + self.translation_mm[2],
        ]
    }

    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [
            p[0] - self.translation_mm[0],
            p[1] - self.translation_mm[1],
            p[2] - self.translation_mm[2],
        ];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// The shift this transform applies at `centre`, i.e. the translation
    /// of the equivalent rotate-about-centre-then-shift decomposition.
    pub fn translation_about(&self, centre: [f64; 3]) -> [f64; 3] {
        let rc = self.apply(centre);
        [rc[0] - centre[0], rc[1] - centre[1], rc[2] - centre[2]]
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        let tr = self.rotation[0][0] + self.rotation[1][1] + self.rotation[2][2];
        (((tr - 1.0) * 0.5).clamp(-1.0, 1.0)).acos().to_degrees()
    }
}

/// Inclusive voxel bounding box mapping a cropped frame back to its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl CropBox {
    pub fn dims(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    /// Source-frame voxel coordinate to cropped-frame.
    pub fn to_cropped(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] - self.min[0] as f64, p[1] - self.min[1] as f64, p[2] - self.min[2] as f64]
    }

    /// Cropped-frame voxel coordinate back to the source frame.
    pub fn to_original(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] + self.min[0] as f64, p[1] + self.min[1] as f64, p[2] + self.min[2] as f64]
    }
}

/// Integer offsets within a Euclidean ball, used as a spherical
/// structuring element.
fn sphere_offsets(radius: f64) -> Vec<[isize; 3]> {
    let r = radius.max(0.0);
    let ri = r.floor() as isize;
    let rr = r * r + 1e-9;
    let mut out = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if (dz * dz + dy * dy + dx * dx) as f64 <= rr {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

fn erode(mask: &Array3<bool>, offsets: &[[isize; 3]]) -> Array3<bool> {
    let (nz, ny, nx) = mask.dim();
    let mut out = Array3::from_elem((nz, ny, nx), false);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] {
                    continue;
                }
                let mut keep = true;
                for o in offsets {
                    let (zz, yy, xx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    // anything past the border counts as background
                    if zz < 0 || yy < 0 || xx < 0
                        || zz >= nz as isize || yy >= ny as isize || xx >= nx as isize
                        || !mask[[zz as usize, yy as usize, xx as usize]]
                    {
                        keep = false;
                        break;
                    }
                }
                out[[z, y, x]] = keep;
            }
        }
    }
    out
}

fn dilate(mask: &Array3<bool>, offsets: &[[isize; 3]]) -> Array3<bool> {
    let (nz, ny, nx) = mask.dim();
    let mut out = Array3::from_elem((nz, ny, nx), false);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] {
                    continue;
                }
                for o in offsets {
                    let (zz, yy, xx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if zz >= 0 && yy >= 0 && xx >= 0
                        && zz < nz as isize && yy < ny as isize && xx < nx as isize
                    {
                        out[[zz as usize, yy as usize, xx as usize]] = true;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Component {
    size: usize,
    centroid: [f64; 3],
    touches_border: bool,
}

/// 6-connected component labelling. Returns per-voxel labels (0 is
/// background, components start at 1) and one summary per component.
fn connected_components(mask: &Array3<bool>) -> (Array3<u32>, Vec<Component>) {
    let (nz, ny, nx) = mask.dim();
    let mut labels = Array3::<u32>::zeros((nz, ny, nx));
    let mut comps = Vec::new();
    let mut stack: Vec<[usize; 3]> = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[[z, y, x]] || labels[[z, y, x]] != 0 {
                    continue;
                }
                let id = comps.len() as u32 + 1;
                let mut size = 0usize;
                let mut sum = [0.0f64; 3];
                let mut touches = false;
                labels[[z, y, x]] = id;
                stack.push([z, y, x]);
                while let Some([cz, cy, cx]) = stack.pop() {
                    size += 1;
                    sum[0] += cz as f64;
                    sum[1] += cy as f64;
                    sum[2] += cx as f64;
                    if cz == 0 || cy == 0 || cx == 0 || cz == nz - 1 || cy == ny - 1 || cx == nx - 1 {
                        touches = true;
                    }
                    let mut visit = |zz: usize, yy: usize, xx: usize| {
                        if mask[[zz, yy, xx]] && labels[[zz, yy, xx]] == 0 {
                            labels[[zz, yy, xx]] = id;
                            stack.push([zz, yy, xx]);
                        }
                    };
                    if cz > 0 {
                        visit(cz - 1, cy, cx);
                    }
                    if cz + 1 < nz {
                        visit(cz + 1, cy, cx);
                    }
                    if cy > 0 {
                        visit(cz, cy - 1, cx);
                    }
                    if cy + 1 < ny {
                        visit(cz, cy + 1, cx);
                    }
                    if cx > 0 {
                        visit(cz, cy, cx - 1);
                    }
                    if cx + 1 < nx {
                        visit(cz, cy, cx + 1);
                    }
                }
                let n = size as f64;
                comps.push(Component {
                    size,
                    centroid: [sum[0] / n, sum[1] / n, sum[2] / n],
                    touches_border: touches,
                });
            }
        }
    }
    (labels, comps)
}

/// 2D convex hull (monotone chain) of integer points. Returns the hull
/// vertices; degenerate inputs collapse to 1 or 2 points.
fn convex_hull_2d(points: &mut Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    points.sort_unstable();
    points.dedup();
    let n = points.len();
    if n <= 2 {
        return points.clone();
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| -> i64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * n);
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in points.iter().rev() {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Fill the convex hull of the true cells of each axial slice, in place.
/// The result is a superset of the input. Row extents use floor/ceil, so
/// the rasterisation can only over-cover, never under-cover.
fn fill_slice_hulls(mask: &mut Array3<bool>) {
    let (nz, ny, nx) = mask.dim();
    let mut points: Vec<(i64, i64)> = Vec::new();
    for z in 0..nz {
        points.clear();
        for y in 0..ny {
            for x in 0..nx {
                if mask[[z, y, x]] {
                    points.push((y as i64, x as i64));
                }
            }
        }
        if points.len() < 3 {
            continue;
        }
        let hull = convex_hull_2d(&mut points);
        let mut row_min = vec![i64::MAX; ny];
        let mut row_max = vec![i64::MIN; ny];
        let m = hull.len();
        for i in 0..m {
            let a = hull[i];
            let b = hull[(i + 1) % m];
            let (ylo, yhi) = (a.0.min(b.0), a.0.max(b.0));
            for y in ylo..=yhi {
                let x = if a.0 == b.0 {
                    // horizontal edge: both endpoints bound the row
                    row_min[y as usize] = row_min[y as usize].min(a.1.min(b.1));
                    row_max[y as usize] = row_max[y as usize].max(a.1.max(b.1));
                    continue;
                } else {
                    a.1 as f64 + (b.1 - a.1) as f64 * (y - a.0) as f64 / (b.0 - a.0) as f64
                };
                row_min[y as usize] = row_min[y as usize].min(x.floor() as i64);
                row_max[y as usize] = row_max[y as usize].max(x.ceil() as i64);
            }
        }
        for y in 0..ny {
            if row_min[y] > row_max[y] {
                continue;
            }
            let lo = row_min[y].clamp(0, nx as i64 - 1) as usize;
            let hi = row_max[y].clamp(0, nx as i64 - 1) as usize;
            for x in lo..=hi {
                mask[[z, y, x]] = true;
            }
        }
    }
}

/// Segment the lungs of a raw-HU volume.
///
/// Stages: threshold below the air cutoff; 6-connected components; drop
/// components that touch the border, are smaller than the size floor, or
/// sit too far from the volume centre; erode to detach the lungs from
/// each other; split into the two largest pieces (mid-sagittal plane as
/// fallback when erosion leaves fewer than two); dilate each side back;
/// close each side with its dilated per-slice convex hull.
pub fn extract_lung_mask(v: &CtVolume, cfg: &PreprocessConfig) -> Result<LungMask> {
    if v.stage != Stage::Raw {
        return Err(Error::Input(format!("lung mask expects a raw volume, got {}", v.stage.name())));
    }
    let (nz, ny, nx) = v.data.dim();
    let air = v.data.mapv(|hu| hu < cfg.threshold_hu);

    let (labels, comps) = connected_components(&air);
    let total = nz * ny * nx;
    let min_size = (cfg.min_component_fraction * total as f64) as usize;
    let centre = [(nz as f64 - 1.0) * 0.5, (ny as f64 - 1.0) * 0.5, (nx as f64 - 1.0) * 0.5];
    let half_diag_mm = 0.5
        * ((nz as f64 * v.spacing.z).powi(2)
            + (ny as f64 * v.spacing.y).powi(2)
            + (nx as f64 * v.spacing.x).powi(2))
        .sqrt();
    let keep: Vec<bool> = comps
        .iter()
        .map(|c| {
            if c.touches_border || c.size < min_size {
                return false;
            }
            let d = ((c.centroid[0] - centre[0]) * v.spacing.z).powi(2)
                + ((c.centroid[1] - centre[1]) * v.spacing.y).powi(2)
                + ((c.centroid[2] - centre[2]) * v.spacing.x).powi(2);
            d.sqrt() <= cfg.max_centroid_fraction * half_diag_mm
        })
        .collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::NoLung(format!(
            "no interior air component of at least {min_size} voxels near the volume centre"
        )));
    }
    let mut kept = Array3::from_elem((nz, ny, nx), false);
    for (k, l) in kept.iter_mut().zip(labels.iter()) {
        *k = *l != 0 && keep[(*l - 1) as usize];
    }

    // detach the lungs, split, regrow
    let eroded = erode(&kept, &sphere_offsets(cfg.erosion_radius));
    let (elabels, ecomps) = connected_components(&eroded);
    let mut side_a = Array3::from_elem((nz, ny, nx), false);
    let mut side_b = side_a.clone();
    if ecomps.len() >= 2 {
        let mut order: Vec<usize> = (0..ecomps.len()).collect();
        order.sort_by(|&i, &j| ecomps[j].size.cmp(&ecomps[i].size));
        let (ia, ib) = (order[0] as u32 + 1, order[1] as u32 + 1);
        for ((a, b), l) in side_a.iter_mut().zip(side_b.iter_mut()).zip(elabels.iter()) {
            *a = *l == ia;
            *b = *l == ib;
        }
    } else {
        // erosion left one piece (or none): fall back to the mid-sagittal plane
        let src = if ecomps.is_empty() { &kept } else { &eroded };
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if src[[z, y, x]] {
                        if x < nx / 2 {
                            side_a[[z, y, x]] = true;
                        } else {
                            side_b[[z, y, x]] = true;
                        }
                    }
                }
            }
        }
    }
    let dil = sphere_offsets(cfg.dilation_radius);
    let mut side_a = dilate(&side_a, &dil);
    let mut side_b = dilate(&side_b, &dil);
    // dilation can make the sides meet; give contested voxels to the
    // nearer side (by x against each side's mean x) to keep them disjoint
    let mean_x = |m: &Array3<bool>| {
        let mut s = 0.0f64;
        let mut n = 0.0f64;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if m[[z, y, x]] {
                        s += x as f64;
                        n += 1.0;
                    }
                }
            }
        }
        s / n.max(1.0)
    };
    let (cxa, cxb) = (mean_x(&side_a), mean_x(&side_b));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if side_a[[z, y, x]] && side_b[[z, y, x]] {
                    if (x as f64 - cxa).abs() <= (x as f64 - cxb).abs() {
                        side_b[[z, y, x]] = false;
                    } else {
                        side_a[[z, y, x]] = false;
                    }
                }
            }
        }
    }
    let (left, right) = if cxa <= cxb { (side_a, side_b) } else { (side_b, side_a) };

    let hull_dil = sphere_offsets(cfg.hull_dilation_radius);
    let mut hull_left = left.clone();
    fill_slice_hulls(&mut hull_left);
    let mut hull_right = right.clone();
    fill_slice_hulls(&mut hull_right);
    let hull_left = dilate(&hull_left, &hull_dil);
    let hull_right = dilate(&hull_right, &hull_dil);
    let mut mask = hull_left;
    for (m, h) in mask.iter_mut().zip(hull_right.iter()) {
        *m = *m || *h;
    }
    Ok(LungMask { mask, left, right })
}

/// Clamp HU to the configured range, scale to [0,1], and write the
/// constant fill everywhere outside the mask.
pub fn normalize(v: &CtVolume, mask: &LungMask, cfg: &PreprocessConfig) -> Result<CtVolume> {
    if v.stage != Stage::Raw {
        return Err(Error::Input(format!("normalisation expects a raw volume, got {}", v.stage.name())));
    }
    if v.data.dim() != mask.mask.dim() {
        return Err(Error::Input(format!(
            "mask dims {:?} do not match volume dims {:?}",
            mask.mask.dim(),
            v.data.dim()
        )));
    }
    let [lo, hi] = cfg.clamp_hu;
    let span = hi - lo;
    let fill = cfg.fill_mode.value();
    let mut data = v.data.clone();
    for (d, m) in data.iter_mut().zip(mask.mask.iter()) {
        *d = if *m { (d.clamp(lo, hi) - lo) / span } else { fill };
    }
    let mut out = CtVolume::new(data, v.spacing, Stage::Normalized);
    out.origin = v.origin;
    Ok(out)
}

/// Crop to the mask's bounding box expanded by `margin` (clamped to the
/// volume). Returns the cropped volume and the box for mapping
/// coordinates back.
pub fn crop_to_lung(v: &CtVolume, mask: &LungMask, margin: usize) -> Result<(CtVolume, CropBox)> {
    let (nz, ny, nx) = mask.mask.dim();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.mask[[z, y, x]] {
                    min = [min[0].min(z), min[1].min(y), min[2].min(x)];
                    max = [max[0].max(z), max[1].max(y), max[2].max(x)];
                }
            }
        }
    }
    if min[0] == usize::MAX {
        return Err(Error::Input("cannot crop to an empty mask".into()));
    }
    let dims = [nz, ny, nx];
    let bbox = CropBox {
        min: [min[0].saturating_sub(margin), min[1].saturating_sub(margin), min[2].saturating_sub(margin)],
        max: [
            (max[0] + margin).min(dims[0] - 1),
            (max[1] + margin).min(dims[1] - 1),
            (max[2] + margin).min(dims[2] - 1),
        ],
    };
    Ok((crop_with_box(v, &bbox), bbox))
}

/// Apply an existing crop box (used to give later screens the first
/// screen's box).
pub fn crop_with_box(v: &CtVolume, bbox: &CropBox) -> CtVolume {
    let sl = v.data.slice(ndarray::s![
        bbox.min[0]..=bbox.max[0],
        bbox.min[1]..=bbox.max[1],
        bbox.min[2]..=bbox.max[2]
    ]);
    let mut out = CtVolume::new(sl.to_owned(), v.spacing, v.stage);
    out.origin = [
        v.origin[0] + bbox.min[0] as f64 * v.spacing.z,
        v.origin[1] + bbox.min[1] as f64 * v.spacing.y,
        v.origin[2] + bbox.min[2] as f64 * v.spacing.x,
    ];
    out
}

/// Halve the resolution by 2x2x2 block averaging (odd tails average what
/// remains).
fn downsample_half(v: &CtVolume) -> CtVolume {
    let (nz, ny, nx) = v.data.dim();
    let (mz, my, mx) = ((nz + 1) / 2, (ny + 1) / 2, (nx + 1) / 2);
    let mut data = Array3::<f64>::zeros((mz, my, mx));
    for z in 0..mz {
        for y in 0..my {
            for x in 0..mx {
                let mut sum = 0.0;
                let mut n = 0.0;
                for dz in 0..2usize.min(nz - 2 * z) {
                    for dy in 0..2usize.min(ny - 2 * y) {
                        for dx in 0..2usize.min(nx - 2 * x) {
                            sum += v.data[[2 * z + dz, 2 * y + dy, 2 * x + dx]];
                            n += 1.0;
                        }
                    }
                }
                data[[z, y, x]] = sum / n;
            }
        }
    }
    let spacing = Spacing::new(v.spacing.z * 2.0, v.spacing.y * 2.0, v.spacing.x * 2.0);
    let mut out = CtVolume::new(data, spacing, v.stage);
    out.origin = [
        v.origin[0] + 0.5 * v.spacing.z,
        v.origin[1] + 0.5 * v.spacing.y,
        v.origin[2] + 0.5 * v.spacing.x,
    ];
    out
}

/// Normalised cross-correlation between `fixed` and `moving` warped by the
/// transform built from `params`, sampled on the fixed grid with `stride`.
fn ncc(
    fixed: &CtVolume,
    moving: &CtVolume,
    centre: [f64; 3],
    params: &[f64; 6],
    fill: f64,
    stride: usize,
) -> f64 {
    let t = params_to_transform(centre, params);
    let (nz, ny, nx) = fixed.data.dim();
    let (mut sf, mut sm, mut sff, mut smm, mut sfm, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for z in (0..nz).step_by(stride) {
        for y in (0..ny).step_by(stride) {
            for x in (0..nx).step_by(stride) {
                let q = fixed.voxel_to_mm([z as f64, y as f64, x as f64]);
                let p = t.apply(q);
                let idx = moving.mm_to_voxel(p);
                let m = moving.trilinear(idx[0], idx[1], idx[2], fill);
                let f = fixed.data[[z, y, x]];
                sf += f;
                sm += m;
                sff += f * f;
                smm += m * m;
                sfm += f * m;
                n += 1.0;
            }
        }
    }
    let cov = sfm - sf * sm / n;
    let vf = sff - sf * sf / n;
    let vm = smm - sm * sm / n;
    if vf <= 0.0 || vm <= 0.0 {
        return -1.0;
    }
    cov / (vf * vm).sqrt()
}

/// params = [tz, ty, tx (mm), rz, ry, rx (deg)], rotation about `centre`.
fn params_to_transform(centre: [f64; 3], p: &[f64; 6]) -> RigidTransform {
    RigidTransform::about_centre(centre, [p[3], p[4], p[5]], [p[0], p[1], p[2]])
}

/// Estimate the rigid transform aligning `moving` onto `fixed` and return
/// it with the moving volume resampled onto the fixed grid.
///
/// Coarse-to-fine: block-averaged pyramid, exhaustive integer translation
/// search at the coarsest level, then greedy coordinate descent with
/// halving steps at every level. The correlation objective is sampled at
/// stride 2 at full resolution (exact at coarser levels).
pub fn register_rigid(
    moving: &CtVolume,
    fixed: &CtVolume,
    cfg: &PreprocessConfig,
) -> Result<(RigidTransform, CtVolume)> {
    for (v, name) in [(fixed, "fixed"), (moving, "moving")] {
        if v.stage != Stage::Normalized {
            return Err(Error::Input(format!(
                "registration expects normalised volumes, {name} is {}",
                v.stage.name()
            )));
        }
    }
    let fill = cfg.fill_mode.value();
    let centre = {
        let [nz, ny, nx] = fixed.dims();
        fixed.voxel_to_mm([(nz as f64 - 1.0) * 0.5, (ny as f64 - 1.0) * 0.5, (nx as f64 - 1.0) * 0.5])
    };

    let mut fixed_pyr = vec![fixed.clone()];
    let mut moving_pyr = vec![moving.clone()];
    for _ in 1..cfg.pyramid_levels.max(1) {
        let f = downsample_half(fixed_pyr.last().unwrap());
        if f.dims().iter().any(|&d| d < 8) {
            break;
        }
        moving_pyr.push(downsample_half(moving_pyr.last().unwrap()));
        fixed_pyr.push(f);
    }

    let mut params = [0.0f64; 6];
    let mut best = f64::NEG_INFINITY;
    let levels = fixed_pyr.len();
    for lvl in (0..levels).rev() {
        let f = &fixed_pyr[lvl];
        let m = &moving_pyr[lvl];
        let stride = if lvl == 0 && levels > 1 { 2 } else { 1 };
        if lvl == levels - 1 {
            // exhaustive integer-voxel translation search
            let s = f.spacing;
            let r = cfg.coarse_search_voxels;
            for kz in -r..=r {
                for ky in -r..=r {
                    for kx in -r..=r {
                        let trial = [kz as f64 * s.z, ky as f64 * s.y, kx as f64 * s.x, 0.0, 0.0, 0.0];
                        let score = ncc(f, m, centre, &trial, fill, stride);
                        if score > best {
                            best = score;
                            params = trial;
                        }
                    }
                }
            }
        } else {
            best = ncc(f, m, centre, &params, fill, stride);
        }
        let mut steps = [f.spacing.z, f.spacing.y, f.spacing.x, 1.0, 1.0, 1.0];
        let min_tstep = 0.1 * fixed.spacing.min();
        let min_rstep = 0.05;
        for _ in 0..cfg.max_iterations {
            let mut improved = false;
            for d in 0..6 {
                if d >= 3 && !cfg.estimate_rotation {
                    continue;
                }
                for sgn in [1.0, -1.0] {
                    let mut trial = params;
                    trial[d] += sgn * steps[d];
                    let score = ncc(f, m, centre, &trial, fill, stride);
                    if score > best + 1e-12 {
                        best = score;
                        params = trial;
                        improved = true;
                    }
                }
            }
            if !improved {
                for s in &mut steps {
                    *s *= 0.5;
                }
                let t_done = steps[..3].iter().all(|&s| s < min_tstep);
                let r_done = !cfg.estimate_rotation || steps[3..].iter().all(|&s| s < min_rstep);
                if t_done && r_done {
                    break;
                }
            }
        }
    }

    let transform = params_to_transform(centre, &params);
    let final_score = ncc(fixed, moving, centre, &params, fill, 2);
    if final_score < NCC_FLOOR {
        return Err(Error::Registration(format!(
            "correlation {final_score:.3} below {NCC_FLOOR} after optimisation"
        )));
    }
    let resampled = resample(moving, fixed, &transform, fill);
    Ok((transform, resampled))
}

/// Warp `moving` onto the grid of `fixed` under `transform` (fixed frame
/// to moving frame), trilinear with `fill` outside the field of view.
pub fn resample(moving: &CtVolume, fixed: &CtVolume, transform: &RigidTransform, fill: f64) -> CtVolume {
    let (nz, ny, nx) = fixed.data.dim();
    let mut data = Array3::<f64>::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = fixed.voxel_to_mm([z as f64, y as f64, x as f64]);
                let p = transform.apply(q);
                let idx = moving.mm_to_voxel(p);
                data[[z, y, x]] = moving.trilinear(idx[0], idx[1], idx[2], fill);
            }
        }
    }
    let mut out = CtVolume::new(data, fixed.spacing, Stage::Registered);
    out.origin = fixed.origin;
    out
}

/// A fully preprocessed longitudinal case: every screen normalised,
/// aligned to the first screen, and cropped to its lung box.
#[derive(Debug, Clone)]
pub struct PreprocessedCase {
    pub case: SeriesCase,
    /// First-screen lung bounding box all volumes were cropped with.
    pub crop: CropBox,
    /// Fixed-to-moving transform per screen (identity for the first).
    pub transforms: Vec<RigidTransform>,
}

/// Mask, normalise and crop a single scan.
pub fn preprocess_scan(v: &CtVolume, cfg: &PreprocessConfig) -> Result<(CtVolume, CropBox)> {
    let mask = extract_lung_mask(v, cfg)?;
    let norm = normalize(v, &mask, cfg)?;
    crop_to_lung(&norm, &mask, cfg.crop_margin)
}

/// Run the full pipeline on a longitudinal case: the first screen is
/// masked, normalised and cropped; later screens are normalised with
/// their own masks, rigidly registered onto the first screen, then
/// cropped with its box so every output shares dimensions.
pub fn preprocess_case(case: &SeriesCase, cfg: &PreprocessConfig) -> Result<PreprocessedCase> {
    let first = &case.scans[0].volume;
    let mask0 = extract_lung_mask(first, cfg)?;
    let norm0 = normalize(first, &mask0, cfg)?;
    let (cropped0, bbox) = crop_to_lung(&norm0, &mask0, cfg.crop_margin)?;

    let mut scans = vec![TimepointScan { months: case.scans[0].months, volume: cropped0 }];
    let mut transforms = vec![RigidTransform::identity()];
    for scan in &case.scans[1..] {
        let mask = extract_lung_mask(&scan.volume, cfg)?;
        let norm = normalize(&scan.volume, &mask, cfg)?;
        let (transform, registered) = register_rigid(&norm, &norm0, cfg)?;
        scans.push(TimepointScan { months: scan.months, volume: crop_with_box(&registered, &bbox) });
        transforms.push(transform);
    }
    let case = SeriesCase::new(case.patient_id.clone(), scans)?;
    Ok(PreprocessedCase { case, crop: bbox, transforms })
}
