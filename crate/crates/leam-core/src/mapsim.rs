//! Activation-map similarity: maps as 2-D probability distributions compared
//! by Bhattacharyya coefficient and exact earth mover's distance, plus the
//! landmark-based similarity alignment used before comparing maps of
//! different images.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::transport::solve_transportation;
use crate::{Error, Result};

/// A nonnegative rank-2 grid summing to 1 (within 1e-9).
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    grid: Tensor,
}

impl ProbabilityMap {
    /// Wrap a grid that is already normalized.
    pub fn from_grid(grid: Tensor) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::Shape(format!(
                "probability map must be rank 2, got {:?}",
                grid.shape()
            )));
        }
        if grid.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Shape("probability map has negative values".into()));
        }
        let sum = grid.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Shape(format!(
                "probability map sums to {sum}, expected 1"
            )));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }
}

/// Sum-normalize a nonnegative map into a distribution.
pub fn normalize_distribution(map: &Tensor) -> Result<ProbabilityMap> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "normalize_distribution wants rank 2, got {:?}",
            map.shape()
        )));
    }
    if map.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Shape(
            "normalize_distribution wants nonnegative finite values".into(),
        ));
    }
    let sum = map.sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateDistribution);
    }
    let grid = map.scale(1.0 / sum);
    Ok(ProbabilityMap { grid })
}

/// Bhattacharyya coefficient `sum sqrt(P Q)`, in `[0, 1]`.
pub fn bhattacharyya(p: &ProbabilityMap, q: &ProbabilityMap) -> Result<f64> {
    if p.grid.shape() != q.grid.shape() {
        return Err(Error::Shape(format!(
            "bhattacharyya: {:?} vs {:?}",
            p.grid.shape(),
            q.grid.shape()
        )));
    }
    let bc: f64 = p
        .grid
        .data()
        .iter()
        .zip(q.grid.data())
        .map(|(&a, &b)| (a * b).sqrt())
        .sum();
    Ok(bc.min(1.0))
}

/// Exact earth mover's distance with Euclidean ground distance between pixel
/// centers. Zero-mass cells are excluded from the transport problem; the
/// solution is certified by complementary slackness before being returned.
pub fn emd(p: &ProbabilityMap, q: &ProbabilityMap) -> Result<f64> {
    if p.grid.shape() != q.grid.shape() {
        return Err(Error::Shape(format!(
            "emd: {:?} vs {:?}",
            p.grid.shape(),
            q.grid.shape()
        )));
    }
    let w = p.grid.shape()[1];
    let coords = |grid: &Tensor| -> (Vec<(f64, f64)>, Vec<f64>) {
        let mut pts = Vec::new();
        let mut mass = Vec::new();
        for (idx, &v) in grid.data().iter().enumerate() {
            if v > 0.0 {
                pts.push(((idx / w) as f64, (idx % w) as f64));
                mass.push(v);
            }
        }
        (pts, mass)
    };
    let (src_pts, src_mass) = coords(&p.grid);
    let (snk_pts, snk_mass) = coords(&q.grid);
    emd_between_supports(&src_pts, &src_mass, &snk_pts, &snk_mass)
}

fn emd_between_supports(
    src_pts: &[(f64, f64)],
    src_mass: &[f64],
    snk_pts: &[(f64, f64)],
    snk_mass: &[f64],
) -> Result<f64> {
    if src_pts.is_empty() || snk_pts.is_empty() {
        return Err(Error::DegenerateDistribution);
    }
    let solution = solve_transportation(src_mass, snk_mass, |i, j| {
        let (ry, rx) = src_pts[i];
        let (sy, sx) = snk_pts[j];
        ((ry - sy).powi(2) + (rx - sx).powi(2)).sqrt()
    })?;
    Ok(solution.cost)
}

/// Downsampled EMD: both maps are box-averaged to `grid_side x grid_side`,
/// renormalized, and compared with ground distances measured between cell
/// centers mapped back into source-pixel coordinates. Reported distances are
/// therefore in the same pixel units as full-resolution [`emd`], and running
/// at the native side is the identity pipeline.
#[derive(Debug, Clone, Copy)]
pub struct EmdResult {
    pub value: f64,
    pub grid_side: usize,
}

pub fn emd_downsampled(p: &ProbabilityMap, q: &ProbabilityMap, grid_side: usize) -> Result<EmdResult> {
    if grid_side < 2 {
        return Err(Error::Shape("emd grid side must be at least 2".into()));
    }
    if p.grid.shape() != q.grid.shape() {
        return Err(Error::Shape(format!(
            "emd_downsampled: {:?} vs {:?}",
            p.grid.shape(),
            q.grid.shape()
        )));
    }
    let (h, w) = p.shape();
    let side = grid_side.min(h.min(w)).max(2);
    let down_p = box_downsample(&p.grid, side, side)?;
    let down_q = box_downsample(&q.grid, side, side)?;
    let pd = normalize_distribution(&down_p)?;
    let qd = normalize_distribution(&down_q)?;

    // Cell centers in source-pixel coordinates.
    let row_of = |i: usize| (i as f64 + 0.5) * h as f64 / side as f64 - 0.5;
    let col_of = |j: usize| (j as f64 + 0.5) * w as f64 / side as f64 - 0.5;
    let collect = |grid: &Tensor| {
        let mut pts = Vec::new();
        let mut mass = Vec::new();
        for (idx, &v) in grid.data().iter().enumerate() {
            if v > 0.0 {
                pts.push((row_of(idx / side), col_of(idx % side)));
                mass.push(v);
            }
        }
        (pts, mass)
    };
    let (src_pts, src_mass) = collect(pd.grid());
    let (snk_pts, snk_mass) = collect(qd.grid());
    let value = emd_between_supports(&src_pts, &src_mass, &snk_pts, &snk_mass)?;
    Ok(EmdResult {
        value,
        grid_side: side,
    })
}

/// Area-weighted box average onto a `rows x cols` grid.
pub fn box_downsample(map: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "box_downsample wants rank 2, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let ry = h as f64 / rows as f64;
    let rx = w as f64 / cols as f64;
    let mut out = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        let y0 = i as f64 * ry;
        let y1 = (i + 1) as f64 * ry;
        for j in 0..cols {
            let x0 = j as f64 * rx;
            let x1 = (j + 1) as f64 * rx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let sy = (y0.floor() as usize).min(h - 1);
            let ey = (y1.ceil() as usize).min(h);
            for r in sy..ey {
                let oy = (y1.min((r + 1) as f64) - y0.max(r as f64)).max(0.0);
                if oy == 0.0 {
                    continue;
                }
                let sx = (x0.floor() as usize).min(w - 1);
                let ex = (x1.ceil() as usize).min(w);
                for c in sx..ex {
                    let ox = (x1.min((c + 1) as f64) - x0.max(c as f64)).max(0.0);
                    if ox == 0.0 {
                        continue;
                    }
                    acc += map.at2(r, c) * oy * ox;
                    area += oy * ox;
                }
            }
            out.data_mut()[i * cols + j] = if area > 0.0 { acc / area } else { 0.0 };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Landmark alignment
// ---------------------------------------------------------------------------

/// Landmark names that every set must provide.
pub const REQUIRED_LANDMARKS: [&str; 7] = [
    "left-eye-outer",
    "left-eye-inner",
    "right-eye-inner",
    "right-eye-outer",
    "nose-tip",
    "mouth-left",
    "mouth-right",
];

/// Named sub-pixel 2-D points, origin top-left, `[x, y]` in pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub width: usize,
    pub height: usize,
    pub points: BTreeMap<String, [f64; 2]>,
}

impl LandmarkSet {
    pub fn validate(&self) -> Result<()> {
        for name in REQUIRED_LANDMARKS {
            if !self.points.contains_key(name) {
                return Err(Error::Format(format!("landmark set misses {name:?}")));
            }
        }
        for (name, [x, y]) in &self.points {
            if !(*x >= 0.0 && *x <= (self.width as f64) && *y >= 0.0 && *y <= self.height as f64)
            {
                return Err(Error::Format(format!(
                    "landmark {name:?} at ({x}, {y}) is outside {}x{}",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.points.get(name).map(|&[x, y]| (x, y))
    }
}

/// Read a landmark set from its UTF-8 JSON file.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path)?;
    let set: LandmarkSet = serde_json::from_str(&text)?;
    set.validate()?;
    Ok(set)
}

pub fn save_landmarks(set: &LandmarkSet, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(set)?)?;
    Ok(())
}

/// `p' = s R(theta) p + t` on `(x, y)` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        theta: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn apply(&self, point: (f64, f64)) -> (f64, f64) {
        let (cos, sin) = (self.theta.cos(), self.theta.sin());
        let (x, y) = point;
        (
            self.scale * (cos * x - sin * y) + self.tx,
            self.scale * (sin * x + cos * y) + self.ty,
        )
    }

    pub fn inverse(&self) -> Self {
        let s = 1.0 / self.scale;
        let theta = -self.theta;
        let (cos, sin) = (theta.cos(), theta.sin());
        Self {
            scale: s,
            theta,
            tx: -s * (cos * self.tx - sin * self.ty),
            ty: -s * (sin * self.tx + cos * self.ty),
        }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.scale - 1.0).abs() <= tol
            && self.theta.abs() <= tol
            && self.tx.abs() <= tol
            && self.ty.abs() <= tol
    }

    /// The transform applying `self` first and `then` second.
    pub fn then(&self, then: &SimilarityTransform) -> SimilarityTransform {
        let (tx, ty) = then.apply((self.tx, self.ty));
        SimilarityTransform {
            scale: then.scale * self.scale,
            theta: then.theta + self.theta,
            tx,
            ty,
        }
    }
}

/// Pure rotation about the image center that makes the outer-eye-corner
/// segment horizontal, with the left eye staying leftmost.
pub fn rotation_from_eye_corners(landmarks: &LandmarkSet) -> Result<SimilarityTransform> {
    let left = landmarks
        .get("left-eye-outer")
        .ok_or_else(|| Error::Missing("left-eye-outer".into()))?;
    let right = landmarks
        .get("right-eye-outer")
        .ok_or_else(|| Error::Missing("right-eye-outer".into()))?;
    let (dx, dy) = (right.0 - left.0, right.1 - left.1);
    if dx.hypot(dy) <= 1e-12 {
        return Err(Error::Geometry("coincident eye corners".into()));
    }
    let theta = -dy.atan2(dx);
    let cx = (landmarks.width as f64 - 1.0) / 2.0;
    let cy = (landmarks.height as f64 - 1.0) / 2.0;
    let (cos, sin) = (theta.cos(), theta.sin());
    Ok(SimilarityTransform {
        scale: 1.0,
        theta,
        tx: cx - (cos * cx - sin * cy),
        ty: cy - (sin * cx + cos * cy),
    })
}

/// Least-squares similarity transform mapping `src` landmarks onto `reference`
/// ones (closed form via the complex formulation of the Umeyama problem;
/// rotation and positive scale only, no reflection).
pub fn estimate_similarity_transform(
    src: &LandmarkSet,
    reference: &LandmarkSet,
) -> Result<SimilarityTransform> {
    let common: Vec<&String> = src
        .points
        .keys()
        .filter(|k| reference.points.contains_key(*k))
        .collect();
    if common.len() < 2 {
        return Err(Error::Geometry(format!(
            "need at least 2 common landmarks, have {}",
            common.len()
        )));
    }
    let n = common.len() as f64;
    let (mut sx, mut sy, mut rx, mut ry) = (0.0, 0.0, 0.0, 0.0);
    for name in &common {
        let [x, y] = src.points[*name];
        let [u, v] = reference.points[*name];
        sx += x;
        sy += y;
        rx += u;
        ry += v;
    }
    let (msx, msy, mrx, mry) = (sx / n, sy / n, rx / n, ry / n);
    // alpha = sum(ref_c * conj(src_c)) / sum(|src_c|^2) over centered points.
    let (mut num_re, mut num_im, mut denom) = (0.0, 0.0, 0.0);
    for name in &common {
        let [x, y] = src.points[*name];
        let [u, v] = reference.points[*name];
        let (a, b) = (x - msx, y - msy);
        let (c, d) = (u - mrx, v - mry);
        num_re += c * a + d * b;
        num_im += d * a - c * b;
        denom += a * a + b * b;
    }
    if denom <= 1e-12 {
        return Err(Error::Geometry("source landmarks are coincident".into()));
    }
    let (ar, ai) = (num_re / denom, num_im / denom);
    let scale = ar.hypot(ai);
    if scale <= 1e-12 {
        return Err(Error::Geometry("reference landmarks are coincident".into()));
    }
    let theta = ai.atan2(ar);
    // t = mean(ref) - alpha * mean(src), complex product expanded.
    Ok(SimilarityTransform {
        scale,
        theta,
        tx: mrx - (ar * msx - ai * msy),
        ty: mry - (ai * msx + ar * msy),
    })
}

/// Resample a rank-2 map (or each channel of a rank-3 image) under a
/// similarity transform: output pixels are inverse-mapped and bilinearly
/// sampled, with zero fill outside the input.
pub fn apply_transform(tensor: &Tensor, transform: &SimilarityTransform) -> Result<Tensor> {
    match tensor.rank() {
        2 => apply_transform_plane(tensor, transform),
        3 => {
            let (ch, h, w) = (tensor.shape()[0], tensor.shape()[1], tensor.shape()[2]);
            let plane = h * w;
            let mut out = Tensor::zeros(vec![ch, h, w]);
            for c in 0..ch {
                let slice =
                    Tensor::new(vec![h, w], tensor.data()[c * plane..(c + 1) * plane].to_vec())?;
                let warped = apply_transform_plane(&slice, transform)?;
                out.data_mut()[c * plane..(c + 1) * plane].copy_from_slice(warped.data());
            }
            Ok(out)
        }
        _ => Err(Error::Shape(format!(
            "apply_transform wants rank 2 or 3, got {:?}",
            tensor.shape()
        ))),
    }
}

fn apply_transform_plane(map: &Tensor, transform: &SimilarityTransform) -> Result<Tensor> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let inv = transform.inverse();
    let mut out = Tensor::zeros(vec![h, w]);
    for r in 0..h {
        for c in 0..w {
            let (sx, sy) = inv.apply((c as f64, r as f64));
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = 0.0;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                let yy = y0 as isize + dy;
                if wy == 0.0 || yy < 0 || yy >= h as isize {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let xx = x0 as isize + dx;
                    if wx == 0.0 || xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += wy * wx * map.at2(yy as usize, xx as usize);
                }
            }
            out.data_mut()[r * w + c] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn uniform(h: usize, w: usize) -> ProbabilityMap {
        normalize_distribution(&Tensor::from_fn(vec![h, w], |_| 1.0)).unwrap()
    }

    fn random_map(h: usize, w: usize, rng: &mut Xoshiro256StarStar) -> ProbabilityMap {
        normalize_distribution(&Tensor::from_fn(vec![h, w], |_| rng.gen_range(0.01..1.0)))
            .unwrap()
    }

    #[test]
    fn normalize_distribution_cases() {
        let p = normalize_distribution(&Tensor::from_fn(vec![2, 2], |_| 1.0)).unwrap();
        assert!(p.grid().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let m = Tensor::from_fn(vec![2, 3], |i| (i + 1) as f64);
        let a = normalize_distribution(&m).unwrap();
        let b = normalize_distribution(&m.scale(7.5)).unwrap();
        for (x, y) in a.grid().data().iter().zip(b.grid().data()) {
            assert!((x - y).abs() <= 1e-15);
        }

        assert!(matches!(
            normalize_distribution(&Tensor::zeros(vec![2, 2])),
            Err(Error::DegenerateDistribution)
        ));
    }

    #[test]
    fn bhattacharyya_cases() {
        let p = uniform(2, 2);
        assert!((bhattacharyya(&p, &p).unwrap() - 1.0).abs() <= 1e-9);

        let a = normalize_distribution(
            &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let b = normalize_distribution(
            &Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(bhattacharyya(&a, &b).unwrap(), 0.0);

        let p = ProbabilityMap::from_grid(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap())
            .unwrap();
        let q = ProbabilityMap::from_grid(Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap())
            .unwrap();
        let bc = bhattacharyya(&p, &q).unwrap();
        assert!((bc - 0.894427).abs() <= 1e-6, "bc = {bc}");
    }

    proptest! {
        #[test]
        fn bhattacharyya_symmetric_and_bounded(
            pv in proptest::collection::vec(0.001f64..1.0, 12),
            qv in proptest::collection::vec(0.001f64..1.0, 12),
        ) {
            let p = normalize_distribution(&Tensor::new(vec![3, 4], pv).unwrap()).unwrap();
            let q = normalize_distribution(&Tensor::new(vec![3, 4], qv).unwrap()).unwrap();
            let pq = bhattacharyya(&p, &q).unwrap();
            let qp = bhattacharyya(&q, &p).unwrap();
            prop_assert_eq!(pq, qp);
            prop_assert!((0.0..=1.0).contains(&pq));
        }
    }

    #[test]
    fn emd_hand_cases() {
        let p = uniform(3, 3);
        assert!(emd(&p, &p).unwrap().abs() <= 1e-12);

        // Unit mass moved from (0,0) to (3,4) costs the Euclidean distance 5.
        let mut a = Tensor::zeros(vec![4, 5]);
        a.data_mut()[0] = 1.0;
        let mut b = Tensor::zeros(vec![4, 5]);
        b.data_mut()[3 * 5 + 4] = 1.0;
        let pa = ProbabilityMap::from_grid(a).unwrap();
        let pb = ProbabilityMap::from_grid(b).unwrap();
        assert!((emd(&pa, &pb).unwrap() - 5.0).abs() <= 1e-9);

        // Uniform on row 0 vs uniform on row 1 of a 2x2 grid: each half mass
        // moves one row down.
        let p = ProbabilityMap::from_grid(
            Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let q = ProbabilityMap::from_grid(
            Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.5, 0.5]).unwrap(),
        )
        .unwrap();
        assert!((emd(&p, &q).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn emd_metric_properties_on_small_grids() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(12);
        for _ in 0..20 {
            let p = random_map(3, 3, &mut rng);
            let q = random_map(3, 3, &mut rng);
            let r = random_map(3, 3, &mut rng);
            let pq = emd(&p, &q).unwrap();
            let qp = emd(&q, &p).unwrap();
            assert!((pq - qp).abs() <= 1e-9, "symmetry: {pq} vs {qp}");
            let pr = emd(&p, &r).unwrap();
            let qr = emd(&q, &r).unwrap();
            assert!(pr <= pq + qr + 1e-9, "triangle: {pr} > {pq} + {qr}");
            assert!(emd(&p, &p).unwrap().abs() <= 1e-9);
        }
    }

    #[test]
    fn emd_downsample_identity_at_native_side() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let p = random_map(8, 8, &mut rng);
        let q = random_map(8, 8, &mut rng);
        let full = emd(&p, &q).unwrap();
        let down = emd_downsampled(&p, &q, 8).unwrap();
        assert_eq!(down.grid_side, 8);
        assert!((down.value - full).abs() <= 1e-9, "{} vs {full}", down.value);
    }

    #[test]
    fn emd_downsample_constant_maps_are_zero() {
        let p = uniform(16, 16);
        for side in [2, 4, 8] {
            let r = emd_downsampled(&p, &p, side).unwrap();
            assert!(r.value.abs() <= 1e-10);
        }
    }

    #[test]
    fn box_downsample_averages() {
        // 4x4 -> 2x2 with integer blocks.
        let m = Tensor::from_fn(vec![4, 4], |i| i as f64);
        let d = box_downsample(&m, 2, 2).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
        // Non-integer ratio keeps the overall mean.
        let d = box_downsample(&m, 3, 3).unwrap();
        let mean_src = m.sum() / 16.0;
        let mean_dst = d.sum() / 9.0;
        assert!((mean_src - mean_dst).abs() <= 1e-9);
    }

    fn square_landmarks(width: usize, height: usize) -> LandmarkSet {
        let mut points = BTreeMap::new();
        points.insert("left-eye-outer".into(), [10.0, 20.0]);
        points.insert("left-eye-inner".into(), [18.0, 20.5]);
        points.insert("right-eye-inner".into(), [26.0, 20.5]);
        points.insert("right-eye-outer".into(), [34.0, 20.0]);
        points.insert("nose-tip".into(), [22.0, 30.0]);
        points.insert("mouth-left".into(), [16.0, 38.0]);
        points.insert("mouth-right".into(), [28.0, 38.0]);
        LandmarkSet {
            width,
            height,
            points,
        }
    }

    #[test]
    fn eye_corner_rotation_cases() {
        // Already horizontal: identity rotation.
        let lm = square_landmarks(64, 64);
        let t = rotation_from_eye_corners(&lm).unwrap();
        assert!(t.theta.abs() <= 1e-12);
        assert_eq!(t.scale, 1.0);

        // Vertical corners rotate by +-pi/2.
        let mut lm = square_landmarks(64, 64);
        lm.points.insert("left-eye-outer".into(), [0.0, 0.0]);
        lm.points.insert("right-eye-outer".into(), [0.0, 10.0]);
        let t = rotation_from_eye_corners(&lm).unwrap();
        assert!((t.theta.abs() - std::f64::consts::FRAC_PI_2).abs() <= 1e-12);
        let l = t.apply((0.0, 0.0));
        let r = t.apply((0.0, 10.0));
        assert!((l.1 - r.1).abs() <= 1e-9, "corners end up horizontal");
        assert!(l.0 < r.0, "left eye stays leftmost");

        // Idempotence: aligning an aligned set is the identity.
        let mut aligned = square_landmarks(64, 64);
        aligned.points.insert("left-eye-outer".into(), [l.0, l.1]);
        aligned.points.insert("right-eye-outer".into(), [r.0, r.1]);
        let t2 = rotation_from_eye_corners(&aligned).unwrap();
        assert!(t2.theta.abs() <= 1e-9);

        // Coincident corners are an error.
        let mut bad = square_landmarks(64, 64);
        bad.points.insert("right-eye-outer".into(), [10.0, 20.0]);
        assert!(rotation_from_eye_corners(&bad).is_err());
    }

    #[test]
    fn similarity_estimation_cases() {
        let src = square_landmarks(64, 64);
        // src == ref -> identity.
        let t = estimate_similarity_transform(&src, &src).unwrap();
        assert!(t.is_identity(1e-12));

        // Uniform scale by 2 is recovered exactly.
        let mut scaled = src.clone();
        for v in scaled.points.values_mut() {
            v[0] *= 2.0;
            v[1] *= 2.0;
        }
        scaled.width = 128;
        scaled.height = 128;
        let t = estimate_similarity_transform(&src, &scaled).unwrap();
        assert!((t.scale - 2.0).abs() <= 1e-12);
        assert!(t.theta.abs() <= 1e-12);

        // Fewer than two common points is an error.
        let mut disjoint = src.clone();
        disjoint.points = BTreeMap::new();
        disjoint
            .points
            .insert("left-eye-outer".into(), [1.0, 1.0]);
        assert!(estimate_similarity_transform(&src, &disjoint).is_err());
    }

    #[test]
    fn similarity_recovery_within_1e9() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(21);
        for _ in 0..50 {
            let src = square_landmarks(64, 64);
            let truth = SimilarityTransform {
                scale: rng.gen_range(0.5..2.0),
                theta: rng.gen_range(-1.2..1.2),
                tx: rng.gen_range(-10.0..10.0),
                ty: rng.gen_range(-10.0..10.0),
            };
            let mut reference = src.clone();
            reference.width = 512;
            reference.height = 512;
            for v in reference.points.values_mut() {
                let (x, y) = truth.apply((v[0], v[1]));
                *v = [x + 150.0, y + 150.0]; // keep in bounds; pure shift folds into t
            }
            let est = estimate_similarity_transform(&src, &reference).unwrap();
            assert!((est.scale - truth.scale).abs() <= 1e-9);
            assert!((est.theta - truth.theta).abs() <= 1e-9);
            for (name, v) in &src.points {
                let want = reference.points[name];
                let got = est.apply((v[0], v[1]));
                assert!((got.0 - want[0]).abs() <= 1e-9);
                assert!((got.1 - want[1]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn apply_transform_cases() {
        let map = Tensor::from_fn(vec![5, 4], |i| (i * 13 % 7) as f64);
        let same = apply_transform(&map, &SimilarityTransform::IDENTITY).unwrap();
        assert_eq!(same, map);

        // Translate a 3x3 impulse right by one pixel.
        let mut impulse = Tensor::zeros(vec![3, 3]);
        impulse.data_mut()[4] = 1.0; // center (1,1)
        let shift = SimilarityTransform {
            scale: 1.0,
            theta: 0.0,
            tx: 1.0,
            ty: 0.0,
        };
        let moved = apply_transform(&impulse, &shift).unwrap();
        assert_eq!(moved.at2(1, 2), 1.0);
        assert_eq!(moved.at2(1, 1), 0.0);
        let left_col: f64 = (0..3).map(|r| moved.at2(r, 0)).sum();
        assert_eq!(left_col, 0.0, "vacated border is zero");
    }

    proptest! {
        #[test]
        fn transform_never_creates_mass(values in proptest::collection::vec(0.0f64..1.0, 36),
                                        theta in -3.0f64..3.0,
                                        tx in -3.0f64..3.0,
                                        ty in -3.0f64..3.0) {
            let map = Tensor::new(vec![6, 6], values).unwrap();
            let t = SimilarityTransform { scale: 1.0, theta, tx, ty };
            let warped = apply_transform(&map, &t).unwrap();
            prop_assert!(warped.sum() <= map.sum() + 1e-6);
            prop_assert!(warped.data().iter().all(|&v| v >= -1e-12));
        }

        #[test]
        fn transform_roundtrip_returns_points(theta in -1.0f64..1.0,
                                              scale in 0.5f64..2.0,
                                              tx in -5.0f64..5.0,
                                              ty in -5.0f64..5.0,
                                              px in 0.0f64..50.0,
                                              py in 0.0f64..50.0) {
            let t = SimilarityTransform { scale, theta, tx, ty };
            let inv = t.inverse();
            let (qx, qy) = inv.apply(t.apply((px, py)));
            prop_assert!((qx - px).abs() <= 1e-6);
            prop_assert!((qy - py).abs() <= 1e-6);
        }
    }

    #[test]
    fn composition_matches_sequential_application() {
        let a = SimilarityTransform {
            scale: 1.5,
            theta: 0.3,
            tx: 2.0,
            ty: -1.0,
        };
        let b = SimilarityTransform {
            scale: 0.8,
            theta: -0.7,
            tx: -3.0,
            ty: 4.0,
        };
        let combined = a.then(&b);
        for point in [(0.0, 0.0), (5.0, 2.0), (-1.5, 7.25)] {
            let sequential = b.apply(a.apply(point));
            let direct = combined.apply(point);
            assert!((sequential.0 - direct.0).abs() <= 1e-12);
            assert!((sequential.1 - direct.1).abs() <= 1e-12);
        }
    }

    #[test]
    fn landmark_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        let lm = square_landmarks(64, 64);
        save_landmarks(&lm, &path).unwrap();
        let loaded = load_landmarks(&path).unwrap();
        assert_eq!(loaded.points, lm.points);

        // Out-of-bounds points are rejected on load.
        let mut bad = square_landmarks(16, 16);
        bad.points.insert("nose-tip".into(), [100.0, 2.0]);
        save_landmarks(&bad, &path).unwrap();
        assert!(load_landmarks(&path).is_err());
    }
}
