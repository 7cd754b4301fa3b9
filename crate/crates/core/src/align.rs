//! Face alignment: least-squares similarity transform from five facial
//! landmarks onto a canonical 96×112 template, then an inverse-mapped
//! bilinear warp.

use serde::{Deserialize, Serialize};

use crate::pnm::Image;
use crate::tensor::TensorError;

/// Five landmark points in (x, y) pixel-center coordinates, in the fixed
/// order: left eye, right eye, nose tip, left mouth corner, right mouth
/// corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks5 {
    pub points: [(f64, f64); 5],
}

pub const TEMPLATE_WIDTH: usize = 96;
pub const TEMPLATE_HEIGHT: usize = 112;

/// Canonical landmark positions in the 96×112 output.
pub const TEMPLATE: Landmarks5 = Landmarks5 {
    points: [(30.0, 52.0), (66.0, 52.0), (48.0, 72.0), (33.0, 92.0), (63.0, 92.0)],
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Fit the transform to the two eye points only instead of all five
    /// landmarks.
    pub eyes_only: bool,
}

/// Orientation-preserving similarity transform
/// `(x, y) ↦ (a·x − b·y + tx, b·x + a·y + ty)`,
/// i.e. multiplication by the complex number `a + b·i` plus a translation.
/// Its determinant is `a² + b² > 0`, so no reflection can occur.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    pub fn scale(&self) -> f64 {
        (self.a * self.a + self.b * self.b).sqrt()
    }

    pub fn inverse(&self) -> Result<Similarity, TensorError> {
        let n = self.a * self.a + self.b * self.b;
        if !(n > 1e-24) {
            return Err(TensorError::invalid("similarity", "transform is not invertible"));
        }
        let (ia, ib) = (self.a / n, -self.b / n);
        Ok(Similarity {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        })
    }
}

/// Least-squares similarity mapping `src` landmarks onto the template.
///
/// Writing each point as a complex number, the model is `w ≈ s·z + t`;
/// on centered coordinates the optimum is
/// `s = Σ conj(z_c)·w_c / Σ |z_c|²` and `t = w̄ − s·z̄`, which is
/// orientation-preserving by construction. Coincident (or non-finite)
/// source points leave the problem degenerate and are rejected.
pub fn estimate_similarity(
    src: &Landmarks5,
    config: &AlignConfig,
) -> Result<Similarity, TensorError> {
    estimate_similarity_to(src, &TEMPLATE, config)
}

/// As [`estimate_similarity`], but onto caller-supplied destination
/// landmarks (still interpreted in the fixed 96×112 output frame).
pub fn estimate_similarity_to(
    src: &Landmarks5,
    dst: &Landmarks5,
    config: &AlignConfig,
) -> Result<Similarity, TensorError> {
    let k = if config.eyes_only { 2 } else { 5 };
    let zs = &src.points[..k];
    let ws = &dst.points[..k];
    if zs.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(TensorError::invalid("alignment", "landmarks contain non-finite values"));
    }

    let n = k as f64;
    let (zx, zy) = zs.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.0, sy + p.1));
    let (wx, wy) = ws.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.0, sy + p.1));
    let (zx, zy, wx, wy) = (zx / n, zy / n, wx / n, wy / n);

    let mut num_re = 0.0;
    let mut num_im = 0.0;
    let mut den = 0.0;
    for (z, w) in zs.iter().zip(ws) {
        let (cx, cy) = (z.0 - zx, z.1 - zy);
        let (dx, dy) = (w.0 - wx, w.1 - wy);
        // conj(z_c) * w_c
        num_re += cx * dx + cy * dy;
        num_im += cx * dy - cy * dx;
        den += cx * cx + cy * cy;
    }
    if den < 1e-12 {
        return Err(TensorError::invalid(
            "alignment",
            "landmarks are coincident; the similarity transform is degenerate",
        ));
    }
    let a = num_re / den;
    let b = num_im / den;
    if a * a + b * b < 1e-24 {
        return Err(TensorError::invalid(
            "alignment",
            "landmark layout collapses to zero scale; cannot align",
        ));
    }
    Ok(Similarity { a, b, tx: wx - (a * zx - b * zy), ty: wy - (b * zx + a * zy) })
}

/// Warps `img` into template space (96×112) with the similarity that maps
/// source coordinates to template coordinates. Each output pixel center is
/// pulled back through the inverse transform and bilinearly interpolated;
/// samples falling outside the source raster read as zero.
pub fn warp_to_template(img: &Image, transform: &Similarity) -> Result<Image, TensorError> {
    let inv = transform.inverse()?;
    let mut out = Image::new(TEMPLATE_WIDTH, TEMPLATE_HEIGHT, img.channels)
        .map_err(|e| TensorError::invalid("warp", e.to_string()))?;
    let (w, h, ch) = (img.width as isize, img.height as isize, img.channels);

    let sample = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            img.get(x as usize, y as usize, c) as f64
        }
    };

    for oy in 0..TEMPLATE_HEIGHT {
        for ox in 0..TEMPLATE_WIDTH {
            let (sx, sy) = inv.apply(ox as f64, oy as f64);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..ch {
                let v00 = sample(x0, y0, c);
                let v10 = sample(x0 + 1, y0, c);
                let v01 = sample(x0, y0 + 1, c);
                let v11 = sample(x0 + 1, y0 + 1, c);
                let top = v00 + (v10 - v00) * fx;
                let bot = v01 + (v11 - v01) * fx;
                let v = top + (bot - top) * fy;
                out.set(ox, oy, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Estimates the landmark similarity and warps the image in one step.
pub fn align_face(
    img: &Image,
    landmarks: &Landmarks5,
    config: &AlignConfig,
) -> Result<Image, TensorError> {
    let t = estimate_similarity(landmarks, config)?;
    warp_to_template(img, &t)
}
