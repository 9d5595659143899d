use crate::error::{Error, Result};
use crate::flowalign::FlowField;
use crate::tensor::Image;

/// Estimates the flow that warps `moving` onto `anchor`.
pub trait FlowEstimator {
    fn name(&self) -> &str;

    fn deterministic(&self) -> bool {
        true
    }

    /// Both images are `C×H×W`; the returned field is `2×H×W`.
    fn estimate(&self, anchor: &Image, moving: &Image) -> Result<FlowField>;
}

/// Mean absolute difference between `anchor(p)` and `moving(p + d)` over the
/// pixels of `rows × cols` (inside `anchor`) whose shifted position is in bounds.
fn shifted_l1(
    anchor: &Image,
    moving: &Image,
    (u, v): (i64, i64),
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Option<f64> {
    let (c, h, w) = anchor.chw();
    let y_lo = rows.start.max((-v).max(0) as usize);
    let y_hi = rows.end.min((h as i64 - v.max(0)).max(0) as usize);
    let x_lo = cols.start.max((-u).max(0) as usize);
    let x_hi = cols.end.min((w as i64 - u.max(0)).max(0) as usize);
    if y_lo >= y_hi || x_lo >= x_hi {
        return None;
    }
    let (a, m) = (anchor.data(), moving.data());
    let mut s = 0.0f64;
    for ch in 0..c {
        for y in y_lo..y_hi {
            let ya = (ch * h + y) * w;
            let ym = (ch * h + (y as i64 + v) as usize) * w;
            for x in x_lo..x_hi {
                s += (a[ya + x] - m[(ym as i64 + x as i64 + u) as usize]).abs() as f64;
            }
        }
    }
    Some(s / (c * (y_hi - y_lo) * (x_hi - x_lo)) as f64)
}

/// Ordering used to break exact cost ties: smaller `|u|+|v|`, then `(u, v)`.
fn better(cand: (f64, i64, i64), best: Option<(f64, i64, i64)>) -> bool {
    let Some(best) = best else { return true };
    let key = |(c, u, v): (f64, i64, i64)| (c, u.abs() + v.abs(), u, v);
    let (a, b) = (key(cand), key(best));
    match a.0.partial_cmp(&b.0) {
        Some(std::cmp::Ordering::Less) => true,
        Some(std::cmp::Ordering::Equal) => (a.1, a.2, a.3) < (b.1, b.2, b.3),
        _ => false,
    }
}

fn search(
    anchor: &Image,
    moving: &Image,
    radius: i64,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> (i64, i64) {
    let mut best = None;
    for v in -radius..=radius {
        for u in -radius..=radius {
            if let Some(cost) = shifted_l1(anchor, moving, (u, v), rows.clone(), cols.clone()) {
                if better((cost, u, v), best) {
                    best = Some((cost, u, v));
                }
            }
        }
    }
    best.map(|(_, u, v)| (u, v)).unwrap_or((0, 0))
}

/// Exhaustive search for the single integer translation in `[-r, r]²` that
/// minimizes mean L1 over the overlap.
pub fn brute_force_translation(anchor: &Image, moving: &Image, radius: usize) -> Result<FlowField> {
    anchor.expect_same_shape(moving)?;
    let (_, h, w) = anchor.chw();
    if radius >= h.min(w) {
        return Err(Error::param(format!(
            "search radius {radius} exceeds image size {h}×{w}"
        )));
    }
    let (u, v) = search(anchor, moving, radius as i64, 0..h, 0..w);
    Ok(FlowField::constant(h, w, u as f32, v as f32))
}

/// Per-block integer L1 matching, bilinearly interpolated between block
/// centres into a dense field.
pub fn block_match_flow(anchor: &Image, moving: &Image, block: usize, radius: usize) -> Result<FlowField> {
    anchor.expect_same_shape(moving)?;
    let (_, h, w) = anchor.chw();
    if block < 4 || radius < 1 {
        return Err(Error::param(format!(
            "block_match needs block >= 4 and radius >= 1 (got {block}, {radius})"
        )));
    }
    if block > h || block > w {
        return Err(Error::param(format!("block {block} larger than image {h}×{w}")));
    }
    let by = h.div_ceil(block);
    let bx = w.div_ceil(block);
    let mut vecs = vec![(0.0f64, 0.0f64); by * bx];
    let mut centres_y = Vec::with_capacity(by);
    let mut centres_x = Vec::with_capacity(bx);
    for i in 0..by {
        let r = i * block..((i + 1) * block).min(h);
        centres_y.push((r.start + r.end - 1) as f64 / 2.0);
    }
    for j in 0..bx {
        let c = j * block..((j + 1) * block).min(w);
        centres_x.push((c.start + c.end - 1) as f64 / 2.0);
    }
    for i in 0..by {
        for j in 0..bx {
            let rows = i * block..((i + 1) * block).min(h);
            let cols = j * block..((j + 1) * block).min(w);
            let (u, v) = search(anchor, moving, radius as i64, rows, cols);
            vecs[i * bx + j] = (u as f64, v as f64);
        }
    }
    let interp = |centres: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= centres[0] {
            return (0, 0, 0.0);
        }
        let last = centres.len() - 1;
        if p >= centres[last] {
            return (last, last, 0.0);
        }
        let i = centres.iter().rposition(|&c| c <= p).unwrap();
        (i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i]))
    };
    Ok(FlowField::from_fn(h, w, |y, x| {
        let (y0, y1, fy) = interp(&centres_y, y as f64);
        let (x0, x1, fx) = interp(&centres_x, x as f64);
        let at = |a: usize, b: usize| vecs[a * bx + b];
        let mix = |k: fn((f64, f64)) -> f64| {
            (1.0 - fy) * ((1.0 - fx) * k(at(y0, x0)) + fx * k(at(y0, x1)))
                + fy * ((1.0 - fx) * k(at(y1, x0)) + fx * k(at(y1, x1)))
        };
        (mix(|p| p.0) as f32, mix(|p| p.1) as f32)
    }))
}

/// Desk-scale estimator: one global integer translation.
#[derive(Clone, Debug)]
pub struct BruteForceTranslation {
    pub radius: usize,
}

impl FlowEstimator for BruteForceTranslation {
    fn name(&self) -> &str {
        "brute_translation"
    }

    fn estimate(&self, anchor: &Image, moving: &Image) -> Result<FlowField> {
        brute_force_translation(anchor, moving, self.radius)
    }
}

/// Desk-scale estimator for spatially varying misalignment.
#[derive(Clone, Debug)]
pub struct BlockMatch {
    pub block: usize,
    pub radius: usize,
}

impl FlowEstimator for BlockMatch {
    fn name(&self) -> &str {
        "block_match"
    }

    fn estimate(&self, anchor: &Image, moving: &Image) -> Result<FlowField> {
        block_match_flow(anchor, moving, self.block, self.radius)
    }
}

/// Wraps an estimator and counts its invocations.
#[derive(Debug)]
pub struct CountingEstimator<E> {
    pub inner: E,
    calls: std::sync::atomic::AtomicUsize,
}

impl<E: FlowEstimator> CountingEstimator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: Default::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl<E: FlowEstimator> FlowEstimator for CountingEstimator<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }

    fn estimate(&self, anchor: &Image, moving: &Image) -> Result<FlowField> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.estimate(anchor, moving)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowalign::warp;
    use crate::tensor::Tensor;

    fn texture(h: usize, w: usize) -> Image {
        Tensor::from_fn(&[3, h, w], |i| {
            let p = i % (h * w);
            let (y, x) = ((p / w) as f32, (p % w) as f32);
            let c = (i / (h * w)) as f32;
            0.5 + 0.25 * (0.7 * x + 0.3 * c).sin() * (0.45 * y + 0.2 * x).cos() + 0.2 * (1.3 * y - 0.4 * x).sin()
        })
    }

    /// Content of `src` displaced by `(du, dv)`: out(p + d) = src(p).
    fn displaced(src: &Image, du: i64, dv: i64) -> Image {
        let (c, h, w) = src.chw();
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            let (y, x) = ((p / w) as i64 - dv, (p % w) as i64 - du);
            if y >= 0 && x >= 0 && y < h as i64 && x < w as i64 {
                src.at3(ch, y as usize, x as usize)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identical_images_give_zero() {
        let a = texture(24, 24);
        assert_eq!(brute_force_translation(&a, &a, 4).unwrap(), FlowField::zeros(24, 24));
        assert_eq!(block_match_flow(&a, &a, 8, 3).unwrap(), FlowField::zeros(24, 24));
    }

    #[test]
    fn recovers_translation() {
        let src = texture(40, 40);
        let moved = displaced(&src, 3, -2);
        let f = brute_force_translation(&src, &moved, 8).unwrap();
        assert_eq!((f.u(0, 0), f.v(0, 0)), (3.0, -2.0));
        // and the recovered flow really aligns `moved` back onto `src`
        let back = warp(&moved, &f).unwrap();
        for y in 2..36 {
            for x in 0..37 {
                assert_eq!(back.at3(0, y, x), src.at3(0, y, x));
            }
        }
    }

    #[test]
    fn tie_prefers_smaller_displacement() {
        // period-4 vertical stripes: shifts 1 and -3 both match exactly
        let src = Tensor::from_fn(&[1, 8, 16], |i| if (i % 16) % 4 < 2 { 1.0 } else { 0.0 });
        let moved = Tensor::from_fn(&[1, 8, 16], |i| if ((i % 16) + 1) % 4 < 2 { 1.0 } else { 0.0 });
        // moved(x) = src(x+1)... so warp(moved, u)(x) = moved(x+u) = src(x+u+1) ⇒ u ≡ -1 (mod 4)
        let f = brute_force_translation(&src, &moved, 3).unwrap();
        assert_eq!((f.u(0, 0), f.v(0, 0)), (-1.0, 0.0));
        // both -1 and 3 give zero cost; 3 loses on |u|
        assert_eq!(shifted_l1(&src, &moved, (3, 0), 0..8, 0..16), Some(0.0));
    }

    #[test]
    fn radius_and_block_errors() {
        let a = texture(8, 8);
        assert!(matches!(brute_force_translation(&a, &a, 8), Err(Error::Parameter(_))));
        assert!(matches!(block_match_flow(&a, &a, 16, 2), Err(Error::Parameter(_))));
        assert!(matches!(block_match_flow(&a, &a, 3, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn block_match_piecewise_translation() {
        let src = texture(32, 48);
        let left = displaced(&src, 2, 0);
        let right = displaced(&src, -2, 0);
        let moved = Tensor::from_fn(&[3, 32, 48], |i| {
            if (i % 48) < 24 {
                left.data()[i]
            } else {
                right.data()[i]
            }
        });
        let f = block_match_flow(&src, &moved, 8, 4).unwrap();
        for y in 0..32 {
            for x in (0..12).chain(36..48) {
                let truth = if x < 24 { 2.0 } else { -2.0 };
                assert!((f.u(y, x) - truth).abs() <= 1.0, "({y},{x}) {}", f.u(y, x));
                assert!(f.v(y, x).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn block_match_agrees_with_brute_force_on_translation() {
        let src = texture(32, 32);
        let moved = displaced(&src, -1, 2);
        let bf = brute_force_translation(&src, &moved, 4).unwrap();
        let bm = block_match_flow(&src, &moved, 8, 4).unwrap();
        assert_eq!(bf, bm);
    }
}
