//! Dihedral augmentation applied consistently to raw, images and flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flowalign::FlowField;
use crate::rawdata::{BayerPattern, Cfa, RawFrame, SyntheticPair};
use crate::tensor::{Real, Tensor};

/// Horizontal flip, then vertical flip, then a quarter turn, each optional.
/// The turn applies `[[0, −1], [1, 0]]` to pixel coordinates, so a
/// displacement `(u, v)` becomes `(−v, u)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dihedral {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

#[derive(Clone, Copy)]
enum Step {
    H,
    V,
    R,
}

impl Step {
    fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Step::R => (w, h),
            _ => (h, w),
        }
    }

    /// Source pixel of output pixel `(y, x)` for an `h×w` input.
    fn source(self, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
        match self {
            Step::H => (y, w - 1 - x),
            Step::V => (h - 1 - y, x),
            Step::R => (h - 1 - x, y),
        }
    }

    /// Image of a displacement vector `(u, v)`.
    fn vector(self, u: f32, v: f32) -> (f32, f32) {
        match self {
            Step::H => (-u, v),
            Step::V => (u, -v),
            Step::R => (-v, u),
        }
    }
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        hflip: false,
        vflip: false,
        rot90: false,
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        Dihedral {
            hflip: rng.random(),
            vflip: rng.random(),
            rot90: rng.random(),
        }
    }

    fn steps(self) -> impl Iterator<Item = Step> {
        [(self.hflip, Step::H), (self.vflip, Step::V), (self.rot90, Step::R)]
            .into_iter()
            .filter(|p| p.0)
            .map(|p| p.1)
    }

    pub fn apply_image<T: Real>(self, img: &Tensor<T>) -> Tensor<T> {
        self.steps().fold(img.clone(), |acc, s| step_planes(&acc, s))
    }

    pub fn apply_flow(self, flow: &FlowField) -> FlowField {
        self.steps().fold(flow.clone(), |acc, s| {
            let moved = step_planes(acc.tensor(), s);
            let (h, w) = (moved.dim(1), moved.dim(2));
            FlowField::from_fn(h, w, |y, x| s.vector(moved.at3(0, y, x), moved.at3(1, y, x)))
        })
    }

    pub fn apply_raw(self, raw: &RawFrame) -> RawFrame {
        self.steps().fold(raw.clone(), |acc, s| {
            let (h, w) = (acc.height, acc.width);
            let (oh, ow) = s.out_dims(h, w);
            let mosaic = (0..oh * ow)
                .map(|i| {
                    let (sy, sx) = s.source(h, w, i / ow, i % ow);
                    acc.at(sy, sx)
                })
                .collect();
            let cell: [Cfa; 4] = [0, 1, 2, 3].map(|k| {
                let (sy, sx) = s.source(h, w, k / 2, k % 2);
                acc.bayer_pattern.color_at(sy, sx)
            });
            RawFrame {
                mosaic,
                height: oh,
                width: ow,
                bayer_pattern: BayerPattern::from_cell(cell).expect("dihedral maps preserve the Bayer lattice"),
                black_level: acc.black_level,
                white_level: acc.white_level,
            }
        })
    }
}

fn step_planes<T: Real>(img: &Tensor<T>, s: Step) -> Tensor<T> {
    let (c, h, w) = img.chw();
    let (oh, ow) = s.out_dims(h, w);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let p = i % (oh * ow);
        let (sy, sx) = s.source(h, w, p / ow, p % ow);
        img.at3(ch, sy, sx)
    })
}

/// Apply a fixed transform to every member of the pair.
pub fn augment_with(pair: &SyntheticPair, t: Dihedral) -> SyntheticPair {
    SyntheticPair {
        raw: t.apply_raw(&pair.raw),
        target: t.apply_image(&pair.target),
        aligned_gt: t.apply_image(&pair.aligned_gt),
        true_flow: t.apply_flow(&pair.true_flow),
        gen_params: pair.gen_params.clone(),
    }
}

/// Random flips and rotation drawn from `seed`.
pub fn augment(pair: &SyntheticPair, seed: u64) -> (SyntheticPair, Dihedral) {
    let t = Dihedral::random(&mut ChaCha8Rng::seed_from_u64(seed));
    (augment_with(pair, t), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowalign::{valid_mask, warp};
    use crate::rawdata::{demosaic_simple, generate_dataset, pack_bayer, FlowKind, SynthConfig};

    fn pair(kind: FlowKind) -> SyntheticPair {
        let cfg = SynthConfig {
            n: 1,
            size: 16,
            flow: kind,
            margin: 4,
            ..Default::default()
        };
        let mut p = generate_dataset(&cfg).unwrap().remove(0);
        // non-square so the turn is visible in the shape
        p = p.crop(0, 2, 16, 12).unwrap();
        p
    }

    fn same(a: &SyntheticPair, b: &SyntheticPair) -> bool {
        a.raw == b.raw && a.target == b.target && a.aligned_gt == b.aligned_gt && a.true_flow == b.true_flow
    }

    #[test]
    fn identity_is_noop() {
        let p = pair(FlowKind::Translate);
        assert!(same(&augment_with(&p, Dihedral::IDENTITY), &p));
    }

    #[test]
    fn flips_are_involutions() {
        let p = pair(FlowKind::Smooth);
        for t in [
            Dihedral {
                hflip: true,
                ..Dihedral::IDENTITY
            },
            Dihedral {
                vflip: true,
                ..Dihedral::IDENTITY
            },
        ] {
            let twice = augment_with(&augment_with(&p, t), t);
            assert!(same(&twice, &p));
        }
        let r = Dihedral {
            rot90: true,
            ..Dihedral::IDENTITY
        };
        let four = (0..4).fold(p.clone(), |acc, _| augment_with(&acc, r));
        assert!(same(&four, &p));
    }

    #[test]
    fn rotation_maps_translation_vector() {
        let mut p = pair(FlowKind::Zero);
        p.true_flow = FlowField::constant(16, 12, 2.0, -1.0);
        p.target = warp(&p.aligned_gt, &p.true_flow).unwrap();
        let r = augment_with(
            &p,
            Dihedral {
                rot90: true,
                ..Dihedral::IDENTITY
            },
        );
        assert_eq!(r.target.shape(), &[3, 12, 16]);
        assert_eq!((r.true_flow.u(3, 3), r.true_flow.v(3, 3)), (1.0, 2.0));
        // warp oracle: the transformed flow still maps the transformed gt onto
        // the transformed target
        let m = valid_mask(&r.true_flow, 1e-3);
        let w = warp(&r.aligned_gt, &r.true_flow).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                if m.is_valid(y, x) {
                    for c in 0..3 {
                        assert_eq!(w.at3(c, y, x), r.target.at3(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn every_transform_keeps_pipeline_consistent() {
        let p = pair(FlowKind::Affine);
        for bits in 0..8u8 {
            let t = Dihedral {
                hflip: bits & 1 != 0,
                vflip: bits & 2 != 0,
                rot90: bits & 4 != 0,
            };
            let a = augment_with(&p, t);
            // raw and images move together: demosaicking commutes with the
            // transform once the pattern is re-derived
            let d0 = t.apply_image(&demosaic_simple(&p.raw).unwrap());
            let d1 = demosaic_simple(&a.raw).unwrap();
            assert!(d0.max_abs_diff(&d1) < 1e-6, "{t:?}");
            assert!(pack_bayer(&a.raw).is_ok());
            let m = valid_mask(&a.true_flow, 1e-3);
            let w = warp(&a.aligned_gt, &a.true_flow).unwrap();
            for y in 0..a.target.dim(1) {
                for x in 0..a.target.dim(2) {
                    if m.is_valid(y, x) {
                        assert!((w.at3(0, y, x) - a.target.at3(0, y, x)).abs() < 1e-5, "{t:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn pattern_rederived() {
        let p = pair(FlowKind::Zero);
        let h = augment_with(
            &p,
            Dihedral {
                hflip: true,
                ..Dihedral::IDENTITY
            },
        );
        assert_eq!(h.raw.bayer_pattern, BayerPattern::Grbg);
        let v = augment_with(
            &p,
            Dihedral {
                vflip: true,
                ..Dihedral::IDENTITY
            },
        );
        assert_eq!(v.raw.bayer_pattern, BayerPattern::Gbrg);
    }

    #[test]
    fn seeded_determinism() {
        let p = pair(FlowKind::Translate);
        for seed in 0..8 {
            let (a, ta) = augment(&p, seed);
            let (b, tb) = augment(&p, seed);
            assert_eq!(ta, tb);
            assert!(same(&a, &b));
        }
    }
}
