//! Position-sensitive score maps: per-ROI assembling and two-set fusion.
//!
//! A score-map set holds 2*k^2*(C+1) channels. Channel layout, outer to
//! inner: partition cell (row-major over the k x k grid), inside/outside
//! flag (0 = outside, 1 = inside), category (0 = background). Assembling
//! gathers, for every output pixel of a ROI, the value of the score-map
//! channel addressed by the partition cell that pixel falls in, sampled at
//! the nearest feature pixel inside the projected ROI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{upsample_x2, upsample_x2_backward};
use crate::roi::Roi;
use crate::tenfile::{load_tensor, save_tensor};
use crate::tensor::Tensor;

pub const SIDE_OUTSIDE: usize = 0;
pub const SIDE_INSIDE: usize = 1;

#[derive(Debug, Clone)]
pub struct ScoreMapSet {
    /// `[2*k^2*(C+1), Hf, Wf]`
    pub maps: Tensor,
    /// Partitions per axis.
    pub k: usize,
    /// Feature stride relative to the image (16 for set 1, 8 for set 2).
    pub stride: usize,
    /// Category count including background (C+1).
    pub num_categories: usize,
}

impl ScoreMapSet {
    pub fn new(maps: Tensor, k: usize, stride: usize, num_categories: usize) -> Result<ScoreMapSet> {
        let expect = 2 * k * k * num_categories;
        if maps.ndim() != 3 || maps.dim(0) != expect {
            return Err(Error::shape(
                "score_map_set",
                format!(
                    "maps shape {:?}, expected [{}, Hf, Wf] for k={} categories={}",
                    maps.shape(),
                    expect,
                    k,
                    num_categories
                ),
            ));
        }
        Ok(ScoreMapSet {
            maps,
            k,
            stride,
            num_categories,
        })
    }

    /// Channel index of (partition cell, side, category).
    #[inline]
    pub fn channel(&self, cell_y: usize, cell_x: usize, side: usize, cat: usize) -> usize {
        ((cell_y * self.k + cell_x) * 2 + side) * self.num_categories + cat
    }

    /// Serialize as `<base>.ten` plus a `<base>.json` sidecar.
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let base = base.as_ref();
        save_tensor(base.with_extension("ten"), &self.maps)?;
        let sidecar = Sidecar {
            k: self.k,
            stride: self.stride,
            num_categories: self.num_categories,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Config(format!("sidecar encode: {}", e)))?;
        std::fs::write(base.with_extension("json"), json)
            .map_err(|e| Error::io(format!("write {:?}", base.with_extension("json")), e))
    }

    pub fn load(base: impl AsRef<Path>) -> Result<ScoreMapSet> {
        let base = base.as_ref();
        let maps = load_tensor(base.with_extension("ten"))?;
        let sidecar_path = base.with_extension("json");
        let text = std::fs::read_to_string(&sidecar_path)
            .map_err(|e| Error::io(format!("read {:?}", sidecar_path), e))?;
        let sc: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::format(&sidecar_path, format!("sidecar decode: {}", e)))?;
        ScoreMapSet::new(maps, sc.k, sc.stride, sc.num_categories)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    k: usize,
    stride: usize,
    num_categories: usize,
}

/// Per-ROI inside/outside likelihood maps at a fixed resolution.
#[derive(Debug, Clone)]
pub struct RoiLikelihood {
    /// `[C+1, M, M]`
    pub inside: Tensor,
    /// `[C+1, M, M]`
    pub outside: Tensor,
    pub resolution: usize,
}

impl RoiLikelihood {
    pub fn zeros(num_categories: usize, resolution: usize) -> RoiLikelihood {
        RoiLikelihood {
            inside: Tensor::zeros(&[num_categories, resolution, resolution]),
            outside: Tensor::zeros(&[num_categories, resolution, resolution]),
            resolution,
        }
    }
}

/// Project an image-space box to feature coordinates (plain division, no
/// rounding; assembling samples the projected box continuously).
pub fn project_roi(roi: &Roi, stride: usize) -> (f64, f64, f64, f64) {
    let s = stride as f64;
    (
        roi.x0 as f64 / s,
        roi.y0 as f64 / s,
        roi.x1 as f64 / s,
        roi.y1 as f64 / s,
    )
}

/// One gathered element: output pixel (side, cat, r, c) reads `maps[src]`.
struct GatherPlan {
    /// Flat source index into `set.maps` for every output element, laid out
    /// as `[side][cat][r][c]` with side outer.
    src: Vec<usize>,
    num_categories: usize,
    out_res: usize,
}

fn gather_plan(set: &ScoreMapSet, roi: &Roi, out_res: usize) -> GatherPlan {
    let (fx0, fy0, fx1, fy1) = project_roi(roi, set.stride);
    let hf = set.maps.dim(1);
    let wf = set.maps.dim(2);
    let plane = hf * wf;
    let m = out_res;
    let k = set.k;
    let cats = set.num_categories;

    let mut src = Vec::with_capacity(2 * cats * m * m);
    for side in [SIDE_OUTSIDE, SIDE_INSIDE] {
        for cat in 0..cats {
            for r in 0..m {
                let cell_y = r * k / m;
                let fy = fy0 + (r as f64 + 0.5) / m as f64 * (fy1 - fy0);
                let iy = (fy.floor() as isize).clamp(0, hf as isize - 1) as usize;
                for c in 0..m {
                    let cell_x = c * k / m;
                    let fx = fx0 + (c as f64 + 0.5) / m as f64 * (fx1 - fx0);
                    let ix = (fx.floor() as isize).clamp(0, wf as isize - 1) as usize;
                    let ch = set.channel(cell_y, cell_x, side, cat);
                    src.push(ch * plane + iy * wf + ix);
                }
            }
        }
    }
    GatherPlan {
        src,
        num_categories: cats,
        out_res: m,
    }
}

/// Assemble the inside/outside likelihood maps for one ROI. A pure gather:
/// every output element is bitwise equal to some score-map element.
pub fn assemble(set: &ScoreMapSet, roi: &Roi, out_res: usize) -> Result<RoiLikelihood> {
    if out_res < set.k {
        return Err(Error::shape(
            "assemble",
            format!("output resolution {} below partition count {}", out_res, set.k),
        ));
    }
    let (fx0, fy0, fx1, fy1) = project_roi(roi, set.stride);
    if fx1 <= fx0 || fy1 <= fy0 {
        return Err(Error::shape(
            "assemble",
            format!("ROI degenerate after projection: ({fx0},{fy0},{fx1},{fy1})"),
        ));
    }
    let plan = gather_plan(set, roi, out_res);
    let maps = set.maps.data();
    let m = out_res;
    let cats = set.num_categories;
    let half = cats * m * m;
    let outside = Tensor::from_fn(&[cats, m, m], |i| maps[plan.src[i]]);
    let inside = Tensor::from_fn(&[cats, m, m], |i| maps[plan.src[half + i]]);
    Ok(RoiLikelihood {
        inside,
        outside,
        resolution: m,
    })
}

/// Scatter likelihood gradients back to the score maps. Each output element
/// came from exactly one source element, so the gradient goes to exactly
/// that element.
pub fn assemble_backward(
    set: &ScoreMapSet,
    roi: &Roi,
    grad_inside: &Tensor,
    grad_outside: &Tensor,
    grad_maps: &mut Tensor,
) {
    debug_assert_eq!(grad_maps.shape(), set.maps.shape());
    let m = grad_inside.dim(1);
    let plan = gather_plan(set, roi, m);
    let half = plan.num_categories * plan.out_res * plan.out_res;
    let dst = grad_maps.data_mut();
    for (i, &g) in grad_outside.data().iter().enumerate() {
        dst[plan.src[i]] += g;
    }
    for (i, &g) in grad_inside.data().iter().enumerate() {
        dst[plan.src[half + i]] += g;
    }
}

/// Sum the x2-upsampled coarse likelihood with the fine one.
pub fn fuse(coarse: &RoiLikelihood, fine: &RoiLikelihood) -> Result<RoiLikelihood> {
    if fine.resolution != 2 * coarse.resolution {
        return Err(Error::shape(
            "fuse",
            format!(
                "fine resolution {} != 2 x coarse resolution {}",
                fine.resolution, coarse.resolution
            ),
        ));
    }
    let inside = upsample_x2(&coarse.inside)?.add(&fine.inside)?;
    let outside = upsample_x2(&coarse.outside)?.add(&fine.outside)?;
    Ok(RoiLikelihood {
        inside,
        outside,
        resolution: fine.resolution,
    })
}

/// Gradient of `fuse`: the fine side passes through, the coarse side goes
/// back through the upsampling weights.
pub fn fuse_backward(
    coarse: &RoiLikelihood,
    grad_inside: &Tensor,
    grad_outside: &Tensor,
) -> (RoiLikelihood, RoiLikelihood) {
    let shape = coarse.inside.shape().to_vec();
    let grad_coarse = RoiLikelihood {
        inside: upsample_x2_backward(&shape, grad_inside),
        outside: upsample_x2_backward(&shape, grad_outside),
        resolution: coarse.resolution,
    };
    let grad_fine = RoiLikelihood {
        inside: grad_inside.clone(),
        outside: grad_outside.clone(),
        resolution: grad_inside.dim(1),
    };
    (grad_coarse, grad_fine)
}

/// x2-upsample a likelihood without a fine set (single score-map variants).
pub fn upsample_likelihood(coarse: &RoiLikelihood) -> Result<RoiLikelihood> {
    Ok(RoiLikelihood {
        inside: upsample_x2(&coarse.inside)?,
        outside: upsample_x2(&coarse.outside)?,
        resolution: 2 * coarse.resolution,
    })
}

pub fn upsample_likelihood_backward(
    coarse: &RoiLikelihood,
    grad_inside: &Tensor,
    grad_outside: &Tensor,
) -> RoiLikelihood {
    let shape = coarse.inside.shape().to_vec();
    RoiLikelihood {
        inside: upsample_x2_backward(&shape, grad_inside),
        outside: upsample_x2_backward(&shape, grad_outside),
        resolution: coarse.resolution,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, k: usize, cats: usize, hf: usize, wf: usize) -> ScoreMapSet {
        let maps = Tensor::from_fn(&[2 * k * k * cats, hf, wf], |_| rng.random_range(-2.0..2.0));
        ScoreMapSet::new(maps, k, 16, cats).unwrap()
    }

    #[test]
    fn project_divides_exactly() {
        let r = Roi::new(0.0, 0.0, 160.0, 160.0);
        assert_eq!(project_roi(&r, 16), (0.0, 0.0, 10.0, 10.0));
        let r = Roi::new(8.0, 8.0, 24.0, 24.0);
        assert_eq!(project_roi(&r, 8), (1.0, 1.0, 3.0, 3.0));
    }

    #[test]
    fn projected_area_ratio_is_quarter() {
        let r = Roi::new(3.0, 5.0, 50.0, 41.0);
        let (ax0, ay0, ax1, ay1) = project_roi(&r, 16);
        let (bx0, by0, bx1, by1) = project_roi(&r, 8);
        let a16 = (ax1 - ax0) * (ay1 - ay0);
        let a8 = (bx1 - bx0) * (by1 - by0);
        assert!((a16 / a8 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn assemble_aligned_two_by_two() {
        // ROI covering exactly a 2x2 feature region at stride 16.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng, 2, 1, 4, 4);
        let roi = Roi::new(0.0, 0.0, 32.0, 32.0);
        let lik = assemble(&set, &roi, 2).unwrap();
        // Output (0,0) reads the top-left partition channel at feature (0,0);
        // output (1,1) reads the bottom-right channel at (1,1).
        let tl_in = set.channel(0, 0, SIDE_INSIDE, 0);
        let br_in = set.channel(1, 1, SIDE_INSIDE, 0);
        assert_eq!(lik.inside.at3(0, 0, 0), set.maps.at3(tl_in, 0, 0));
        assert_eq!(lik.inside.at3(0, 1, 1), set.maps.at3(br_in, 1, 1));
        let tl_out = set.channel(0, 0, SIDE_OUTSIDE, 0);
        assert_eq!(lik.outside.at3(0, 0, 0), set.maps.at3(tl_out, 0, 0));
    }

    #[test]
    fn assemble_k1_is_crop_resize() {
        // k = 1: one partition, so assembling is a nearest-neighbor
        // crop-and-resize of the single inside/outside pair.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_set(&mut rng, 1, 2, 6, 6);
        let roi = Roi::new(16.0, 16.0, 80.0, 80.0); // features 1..5, size 4
        let m = 4;
        let lik = assemble(&set, &roi, m).unwrap();
        for cat in 0..2 {
            let ch = set.channel(0, 0, SIDE_INSIDE, cat);
            for r in 0..m {
                for c in 0..m {
                    // Nearest-neighbor crop: the sample point of pixel (r,c)
                    // falls in feature pixel (1+r, 1+c).
                    assert_eq!(lik.inside.at3(cat, r, c), set.maps.at3(ch, 1 + r, 1 + c));
                }
            }
        }
    }

    #[test]
    fn assemble_rejects_small_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(&mut rng, 3, 1, 4, 4);
        let roi = Roi::new(0.0, 0.0, 64.0, 64.0);
        assert!(assemble(&set, &roi, 2).is_err());
    }

    #[test]
    fn gradient_scatter_preserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = random_set(&mut rng, 3, 2, 5, 5);
        let roi = Roi::new(4.0, 10.0, 70.0, 66.0);
        let m = 9;
        let gi = Tensor::from_fn(&[2, m, m], |_| rng.random_range(-1.0..1.0));
        let go = Tensor::from_fn(&[2, m, m], |_| rng.random_range(-1.0..1.0));
        let mut grad = Tensor::zeros(set.maps.shape());
        assemble_backward(&set, &roi, &gi, &go, &mut grad);
        // Every upstream element lands on exactly one source, so the sums of
        // scattered gradient equal the sums of upstream gradient.
        let upstream: f64 = gi.sum() + go.sum();
        assert!((grad.sum() - upstream).abs() < 1e-4);
    }

    #[test]
    fn category_permutation_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cats = 3;
        let k = 2;
        let set = random_set(&mut rng, k, cats, 5, 5);
        let perm = [2usize, 0, 1];

        // Permute categories inside every (cell, side) block.
        let mut permuted = set.clone();
        let plane = 25;
        for cell in 0..k * k {
            for side in 0..2 {
                for cat in 0..cats {
                    let src_ch = (cell * 2 + side) * cats + cat;
                    let dst_ch = (cell * 2 + side) * cats + perm[cat];
                    for p in 0..plane {
                        permuted.maps.data_mut()[dst_ch * plane + p] =
                            set.maps.data()[src_ch * plane + p];
                    }
                }
            }
        }

        let roi = Roi::new(8.0, 8.0, 72.0, 60.0);
        let a = assemble(&set, &roi, 6).unwrap();
        let b = assemble(&permuted, &roi, 6).unwrap();
        for cat in 0..cats {
            for r in 0..6 {
                for c in 0..6 {
                    assert_eq!(a.inside.at3(cat, r, c), b.inside.at3(perm[cat], r, c));
                    assert_eq!(a.outside.at3(cat, r, c), b.outside.at3(perm[cat], r, c));
                }
            }
        }
    }

    #[test]
    fn fuse_with_zero_fine_is_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coarse = RoiLikelihood {
            inside: Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-1.0..1.0)),
            outside: Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-1.0..1.0)),
            resolution: 3,
        };
        let fine = RoiLikelihood::zeros(2, 6);
        let fused = fuse(&coarse, &fine).unwrap();
        let up = upsample_likelihood(&coarse).unwrap();
        assert_eq!(fused.inside, up.inside);
        assert_eq!(fused.outside, up.outside);
    }

    #[test]
    fn fuse_with_zero_coarse_is_fine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coarse = RoiLikelihood::zeros(2, 3);
        let fine = RoiLikelihood {
            inside: Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(-1.0..1.0)),
            outside: Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(-1.0..1.0)),
            resolution: 6,
        };
        let fused = fuse(&coarse, &fine).unwrap();
        assert_eq!(fused.inside, fine.inside);
        assert_eq!(fused.outside, fine.outside);
    }

    #[test]
    fn fuse_rejects_resolution_mismatch() {
        let coarse = RoiLikelihood::zeros(2, 3);
        let fine = RoiLikelihood::zeros(2, 7);
        assert!(fuse(&coarse, &fine).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = random_set(&mut rng, 2, 3, 4, 4);
        let base = dir.path().join("set1");
        set.save(&base).unwrap();
        let back = ScoreMapSet::load(&base).unwrap();
        assert_eq!(back.k, 2);
        assert_eq!(back.stride, 16);
        assert_eq!(back.num_categories, 3);
        assert_eq!(back.maps, set.maps);
    }
}
