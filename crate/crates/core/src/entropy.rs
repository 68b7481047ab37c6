//! Per-patch entropy estimation and the entropy-ranked routing partition.
//!
//! A grayscale patch is quantized to 32 uniform levels; a Gaussian KDE with
//! Silverman's bandwidth is evaluated at the 32 level centers, normalized,
//! and reduced to a discrete Shannon entropy in nats. Entropy math always
//! runs in f64 regardless of the tensor scalar type.

use crate::error::{Error, Result};
use crate::tensor::{unfold, Scalar, Tensor};

/// Number of uniform quantization levels.
pub const LEVELS: usize = 32;

/// Routing fractions over entropy rank: (high, mid, low).
pub const FRACTIONS: (f64, f64, f64) = (0.2, 0.4, 0.4);

const QUANTIZE_SLACK: f64 = 1e-6;

/// Center of quantization level `k` in value space.
pub fn level_center(k: usize) -> f64 {
    (k as f64 + 0.5) / LEVELS as f64
}

/// BT.601 luma: y = 0.299 R + 0.587 G + 0.114 B, per pixel.
pub fn to_grayscale<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!(
            "grayscale conversion expects 3 channels, got {c}"
        )));
    }
    let (wr, wg, wb) = (S::from_f64(0.299), S::from_f64(0.587), S::from_f64(0.114));
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    let src = image.as_slice();
    let dst = out.as_mut_slice();
    for b in 0..n {
        let base = b * 3 * plane;
        for i in 0..plane {
            dst[b * plane + i] =
                wr * src[base + i] + wg * src[base + plane + i] + wb * src[base + 2 * plane + i];
        }
    }
    Ok(out)
}

/// Maps a value in [0, 1] to its quantization level: min(floor(v*32), 31).
/// Values outside [0, 1] by more than a 1e-6 slack are rejected; within the
/// slack they clamp.
pub fn quantize_value(v: f64) -> Result<usize> {
    if !v.is_finite() || v < -QUANTIZE_SLACK || v > 1.0 + QUANTIZE_SLACK {
        return Err(Error::invalid(format!(
            "value {v} outside [0,1] quantization range"
        )));
    }
    let v = v.clamp(0.0, 1.0);
    Ok(((v * LEVELS as f64).floor() as usize).min(LEVELS - 1))
}

/// Quantizes a slice of grayscale values to level indices.
pub fn quantize(values: &[f64]) -> Result<Vec<usize>> {
    values.iter().map(|&v| quantize_value(v)).collect()
}

fn level_counts(values: &[f64]) -> Result<[usize; LEVELS]> {
    let mut counts = [0usize; LEVELS];
    for &v in values {
        counts[quantize_value(v)?] += 1;
    }
    Ok(counts)
}

/// KDE-based entropy (nats) of a patch given as raw grayscale values.
///
/// Bandwidth is Silverman's rule h = 1.06 * sigma * m^(-1/5) with sigma the
/// population standard deviation of the quantized level centers; a
/// zero-variance patch short-circuits to exactly 0. The Gaussian sum is
/// grouped by level count, which matches the direct per-sample sum up to
/// last-ulp association differences.
pub fn patch_entropy_values(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("entropy of an empty patch is undefined"));
    }
    let counts = level_counts(values)?;
    let m = values.len() as f64;

    let mut mean = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        mean += c as f64 * level_center(k);
    }
    mean /= m;
    let mut var = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        let d = level_center(k) - mean;
        var += c as f64 * d * d;
    }
    var /= m;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let bandwidth = 1.06 * sigma * m.powf(-0.2);

    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut density = [0.0f64; LEVELS];
    for (x, d) in density.iter_mut().enumerate() {
        let cx = level_center(x);
        let mut sum = 0.0;
        for (l, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let t = (cx - level_center(l)) / bandwidth;
            sum += c as f64 * norm * (-0.5 * t * t).exp();
        }
        *d = sum / (m * bandwidth);
    }

    let total: f64 = density.iter().sum();
    let mut entropy = 0.0;
    for &d in density.iter() {
        let p = d / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy)
}

/// Entropy of a patch tensor; depends only on the multiset of values.
pub fn patch_entropy<S: Scalar>(patch: &Tensor<S>) -> Result<f64> {
    patch_entropy_values(&patch.to_f64_vec())
}

/// Per-patch entropies over the patch grid of one image.
#[derive(Clone, Debug)]
pub struct EntropyMap {
    pub values: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n: usize,
}

impl EntropyMap {
    pub fn num_patches(&self) -> usize {
        self.values.len()
    }

    /// (row, col) of a patch index on the grid.
    pub fn grid_pos(&self, patch: usize) -> (usize, usize) {
        (patch / self.grid_w, patch % self.grid_w)
    }

    /// Entropies linearly rescaled to 0..=255 (0 stays black; all-zero maps
    /// stay all black).
    pub fn heatmap_levels(&self) -> Vec<u8> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return vec![0; self.values.len()];
        }
        self.values
            .iter()
            .map(|&v| ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Entropy map of a grayscale image (`N x 1 x H x W`, batch 1).
pub fn entropy_map_from_gray<S: Scalar>(gray: &Tensor<S>, n: usize) -> Result<EntropyMap> {
    let (batch, _, h, w) = gray.dims4()?;
    if batch != 1 {
        return Err(Error::shape("entropy map expects batch size 1"));
    }
    let patches = unfold(gray, n)?;
    let p = patches.shape()[1];
    let mut values = Vec::with_capacity(p);
    let data = patches.as_slice();
    let mut buf = vec![0.0f64; n * n];
    for pid in 0..p {
        for (dst, src) in buf.iter_mut().zip(&data[pid * n * n..(pid + 1) * n * n]) {
            *dst = src.as_f64();
        }
        values.push(patch_entropy_values(&buf)?);
    }
    Ok(EntropyMap {
        values,
        grid_h: h / n,
        grid_w: w / n,
        n,
    })
}

/// Grayscale conversion followed by per-patch entropy, patches in unfold
/// (row-major grid) order.
pub fn compute_entropy_map<S: Scalar>(image: &Tensor<S>, n: usize) -> Result<EntropyMap> {
    let gray = to_grayscale(image)?;
    entropy_map_from_gray(&gray, n)
}

/// Disjoint, exhaustive split of patch indices by entropy rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingPlan {
    pub group_high: Vec<usize>,
    pub group_mid: Vec<usize>,
    pub group_low: Vec<usize>,
}

impl RoutingPlan {
    pub fn fractions(&self) -> (f64, f64, f64) {
        FRACTIONS
    }

    pub fn num_patches(&self) -> usize {
        self.group_high.len() + self.group_mid.len() + self.group_low.len()
    }

    /// Group (0 = high, 1 = mid, 2 = low) of every patch index.
    pub fn group_of(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.num_patches()];
        for &i in &self.group_mid {
            out[i] = 1;
        }
        for &i in &self.group_low {
            out[i] = 2;
        }
        out
    }
}

/// Exact group sizes for `p` patches under the 20/40/40 floor rule:
/// floor(0.2 p), floor(0.4 p), remainder.
pub fn group_sizes(p: usize) -> (usize, usize, usize) {
    let high = p / 5;
    let mid = (2 * p) / 5;
    (high, mid, p - high - mid)
}

/// Ranks patches by (entropy descending, index ascending) and cuts the
/// ranking at the 20/40/40 floor-rule sizes. Each group keeps its members in
/// ascending patch-index order.
pub fn partition_patches(map: &EntropyMap) -> Result<RoutingPlan> {
    let p = map.values.len();
    if p == 0 {
        return Err(Error::invalid("cannot partition an empty entropy map"));
    }
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("entropy map".into()));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        map.values[b]
            .partial_cmp(&map.values[a])
            .expect("finite entropies")
            .then(a.cmp(&b))
    });
    let (n_high, n_mid, _) = group_sizes(p);
    let mut high: Vec<usize> = order[..n_high].to_vec();
    let mut mid: Vec<usize> = order[n_high..n_high + n_mid].to_vec();
    let mut low: Vec<usize> = order[n_high + n_mid..].to_vec();
    high.sort_unstable();
    mid.sort_unstable();
    low.sort_unstable();
    Ok(RoutingPlan {
        group_high: high,
        group_mid: mid,
        group_low: low,
    })
}

/// Mirror-pads an `N x C x H x W` image so both spatial extents become
/// multiples of `n`. Border pixels are included in the mirror (symmetric
/// reflection), so no artificial flat regions are introduced.
pub fn reflect_pad_to_multiple<S: Scalar>(image: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let (batch, c, h, w) = image.dims4()?;
    if n == 0 {
        return Err(Error::invalid("patch size must be >= 1"));
    }
    let target_h = h.div_ceil(n) * n;
    let target_w = w.div_ceil(n) * n;
    if target_h == h && target_w == w {
        return Ok(image.clone());
    }
    let mirror = |i: usize, len: usize| -> usize {
        if i < len {
            i
        } else {
            let over = i - len;
            len - 1 - (over % len)
        }
    };
    let mut out = Tensor::zeros(&[batch, c, target_h, target_w]);
    for b in 0..batch {
        for ch in 0..c {
            for y in 0..target_h {
                let sy = mirror(y, h);
                for x in 0..target_w {
                    let sx = mirror(x, w);
                    let v = image.get4(b, ch, sy, sx);
                    out.set4(b, ch, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grayscale_coefficients() {
        let white = Tensor::<f64>::full(&[1, 3, 1, 1], 1.0);
        let y = to_grayscale(&white).unwrap();
        assert_relative_eq!(y.as_slice()[0], 1.0, epsilon = 1e-12);

        let red = Tensor::<f64>::from_f64s(&[1, 3, 1, 1], &[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(to_grayscale(&red).unwrap().as_slice()[0], 0.299, epsilon = 1e-12);

        let black = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(to_grayscale(&black).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_rejects_wrong_channel_count() {
        let img = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        assert!(to_grayscale(&img).is_err());
    }

    #[test]
    fn quantize_boundaries() {
        assert_eq!(quantize_value(0.0).unwrap(), 0);
        assert_eq!(quantize_value(1.0).unwrap(), 31);
        assert_eq!(quantize_value(0.5).unwrap(), 16);
        // slack clamps, beyond slack errors
        assert_eq!(quantize_value(-5e-7).unwrap(), 0);
        assert_eq!(quantize_value(1.0 + 5e-7).unwrap(), 31);
        assert!(quantize_value(-0.01).is_err());
        assert!(quantize_value(1.01).is_err());
    }

    #[test]
    fn constant_patch_has_zero_entropy() {
        let vals = vec![0.37; 64];
        assert_eq!(patch_entropy_values(&vals).unwrap(), 0.0);
    }

    #[test]
    fn uniform_levels_patch_is_near_max_entropy() {
        // 32x32 patch holding each of the 32 levels equally often
        let mut vals = Vec::with_capacity(1024);
        for k in 0..LEVELS {
            for _ in 0..32 {
                vals.push(level_center(k));
            }
        }
        let h = patch_entropy_values(&vals).unwrap();
        assert!(h >= 0.9 * (LEVELS as f64).ln(), "entropy {h}");
        assert!(h <= (LEVELS as f64).ln() + 0.1);
    }

    #[test]
    fn balanced_two_level_patch_beats_skewed_one() {
        let mut balanced = vec![0.0; 512];
        balanced.extend(vec![1.0; 512]);
        let mut skewed = vec![0.0; 1014];
        skewed.extend(vec![1.0; 10]);
        let hb = patch_entropy_values(&balanced).unwrap();
        let hs = patch_entropy_values(&skewed).unwrap();
        assert!(hb > hs, "balanced {hb} vs skewed {hs}");
    }

    #[test]
    fn entropy_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut vals: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let h1 = patch_entropy_values(&vals).unwrap();
        vals.reverse();
        vals.swap(3, 97);
        let h2 = patch_entropy_values(&vals).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn noise_spanning_more_levels_increases_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flat = vec![0.5; 1024];
        let narrow: Vec<f64> = (0..1024).map(|_| 0.5 + rng.gen_range(-0.05..0.05)).collect();
        let wide: Vec<f64> = (0..1024).map(|_| 0.5 + rng.gen_range(-0.4..0.4)).collect();
        let h0 = patch_entropy_values(&flat).unwrap();
        let h1 = patch_entropy_values(&narrow).unwrap();
        let h2 = patch_entropy_values(&wide).unwrap();
        assert_eq!(h0, 0.0);
        assert!(h1 > h0);
        assert!(h2 > h1);
    }

    #[test]
    fn map_of_uniform_image_is_all_zero() {
        let img = Tensor::<f32>::full(&[1, 3, 64, 64], 0.25);
        let map = compute_entropy_map(&img, 32).unwrap();
        assert_eq!(map.num_patches(), 4);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn textured_quadrant_dominates_flat_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut img = Tensor::<f32>::full(&[1, 3, 64, 64], 0.4);
        // top-left 32x32 quadrant gets wide noise on all channels
        for y in 0..32 {
            for x in 0..32 {
                let v = 0.4 + rng.gen_range(-0.35..0.35);
                for c in 0..3 {
                    img.set4(0, c, y, x, v as f32);
                }
            }
        }
        let map = compute_entropy_map(&img, 32).unwrap();
        assert!(map.values[0] > map.values[1]);
        assert!(map.values[0] > map.values[2]);
        assert!(map.values[0] > map.values[3]);
        assert!(map.values[1] < 0.1 && map.values[2] < 0.1 && map.values[3] < 0.1);
    }

    #[test]
    fn map_shape_512x1024() {
        let img = Tensor::<f32>::zeros(&[1, 3, 512, 1024]);
        let map = compute_entropy_map(&img, 32).unwrap();
        assert_eq!(map.num_patches(), 512);
        assert_eq!((map.grid_h, map.grid_w), (16, 32));
    }

    #[test]
    fn map_rejects_non_divisible() {
        let img = Tensor::<f32>::zeros(&[1, 3, 60, 64]);
        assert!(compute_entropy_map(&img, 32).is_err());
    }

    #[test]
    fn partition_sizes_follow_floor_rule() {
        assert_eq!(group_sizes(100), (20, 40, 40));
        assert_eq!(group_sizes(64), (12, 25, 27));
        assert_eq!(group_sizes(1), (0, 0, 1));
        assert_eq!(group_sizes(5), (1, 2, 2));
    }

    #[test]
    fn partition_orders_by_entropy_then_index() {
        let map = EntropyMap {
            values: vec![0.1, 0.9, 0.5, 0.9, 0.2],
            grid_h: 1,
            grid_w: 5,
            n: 2,
        };
        let plan = partition_patches(&map).unwrap();
        // sizes 1/2/2; rank order is 1, 3, 2, 4, 0
        assert_eq!(plan.group_high, vec![1]);
        assert_eq!(plan.group_mid, vec![2, 3]);
        assert_eq!(plan.group_low, vec![0, 4]);
    }

    #[test]
    fn partition_ties_break_by_ascending_index() {
        let map = EntropyMap {
            values: vec![0.5; 10],
            grid_h: 2,
            grid_w: 5,
            n: 2,
        };
        let plan = partition_patches(&map).unwrap();
        assert_eq!(plan.group_high, vec![0, 1]);
        assert_eq!(plan.group_mid, vec![2, 3, 4, 5]);
        assert_eq!(plan.group_low, vec![6, 7, 8, 9]);
    }

    #[test]
    fn partition_properties_across_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [1usize, 2, 3, 4, 5, 7, 64, 100, 333, 1000] {
            let values: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..3.4)).collect();
            let map = EntropyMap {
                values: values.clone(),
                grid_h: 1,
                grid_w: p,
                n: 1,
            };
            let plan = partition_patches(&map).unwrap();
            let (h, m, l) = group_sizes(p);
            assert_eq!(plan.group_high.len(), h);
            assert_eq!(plan.group_mid.len(), m);
            assert_eq!(plan.group_low.len(), l);
            let mut all: Vec<usize> = plan
                .group_high
                .iter()
                .chain(&plan.group_mid)
                .chain(&plan.group_low)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..p).collect::<Vec<_>>());
            let min_high = plan.group_high.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
            let max_mid = plan.group_mid.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
            let min_mid = plan.group_mid.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
            let max_low = plan.group_low.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
            if !plan.group_high.is_empty() && !plan.group_mid.is_empty() {
                assert!(min_high >= max_mid);
            }
            if !plan.group_mid.is_empty() && !plan.group_low.is_empty() {
                assert!(min_mid >= max_low);
            }
        }
    }

    #[test]
    fn reflect_pad_reaches_next_multiple_and_mirrors() {
        let img = Tensor::<f64>::from_f64s(
            &[1, 1, 2, 3],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let padded = reflect_pad_to_multiple(&img, 4).unwrap();
        assert_eq!(padded.shape(), &[1, 1, 4, 4]);
        // column 3 mirrors column 2, row 2 mirrors row 1
        assert_eq!(padded.get4(0, 0, 0, 3), 3.0);
        assert_eq!(padded.get4(0, 0, 2, 0), 4.0);
        assert_eq!(padded.get4(0, 0, 3, 0), 1.0);
    }

    #[test]
    fn heatmap_levels_rescale() {
        let map = EntropyMap {
            values: vec![0.0, 1.0, 2.0],
            grid_h: 1,
            grid_w: 3,
            n: 1,
        };
        assert_eq!(map.heatmap_levels(), vec![0, 128, 255]);
        let flat = EntropyMap {
            values: vec![0.0; 3],
            grid_h: 1,
            grid_w: 3,
            n: 1,
        };
        assert_eq!(flat.heatmap_levels(), vec![0, 0, 0]);
    }
}
