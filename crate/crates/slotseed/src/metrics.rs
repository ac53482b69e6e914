//! Segmentation and reconstruction quality metrics, plus the permutation
//! probe used by the symmetry test suite.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adjusted Rand index restricted to ground-truth foreground pixels
/// (gt label 0 is background).
///
/// Degenerate conventions: an empty foreground scores 1.0 with
/// `degenerate = true`; when the adjustment denominator vanishes (both
/// partitions trivial) the score is 1.0.
pub fn foreground_ari(pred: &[usize], gt: &[usize]) -> Result<AriScore> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            op: "foreground_ari",
            lhs: format!("{} pred labels", pred.len()),
            rhs: format!("{} gt labels", gt.len()),
        });
    }
    let pairs: Vec<(usize, usize)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g != 0)
        .map(|(p, g)| (*p, *g))
        .collect();
    if pairs.is_empty() {
        return Ok(AriScore {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(AriScore {
        value: adjusted_rand_index(&pairs),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AriScore {
    pub value: f64,
    /// Set when the scene had no foreground at all.
    pub degenerate: bool,
}

/// Contingency-table ARI over (pred, gt) label pairs.
fn adjusted_rand_index(pairs: &[(usize, usize)]) -> f64 {
    use std::collections::HashMap;
    let n = pairs.len() as f64;
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for &(p, g) in pairs {
        *cells.entry((p, g)).or_insert(0.0) += 1.0;
        *rows.entry(p).or_insert(0.0) += 1.0;
        *cols.entry(g).or_insert(0.0) += 1.0;
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_cells: f64 = cells.values().map(|c| choose2(*c)).sum();
    let sum_rows: f64 = rows.values().map(|c| choose2(*c)).sum();
    let sum_cols: f64 = cols.values().map(|c| choose2(*c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_rows * sum_cols / total;
    let max = 0.5 * (sum_rows + sum_cols);
    let denom = max - expected;
    if denom == 0.0 {
        return 1.0;
    }
    (sum_cells - expected) / denom
}

/// Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op: "psnr",
            lhs: format!("{:?}", a.dims()),
            rhs: format!("{:?}", b.dims()),
        });
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over non-overlapping 8x8 windows of the channel-mean
/// grayscale images. Inputs are H x W x C (or H x W) in [0, 1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op: "ssim",
            lhs: format!("{:?}", a.dims()),
            rhs: format!("{:?}", b.dims()),
        });
    }
    let (h, w) = match a.dims() {
        [h, w] => (*h, *w),
        [h, w, _] => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "ssim",
                lhs: format!("{other:?}"),
                rhs: "H x W or H x W x C image required".into(),
            })
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            op: "ssim",
            lhs: format!("{h} x {w}"),
            rhs: format!("at least one {SSIM_WINDOW} x {SSIM_WINDOW} window required"),
        });
    }
    let ga = grayscale(a, h, w);
    let gb = grayscale(b, h, w);
    let mut total = 0.0;
    let mut windows = 0.0;
    let count = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    for wy in 0..h / SSIM_WINDOW {
        for wx in 0..w / SSIM_WINDOW {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let idx = (wy * SSIM_WINDOW + dy) * w + wx * SSIM_WINDOW + dx;
                    let x = ga[idx];
                    let y = gb[idx];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let mx = sx / count;
            let my = sy / count;
            let vx = sxx / count - mx * mx;
            let vy = syy / count - my * my;
            let cov = sxy / count - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            windows += 1.0;
        }
    }
    Ok(total / windows)
}

fn grayscale(t: &Tensor, h: usize, w: usize) -> Vec<f64> {
    match t.dims() {
        [_, _] => t.data().to_vec(),
        [_, _, c] => {
            let c = *c;
            (0..h * w)
                .map(|p| t.data()[p * c..(p + 1) * c].iter().sum::<f64>() / c as f64)
                .collect()
        }
        _ => unreachable!("checked by caller"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetryMode {
    Invariance,
    Equivariance,
}

/// Max relative deviation of `f` from permutation symmetry over sampled
/// row permutations of `centers` (all M! of them when M <= 5).
///
/// Invariance compares f(perm(c)) with f(c); equivariance compares
/// f(perm(c)) with perm(f(c)) and requires the output row count to match
/// the input's.
pub fn permutation_deviation<F>(
    f: F,
    centers: &Tensor,
    mode: SymmetryMode,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if trials == 0 {
        return Err(Error::Config("permutation_deviation needs trials >= 1".into()));
    }
    let m = centers.rows();
    let base = f(centers)?;
    if mode == SymmetryMode::Equivariance && base.rows() != m {
        return Err(Error::Shape {
            op: "permutation_deviation",
            lhs: format!("{m} input rows"),
            rhs: format!("{} output rows (equivariance needs equal counts)", base.rows()),
        });
    }
    let scale = 1.0 + base.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    let perms: Vec<Vec<usize>> = if m <= 5 {
        all_permutations(m)
    } else {
        (0..trials)
            .map(|_| {
                let mut p: Vec<usize> = (0..m).collect();
                p.shuffle(rng);
                p
            })
            .collect()
    };
    let d = centers.cols();
    let mut worst: f64 = 0.0;
    for perm in &perms {
        let mut permuted = Vec::with_capacity(centers.len());
        for &p in perm {
            permuted.extend_from_slice(centers.row(p));
        }
        let permuted = Tensor::new(vec![m, d], permuted)?;
        let got = f(&permuted)?;
        let reference: Vec<f64> = match mode {
            SymmetryMode::Invariance => base.data().to_vec(),
            SymmetryMode::Equivariance => {
                let cols = base.cols();
                let mut r = Vec::with_capacity(base.len());
                for &p in perm {
                    r.extend_from_slice(&base.data()[p * cols..(p + 1) * cols]);
                }
                r
            }
        };
        if got.len() != reference.len() {
            return Err(Error::Shape {
                op: "permutation_deviation",
                lhs: format!("{} outputs", reference.len()),
                rhs: format!("{} outputs after permutation", got.len()),
            });
        }
        let dev = got
            .data()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(dev);
    }
    Ok(worst)
}

fn all_permutations(m: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..m).collect();
    let mut out = Vec::new();
    heap_permute(&mut items, m, &mut out);
    out
}

fn heap_permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, out);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

// ── Evaluation reports ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: usize,
    pub fg_ari: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub discovered_k: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneScore>,
    pub aggregate: AggregateScore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateScore {
    pub fg_ari: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mean_discovered_k: f64,
    pub iterations: usize,
}

impl EvalReport {
    pub fn from_scenes(scenes: Vec<SceneScore>, iterations: usize) -> Self {
        let n = scenes.len().max(1) as f64;
        let aggregate = AggregateScore {
            fg_ari: scenes.iter().map(|s| s.fg_ari).sum::<f64>() / n,
            psnr_db: scenes.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            ssim: scenes.iter().map(|s| s.ssim).sum::<f64>() / n,
            mean_discovered_k: scenes.iter().map(|s| s.discovered_k as f64).sum::<f64>() / n,
            iterations,
        };
        EvalReport { scenes, aggregate }
    }

    /// One row per scene plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,fg_ari,psnr_db,ssim,discovered_k,iterations\n");
        for s in &self.scenes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.scene, s.fg_ari, s.psnr_db, s.ssim, s.discovered_k, s.iterations
            ));
        }
        out.push_str(&format!(
            "aggregate,{},{},{},{},{}\n",
            self.aggregate.fg_ari,
            self.aggregate.psnr_db,
            self.aggregate.ssim,
            self.aggregate.mean_discovered_k,
            self.aggregate.iterations
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Pair-counting ARI oracle: 2(ad - bc) / ((a+b)(b+d) + (a+c)(c+d)).
    fn ari_pair_oracle(pred: &[usize], gt: &[usize]) -> f64 {
        let n = pred.len();
        let (mut a, mut b, mut c, mut d) = (0.0f64, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let same_p = pred[i] == pred[j];
                let same_g = gt[i] == gt[j];
                match (same_p, same_g) {
                    (true, true) => a += 1.0,
                    (true, false) => b += 1.0,
                    (false, true) => c += 1.0,
                    (false, false) => d += 1.0,
                }
            }
        }
        let denom = (a + b) * (b + d) + (a + c) * (c + d);
        if denom == 0.0 {
            return 1.0;
        }
        2.0 * (a * d - b * c) / denom
    }

    /// All set partitions of n items as restricted-growth label vectors.
    fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut labels = vec![0usize; n];
        fn rec(labels: &mut Vec<usize>, pos: usize, max_used: usize, out: &mut Vec<Vec<usize>>) {
            if pos == labels.len() {
                out.push(labels.clone());
                return;
            }
            for l in 0..=max_used + 1 {
                labels[pos] = l;
                rec(labels, pos + 1, max_used.max(l), out);
            }
        }
        if n == 0 {
            return vec![vec![]];
        }
        labels[0] = 0;
        rec(&mut labels, 1, 0, &mut out);
        if out.is_empty() {
            out.push(labels);
        }
        out
    }

    #[test]
    fn fg_ari_identical_partitions() {
        let gt = vec![0, 1, 1, 2, 2, 0];
        let pred = vec![9, 4, 4, 7, 7, 9];
        let s = foreground_ari(&pred, &gt).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(!s.degenerate);
    }

    #[test]
    fn fg_ari_constant_prediction_scores_zero() {
        let gt = vec![0, 1, 1, 2, 2];
        let pred = vec![3, 3, 3, 3, 3];
        let s = foreground_ari(&pred, &gt).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn fg_ari_empty_foreground_is_degenerate_one() {
        let gt = vec![0, 0, 0];
        let pred = vec![1, 2, 3];
        let s = foreground_ari(&pred, &gt).unwrap();
        assert_eq!(s.value, 1.0);
        assert!(s.degenerate);
    }

    #[test]
    fn fg_ari_ignores_background_pixels() {
        let gt = vec![0, 1, 1, 0, 2, 2];
        let mut pred_a = vec![5, 1, 1, 5, 2, 2];
        let s1 = foreground_ari(&pred_a, &gt).unwrap();
        // Scramble predictions on background only; score must not move.
        pred_a[0] = 7;
        pred_a[3] = 8;
        let s2 = foreground_ari(&pred_a, &gt).unwrap();
        assert_eq!(s1.value, s2.value);
    }

    #[test]
    fn ari_matches_pair_oracle_on_all_small_partitions() {
        let parts = all_partitions(5);
        for p in &parts {
            for g in &parts {
                // Shift gt labels by 1 so none are background.
                let gt: Vec<usize> = g.iter().map(|x| x + 1).collect();
                let got = foreground_ari(p, &gt).unwrap().value;
                let want = ari_pair_oracle(p, g);
                assert!(
                    (got - want).abs() < 1e-12,
                    "pred {p:?} gt {g:?}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn ari_matches_pair_oracle_on_random_partitions() {
        let mut r = rng(55);
        for _ in 0..1000 {
            let n = r.gen_range(1..=8);
            let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
            let gt: Vec<usize> = (0..n).map(|_| r.gen_range(1..=4)).collect();
            let got = foreground_ari(&pred, &gt).unwrap().value;
            let want = ari_pair_oracle(&pred, &gt);
            assert!((got - want).abs() < 1e-12, "pred {pred:?} gt {gt:?}");
        }
    }

    #[test]
    fn ari_symmetric_and_relabel_invariant() {
        let mut r = rng(56);
        for _ in 0..50 {
            let n = 8;
            let a: Vec<usize> = (0..n).map(|_| r.gen_range(1..=3)).collect();
            let b: Vec<usize> = (0..n).map(|_| r.gen_range(1..=3)).collect();
            let ab = foreground_ari(&a, &b).unwrap().value;
            let ba = foreground_ari(&b, &a).unwrap().value;
            assert!((ab - ba).abs() < 1e-12);
            let relabeled: Vec<usize> = a.iter().map(|x| x * 10 + 7).collect();
            let rb = foreground_ari(&relabeled, &b).unwrap().value;
            assert!((ab - rb).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_cap_and_analytic_value() {
        let a = Tensor::new(vec![2, 2], vec![0.1, 0.4, 0.9, 0.3]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        // Uniform squared error of 0.01 -> 20 dB.
        let b = Tensor::new(vec![2, 2], vec![0.2, 0.5, 1.0, 0.4]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_direct_formula_and_symmetry() {
        let mut r = rng(57);
        let a = Tensor::new(vec![4, 3], (0..12).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 12.0;
        let direct = -10.0 * mse.log10();
        assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    /// Independent SSIM implementation using centered-moment algebra.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let win = 8;
        let mut total = 0.0;
        let mut count = 0.0;
        for wy in 0..h / win {
            for wx in 0..w / win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dy in 0..win {
                    for dx in 0..win {
                        xs.push(a[(wy * win + dy) * w + wx * win + dx]);
                        ys.push(b[(wy * win + dy) * w + wx * win + dx]);
                    }
                }
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
                let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
                let cov = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| (x - mx) * (y - my))
                    .sum::<f64>()
                    / n;
                let c1 = 0.0001;
                let c2 = 0.0009;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let mut r = rng(58);
        let a = Tensor::new(vec![8, 8], (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let binary =
            Tensor::new(vec![8, 8], (0..64).map(|i| (i % 2) as f64).collect()).unwrap();
        let inverted =
            Tensor::new(vec![8, 8], binary.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&binary, &inverted).unwrap() <= 0.0);
    }

    #[test]
    fn ssim_matches_independent_implementation() {
        let mut r = rng(59);
        let (h, w) = (16, 24);
        let a: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let ta = Tensor::new(vec![h, w], a.clone()).unwrap();
        let tb = Tensor::new(vec![h, w], b.clone()).unwrap();
        let got = ssim(&ta, &tb).unwrap();
        let want = ssim_oracle(&a, &b, h, w);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Tensor::new(vec![4, 4], vec![0.0; 16]).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn deviation_of_constant_map_is_zero() {
        let mut r = rng(60);
        let c = Tensor::new(vec![4, 3], (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let constant = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let dev = permutation_deviation(
            |_| Ok(constant.clone()),
            &c,
            SymmetryMode::Invariance,
            10,
            &mut r,
        )
        .unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn deviation_equivariance_requires_matching_counts() {
        let mut r = rng(61);
        let c = Tensor::new(vec![4, 2], vec![0.1; 8]).unwrap();
        let out = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        assert!(permutation_deviation(
            |_| Ok(out.clone()),
            &c,
            SymmetryMode::Equivariance,
            5,
            &mut r,
        )
        .is_err());
    }

    #[test]
    fn report_aggregate_is_mean_of_rows() {
        let scenes = vec![
            SceneScore { scene: 0, fg_ari: 0.5, psnr_db: 20.0, ssim: 0.8, discovered_k: 3, iterations: 3 },
            SceneScore { scene: 1, fg_ari: 1.0, psnr_db: 30.0, ssim: 0.6, discovered_k: 5, iterations: 3 },
        ];
        let report = EvalReport::from_scenes(scenes, 3);
        assert!((report.aggregate.fg_ari - 0.75).abs() < 1e-12);
        assert!((report.aggregate.psnr_db - 25.0).abs() < 1e-12);
        assert!((report.aggregate.mean_discovered_k - 4.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("aggregate,"));
    }
}
