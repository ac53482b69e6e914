//! Conditioning algorithms over feature grids: k-means with cluster dying
//! prevention and mean-shift with connected-components merging.
//!
//! Everything here runs on detached data. Gradient flow into the pipeline
//! is wired up by the slot-initialization layer, which replays the
//! differentiable parts on a tape.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

/// Cluster centers plus per-point diagnostics.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    /// M x D center matrix.
    pub centers: Tensor,
    /// Per-point center index (k-means only; empty for mean-shift).
    pub assignments: Vec<usize>,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftConfig {
    /// Gaussian kernel bandwidth.
    pub sigma: f64,
    /// Merge radius for connected components.
    pub epsilon: f64,
    /// Number of query points sampled from the data (default 20).
    pub initial_centers: usize,
    pub max_iterations: usize,
    pub fixed_point_tolerance: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        MeanShiftConfig {
            sigma: 1.0,
            epsilon: 0.5,
            initial_centers: 20,
            max_iterations: 50,
            fixed_point_tolerance: 1e-4,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "mean-shift needs positive sigma and epsilon, got sigma={} epsilon={}",
                self.sigma, self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_rank2(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: format!("{:?}", x.dims()),
            rhs: "rank-2 feature grid required".into(),
        });
    }
    Ok((x.dims()[0], x.dims()[1]))
}

/// Index of the point farthest from every current center: the point
/// maximizing its distance to the nearest center. Ties go to the lowest
/// point index.
fn farthest_point(x: &Tensor, centers: &[Vec<f64>]) -> usize {
    let n = x.rows();
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for p in 0..n {
        let row = x.row(p);
        let d = centers
            .iter()
            .map(|c| sq_dist(row, c))
            .fold(f64::INFINITY, f64::min);
        if d > best_d {
            best_d = d;
            best = p;
        }
    }
    best
}

/// Farthest-point k-means++ seeding: first center uniform over the data,
/// each later center at the data point farthest from all chosen ones.
pub fn kmeanspp_init(x: &Tensor, m: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (n, d) = check_rank2(x, "kmeanspp_init")?;
    if m > n {
        return Err(Error::Capacity {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Err(Error::DegenerateInput("zero clusters requested".into()));
    }
    let first = rng.gen_range(0..n);
    let mut centers: Vec<Vec<f64>> = vec![x.row(first).to_vec()];
    while centers.len() < m {
        let p = farthest_point(x, &centers);
        centers.push(x.row(p).to_vec());
    }
    Tensor::new(vec![m, d], centers.concat())
}

/// Nearest-center index for one point; ties break to the lowest index.
fn nearest_center(row: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in (0..centers.rows()).map(|i| (i, centers.row(i))) {
        let d = sq_dist(row, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// One Lloyd iteration: assign each point to its nearest center, recenter
/// nonempty clusters at the member mean, and report the inertia of the
/// assignment. Empty clusters keep their old center; `kmeans_run` deals
/// with them.
pub fn lloyd_step(x: &Tensor, centers: &Tensor) -> Result<(Tensor, Vec<usize>, f64)> {
    let (n, d) = check_rank2(x, "lloyd_step")?;
    let m = centers.rows();
    if m == 0 {
        return Err(Error::DegenerateInput("lloyd_step with no centers".into()));
    }
    let mut assignments = vec![0usize; n];
    let mut inertia = 0.0;
    for p in 0..n {
        let (i, dist) = nearest_center(x.row(p), centers);
        assignments[p] = i;
        inertia += dist;
    }
    let mut sums = vec![0.0; m * d];
    let mut counts = vec![0usize; m];
    for (p, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(x.row(p)) {
            *s += v;
        }
    }
    let mut new_centers = centers.data().to_vec();
    for i in 0..m {
        if counts[i] > 0 {
            for j in 0..d {
                new_centers[i * d + j] = sums[i * d + j] / counts[i] as f64;
            }
        }
    }
    Ok((Tensor::new(vec![m, d], new_centers)?, assignments, inertia))
}

fn assign_with_pins(
    x: &Tensor,
    centers: &Tensor,
    pinned: &[Option<usize>],
) -> (Vec<usize>, Vec<usize>) {
    let n = x.rows();
    let m = centers.rows();
    let mut assignments = vec![0usize; n];
    let mut counts = vec![0usize; m];
    for p in 0..n {
        let (best, best_d) = nearest_center(x.row(p), centers);
        // A pinned point stays with its reseeded cluster while that center
        // remains at minimal distance; otherwise the pin dissolves.
        let a = match pinned[p] {
            Some(i) if sq_dist(x.row(p), centers.row(i)) <= best_d => i,
            _ => best,
        };
        assignments[p] = a;
        counts[a] += 1;
    }
    (assignments, counts)
}

fn recenter(x: &Tensor, assignments: &[usize], m: usize) -> Tensor {
    let d = x.cols();
    let mut sums = vec![0.0; m * d];
    let mut counts = vec![0usize; m];
    for (p, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(x.row(p)) {
            *s += v;
        }
    }
    for i in 0..m {
        if counts[i] > 0 {
            for v in sums[i * d..(i + 1) * d].iter_mut() {
                *v /= counts[i] as f64;
            }
        }
    }
    Tensor::new(vec![m, d], sums).unwrap()
}

/// Full k-means with farthest-point reseeding of dying clusters.
///
/// Returns with every cluster nonempty: when a cluster empties, its center
/// is reseeded at the farthest point from all current centers and that
/// point is pinned to it so duplicate-center ties cannot starve it again.
/// `converged` records a genuine fixed point (center movement under
/// `tolerance` and a stable assignment), not merely the stop condition.
pub fn kmeans_run(
    x: &Tensor,
    m: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
    tolerance: f64,
) -> Result<ClusterSet> {
    let (n, _) = check_rank2(x, "kmeans_run")?;
    let mut centers = kmeanspp_init(x, m, rng)?;
    let mut pinned: Vec<Option<usize>> = vec![None; n];
    let mut assignments = vec![0usize; n];
    let mut iterations_used = 0;
    let mut stopped_in_tolerance = false;
    while iterations_used < max_iter {
        let (a, counts) = assign_with_pins(x, &centers, &pinned);
        assignments = a;
        let mut reseeded = false;
        let mut center_rows: Vec<Vec<f64>> =
            (0..m).map(|i| centers.row(i).to_vec()).collect();
        for i in 0..m {
            if counts[i] == 0 {
                let p = farthest_point(x, &center_rows);
                center_rows[i] = x.row(p).to_vec();
                pinned[p] = Some(i);
                assignments[p] = i;
                reseeded = true;
            }
        }
        if reseeded {
            centers = Tensor::new(centers.dims().to_vec(), center_rows.concat())?;
        }
        let new_centers = recenter(x, &assignments, m);
        let movement = (0..m)
            .map(|i| sq_dist(centers.row(i), new_centers.row(i)).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        iterations_used += 1;
        if !reseeded && movement < tolerance {
            stopped_in_tolerance = true;
            break;
        }
    }
    // Final consistency pass: assignments must be nearest with respect to
    // the returned centers and no cluster may be empty.
    let mut converged = false;
    for _ in 0..m.max(1) {
        let (a, counts) = assign_with_pins(x, &centers, &pinned);
        let stable = a == assignments;
        assignments = a;
        if counts.iter().all(|c| *c > 0) {
            converged = stopped_in_tolerance && stable;
            break;
        }
        let mut center_rows: Vec<Vec<f64>> =
            (0..m).map(|i| centers.row(i).to_vec()).collect();
        for i in 0..m {
            if counts[i] == 0 {
                let p = farthest_point(x, &center_rows);
                center_rows[i] = x.row(p).to_vec();
                pinned[p] = Some(i);
                assignments[p] = i;
            }
        }
        centers = Tensor::new(centers.dims().to_vec(), center_rows.concat())?;
    }
    Ok(ClusterSet {
        centers,
        assignments,
        iterations_used,
        converged,
    })
}

/// Normalized Gaussian kernel weights of every data point for one query,
/// computed with max-exponent subtraction: weight_n proportional to
/// exp(-0.5 * ||(query - x_n) / sigma||^2).
pub fn gaussian_kernel_weights(query: &[f64], x: &Tensor, sigma: f64) -> Vec<f64> {
    let n = x.rows();
    let inv = -0.5 / (sigma * sigma);
    let mut logits: Vec<f64> = (0..n).map(|p| sq_dist(query, x.row(p)) * inv).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
    logits
}

/// Trajectory of one mean-shift query.
#[derive(Debug, Clone)]
pub struct QueryTrace {
    /// Data index the query started from.
    pub start_index: usize,
    /// Positions visited, starting with the data point itself; the last
    /// entry is the converged (or iteration-capped) position.
    pub path: Vec<Vec<f64>>,
    pub converged: bool,
}

impl QueryTrace {
    pub fn iterations(&self) -> usize {
        self.path.len() - 1
    }

    pub fn final_position(&self) -> &[f64] {
        self.path.last().unwrap()
    }
}

/// Everything a mean-shift run produces, including per-query trajectories
/// so the differentiable layer can replay them on a tape.
#[derive(Debug, Clone)]
pub struct MeanShiftTrace {
    pub queries: Vec<QueryTrace>,
    /// Component id per query, in query order.
    pub query_component: Vec<usize>,
    /// Component representatives (means of member queries), M x D.
    pub centers: Tensor,
}

/// Runs mean-shift from explicitly chosen data indices. Query order is the
/// index order given, which fixes the output center ordering.
pub fn meanshift_trace(x: &Tensor, cfg: &MeanShiftConfig, indices: &[usize]) -> Result<MeanShiftTrace> {
    cfg.validate()?;
    let (n, d) = check_rank2(x, "meanshift_run")?;
    if indices.is_empty() {
        return Err(Error::DegenerateInput("mean-shift with no queries".into()));
    }
    if let Some(bad) = indices.iter().find(|i| **i >= n) {
        return Err(Error::Shape {
            op: "meanshift_run",
            lhs: format!("{n} points"),
            rhs: format!("query index {bad}"),
        });
    }
    let tol2 = cfg.fixed_point_tolerance * cfg.fixed_point_tolerance;
    let mut queries = Vec::with_capacity(indices.len());
    for &start in indices {
        let mut pos = x.row(start).to_vec();
        let mut path = vec![pos.clone()];
        let mut converged = false;
        for _ in 0..cfg.max_iterations {
            let w = gaussian_kernel_weights(&pos, x, cfg.sigma);
            let mut next = vec![0.0; d];
            for (p, wp) in w.iter().enumerate() {
                for (acc, v) in next.iter_mut().zip(x.row(p)) {
                    *acc += wp * v;
                }
            }
            let moved = sq_dist(&next, &pos);
            pos = next;
            path.push(pos.clone());
            if moved < tol2 {
                converged = true;
                break;
            }
        }
        queries.push(QueryTrace {
            start_index: start,
            path,
            converged,
        });
    }
    let finals: Vec<Vec<f64>> = queries.iter().map(|q| q.final_position().to_vec()).collect();
    let (reps, membership) = connected_components_merge(&finals, cfg.epsilon)?;
    let m = reps.len();
    Ok(MeanShiftTrace {
        queries,
        query_component: membership,
        centers: Tensor::new(vec![m, d], reps.concat())?,
    })
}

/// Mean-shift over `initial_centers` query points drawn uniformly without
/// replacement from the data, followed by connected-components merging.
/// The merged component representatives become the centers; the cluster
/// count is whatever the merge discovers.
pub fn meanshift_run(x: &Tensor, cfg: &MeanShiftConfig, rng: &mut ChaCha8Rng) -> Result<ClusterSet> {
    let trace = meanshift_trace(x, cfg, &sample_query_indices(x.rows(), cfg, rng)?)?;
    Ok(ClusterSet {
        iterations_used: trace.queries.iter().map(|q| q.iterations()).max().unwrap_or(0),
        converged: trace.queries.iter().all(|q| q.converged),
        centers: trace.centers,
        assignments: Vec::new(),
    })
}

/// Uniform sample of query start indices, without replacement.
pub fn sample_query_indices(
    n: usize,
    cfg: &MeanShiftConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if cfg.initial_centers > n {
        return Err(Error::Capacity {
            requested: cfg.initial_centers,
            available: n,
        });
    }
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(cfg.initial_centers);
    Ok(all)
}

/// Groups points whose pairwise Euclidean distance is at most `epsilon`
/// into connected components (breadth-first over the epsilon graph) and
/// collapses each component to the mean of its members.
///
/// Returns the representatives in order of first appearance plus the
/// component id of every input point. Empty input gives empty output.
pub fn connected_components_merge(
    points: &[Vec<f64>],
    epsilon: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "connected-components merge radius must be positive, got {epsilon}"
        )));
    }
    let n = points.len();
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let eps2 = epsilon * epsilon;
    let mut component = vec![usize::MAX; n];
    let mut reps = Vec::new();
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let id = reps.len();
        let mut frontier = vec![start];
        let mut members = Vec::new();
        component[start] = id;
        while let Some(p) = frontier.pop() {
            members.push(p);
            for q in 0..n {
                if component[q] == usize::MAX && sq_dist(&points[p], &points[q]) <= eps2 {
                    component[q] = id;
                    frontier.push(q);
                }
            }
        }
        let d = points[start].len();
        let mut mean = vec![0.0; d];
        for &p in &members {
            for (acc, v) in mean.iter_mut().zip(&points[p]) {
                *acc += v;
            }
        }
        for v in mean.iter_mut() {
            *v /= members.len() as f64;
        }
        reps.push(mean);
    }
    Ok((reps, component))
}

/// How a bandwidth calibration scan went.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub sigma: f64,
    pub epsilon: f64,
    /// Discovered cluster counts per probe at the chosen sigma.
    pub counts: Vec<usize>,
}

/// Scans sigma over a log grid and keeps the value whose discovered
/// cluster counts fluctuate the most across the probe batch: counts must
/// stay inside [1, initial_centers] and not sit constantly at either
/// bound; among those, more distinct counts win and ties go to the sigma
/// whose mean count lies closest (log scale) to the geometric middle of
/// the range. The merge radius follows as sigma / 2.
pub fn calibrate_bandwidth(
    probes: &[Tensor],
    cfg: &MeanShiftConfig,
    sigma_grid: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Calibration> {
    if probes.is_empty() || sigma_grid.is_empty() {
        return Err(Error::DegenerateInput(
            "bandwidth calibration needs probes and a sigma grid".into(),
        ));
    }
    let max = cfg.initial_centers;
    let center = (max as f64).sqrt();
    let mut best: Option<(usize, f64, Calibration)> = None;
    for &sigma in sigma_grid {
        let trial = MeanShiftConfig {
            sigma,
            epsilon: sigma / 2.0,
            ..cfg.clone()
        };
        let mut counts = Vec::with_capacity(probes.len());
        for probe in probes {
            let cs = meanshift_run(probe, &trial, rng)?;
            counts.push(cs.centers.rows());
        }
        if !counts.iter().all(|c| *c >= 1 && *c <= max) {
            continue;
        }
        let all_floor = counts.iter().all(|c| *c == 1);
        let all_ceil = counts.iter().all(|c| *c == max);
        let mut distinct = counts.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let fluctuates = !all_floor && !all_ceil && distinct.len() >= 2;
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        let centering = (mean.ln() - center.ln()).abs();
        // Non-fluctuating grid points only serve as a last resort.
        let score = if fluctuates { distinct.len() } else { 0 };
        let better = match &best {
            None => true,
            Some((s, c, _)) => score > *s || (score == *s && centering < *c),
        };
        if better {
            best = Some((
                score,
                centering,
                Calibration {
                    sigma,
                    epsilon: sigma / 2.0,
                    counts,
                },
            ));
        }
    }
    best.map(|(_, _, c)| c)
        .ok_or_else(|| Error::Config("no sigma in the grid kept counts within range".into()))
}

/// A default log-spaced sigma grid for calibration.
pub fn default_sigma_grid() -> Vec<f64> {
    (-8..=6).map(|e| 2f64.powi(e)).collect()
}
