//! Turning cluster centers into initial slots.
//!
//! Four mapping layers connect an M x D center matrix to K x D slots:
//! `direct` (identity), `shared_mlp` (one network per center, permutation
//! equivariant), `large_mlp` (flatten everything, no symmetry), and
//! `pseudoweights` (permutation invariant, decouples M from K). Each can
//! also emit per-slot Gaussian parameters and sample from them.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::{self, MeanShiftConfig};
use crate::error::{Error, Result};
use crate::params::{Mlp, MlpVals};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Sine-cosine slot position table (Eq. form: row k holds
/// sin(j*pi*k/D'), cos(j*pi*k/D') pairs for j = 1..D', D' = D/2, k 1-based).
pub fn positional_encoding(k_slots: usize, dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Shape {
            op: "positional_encoding",
            lhs: format!("dim {dim}"),
            rhs: "even dimension >= 2 required".into(),
        });
    }
    if k_slots == 0 {
        return Err(Error::DegenerateInput("zero slots requested".into()));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(k_slots * dim);
    for k in 1..=k_slots {
        for j in 1..=half {
            let angle = std::f64::consts::PI * (j * k) as f64 / half as f64;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![k_slots, dim], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingVariant {
    Direct,
    SharedMlp,
    LargeMlp,
    Pseudoweights,
}

impl std::fmt::Display for MappingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MappingVariant::Direct => "direct",
            MappingVariant::SharedMlp => "shared_mlp",
            MappingVariant::LargeMlp => "large_mlp",
            MappingVariant::Pseudoweights => "pseudoweights",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Random,
    Kmeans,
    Meanshift,
}

impl std::fmt::Display for InitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InitMethod::Random => "random",
            InitMethod::Kmeans => "kmeans",
            InitMethod::Meanshift => "meanshift",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMethod::Random),
            "kmeans" => Ok(InitMethod::Kmeans),
            "meanshift" => Ok(InitMethod::Meanshift),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (random | kmeans | meanshift)"
            ))),
        }
    }
}

impl std::str::FromStr for MappingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(MappingVariant::Direct),
            "shared_mlp" => Ok(MappingVariant::SharedMlp),
            "large_mlp" => Ok(MappingVariant::LargeMlp),
            "pseudoweights" => Ok(MappingVariant::Pseudoweights),
            other => Err(Error::Config(format!(
                "unknown mapping {other:?} (direct | shared_mlp | large_mlp | pseudoweights)"
            ))),
        }
    }
}

/// Cluster count the configuration implies: M = 2K for the mappings that
/// decouple clusters from slots, M = K for the rest.
pub fn cluster_count_for(variant: MappingVariant, k: usize) -> usize {
    match variant {
        MappingVariant::LargeMlp | MappingVariant::Pseudoweights => 2 * k,
        MappingVariant::Direct | MappingVariant::SharedMlp => k,
    }
}

/// Rejects the combinations the architecture cannot express.
pub fn validate_combination(
    method: InitMethod,
    variant: MappingVariant,
    gaussian_output: bool,
) -> Result<()> {
    if method == InitMethod::Meanshift && variant == MappingVariant::LargeMlp {
        return Err(Error::UnsupportedVariant(
            "large_mlp needs a fixed cluster count and cannot follow mean-shift".into(),
        ));
    }
    if variant == MappingVariant::Direct && gaussian_output {
        return Err(Error::UnsupportedVariant(
            "direct mapping cannot emit Gaussian parameters".into(),
        ));
    }
    Ok(())
}

/// Parameters of one cluster-to-slot mapping layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingParams {
    pub variant: MappingVariant,
    /// When set the mapping emits (mu, log sigma) per slot dimension and
    /// slots are sampled with the reparameterization trick.
    pub gaussian_output: bool,
    pub net: Option<Mlp>,
    /// Feature dimension D.
    pub d: usize,
    /// Cluster count fixed at build time (meaningful for large_mlp only).
    pub m: usize,
    /// Slot count fixed at build time (meaningful for large_mlp only).
    pub k: usize,
}

impl MappingParams {
    /// Builds a mapping for feature dimension `d`. `hidden`/`depth`
    /// override the per-variant defaults (depth counts weight matrices).
    pub fn init(
        rng: &mut ChaCha8Rng,
        variant: MappingVariant,
        gaussian_output: bool,
        k: usize,
        m: usize,
        d: usize,
        hidden: Option<usize>,
        depth: Option<usize>,
    ) -> Result<Self> {
        if variant == MappingVariant::Direct && gaussian_output {
            return Err(Error::UnsupportedVariant(
                "direct mapping cannot emit Gaussian parameters".into(),
            ));
        }
        let out_mult = if gaussian_output { 2 } else { 1 };
        let net = match variant {
            MappingVariant::Direct => None,
            MappingVariant::SharedMlp => {
                let h = hidden.unwrap_or(2 * d);
                let widths = layer_widths(d, h, d * out_mult, depth.unwrap_or(2));
                Some(Mlp::init(rng, &widths))
            }
            MappingVariant::LargeMlp => {
                let h = hidden.unwrap_or(m * d);
                let widths = layer_widths(m * d, h, k * d * out_mult, depth.unwrap_or(2));
                Some(Mlp::init(rng, &widths))
            }
            MappingVariant::Pseudoweights => {
                if d % 2 != 0 {
                    return Err(Error::Shape {
                        op: "pseudoweights",
                        lhs: format!("dim {d}"),
                        rhs: "even dimension required for the position table".into(),
                    });
                }
                let h = hidden.unwrap_or(2 * d);
                let widths = layer_widths(2 * d, h, d * out_mult, depth.unwrap_or(3));
                Some(Mlp::init(rng, &widths))
            }
        };
        Ok(MappingParams {
            variant,
            gaussian_output,
            net,
            d,
            m,
            k,
        })
    }

    pub fn register(&self, tape: &mut Tape) -> MappingVals {
        MappingVals {
            net: self.net.as_ref().map(|n| n.register(tape)),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(net) = &self.net {
            net.collect(&format!("{prefix}.net"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Some(net) = &mut self.net {
            net.collect_mut(&format!("{prefix}.net"), out);
        }
    }

    /// Convenience wrapper that maps detached centers on a private tape.
    pub fn map(
        &self,
        centers: &Tensor,
        k: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let vals = self.register(&mut tape);
        let c = tape.leaf(centers);
        let out = apply_mapping(&mut tape, self, &vals, c, k, rng)?;
        Ok((
            tape.to_tensor(out.slots),
            out.pseudoweights.map(|w| tape.to_tensor(w)),
        ))
    }
}

fn layer_widths(input: usize, hidden: usize, output: usize, depth: usize) -> Vec<usize> {
    let mut widths = vec![input];
    for _ in 0..depth.max(1) - 1 {
        widths.push(hidden);
    }
    widths.push(output);
    widths
}

#[derive(Debug, Clone)]
pub struct MappingVals {
    pub net: Option<MlpVals>,
}

pub struct MappingOutput {
    pub slots: Val,
    /// K x M x D softmax-normalized weights (pseudoweights only).
    pub pseudoweights: Option<Val>,
}

/// Runs a registered mapping on tape-resident centers. `k` is the
/// requested slot count; variants with K = M ignore it in favor of the
/// center count. Gaussian output needs `rng` for the sampling step.
pub fn apply_mapping(
    tape: &mut Tape,
    params: &MappingParams,
    vals: &MappingVals,
    centers: Val,
    k: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<MappingOutput> {
    let dims = tape.dims(centers).to_vec();
    if dims.len() != 2 || dims[1] != params.d {
        return Err(Error::Shape {
            op: "apply_mapping",
            lhs: format!("{dims:?}"),
            rhs: format!("[M, {}] centers required", params.d),
        });
    }
    let m = dims[0];
    let d = params.d;
    let (raw, weights, k_out) = match params.variant {
        MappingVariant::Direct => {
            if params.gaussian_output {
                return Err(Error::UnsupportedVariant(
                    "direct mapping cannot emit Gaussian parameters".into(),
                ));
            }
            (centers, None, m)
        }
        MappingVariant::SharedMlp => {
            let net = vals.net.as_ref().expect("shared_mlp has a network");
            (net.apply(tape, centers)?, None, m)
        }
        MappingVariant::LargeMlp => {
            if m != params.m {
                return Err(Error::Shape {
                    op: "map_large_mlp",
                    lhs: format!("built for {} clusters", params.m),
                    rhs: format!("got {m}"),
                });
            }
            let net = vals.net.as_ref().expect("large_mlp has a network");
            let flat = tape.reshape(centers, vec![1, m * d])?;
            let out = net.apply(tape, flat)?;
            let width = if params.gaussian_output { 2 * d } else { d };
            (tape.reshape(out, vec![params.k, width])?, None, params.k)
        }
        MappingVariant::Pseudoweights => {
            let net = vals.net.as_ref().expect("pseudoweights has a network");
            let pos = positional_encoding(k, d)?;
            let pos_val = tape.constant(pos.dims().to_vec(), pos.data().to_vec());
            // Broadcast centers along slots and positions along clusters:
            // row (slot, cluster) pairs in slot-major order.
            let tile_idx: Vec<usize> = (0..k).flat_map(|_| 0..m).collect();
            let rep_idx: Vec<usize> = (0..k).flat_map(|s| std::iter::repeat(s).take(m)).collect();
            let c_tile = tape.gather_rows(centers, &tile_idx)?;
            let p_rep = tape.gather_rows(pos_val, &rep_idx)?;
            let joint = tape.concat_cols(c_tile, p_rep)?;
            let pre = net.apply(tape, joint)?;
            let width = if params.gaussian_output { 2 * d } else { d };
            let pre3 = tape.reshape(pre, vec![k, m, width])?;
            let w = tape.softmax_axis(pre3, 1)?;
            let c_dup = if params.gaussian_output {
                tape.concat_cols(c_tile, c_tile)?
            } else {
                c_tile
            };
            let c3 = tape.reshape(c_dup, vec![k, m, width])?;
            let weighted = tape.mul(w, c3)?;
            (tape.reduce_sum(weighted, 1)?, Some(w), k)
        }
    };
    let slots = if params.gaussian_output {
        let rng = rng.ok_or_else(|| {
            Error::Config("gaussian mapping output needs a random source".into())
        })?;
        sample_gaussian(tape, raw, k_out, d, rng)?
    } else {
        raw
    };
    Ok(MappingOutput {
        slots,
        pseudoweights: weights,
    })
}

/// Splits (mu, log sigma) columns and samples z = mu + sigma * eta with a
/// reparameterized standard-normal draw.
fn sample_gaussian(
    tape: &mut Tape,
    raw: Val,
    k: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Val> {
    let mu = tape.slice_cols(raw, 0, d)?;
    let log_sigma = tape.slice_cols(raw, d, 2 * d)?;
    let sigma = tape.exp(log_sigma)?;
    let eta: Vec<f64> = (0..k * d)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let eta_val = tape.constant(vec![k, d], eta);
    let noise = tape.mul(sigma, eta_val)?;
    tape.add(mu, noise)
}

// ── Spec-level operation wrappers ───────────────────────────────────

/// Identity mapping: slots are the cluster centers.
pub fn map_direct(tape: &mut Tape, params: &MappingParams, centers: Val) -> Result<Val> {
    let vals = params.register(tape);
    let m = tape.dims(centers)[0];
    Ok(apply_mapping(tape, params, &vals, centers, m, None)?.slots)
}

/// One shared network applied to every center independently.
pub fn map_shared_mlp(tape: &mut Tape, params: &MappingParams, centers: Val) -> Result<Val> {
    let vals = params.register(tape);
    let m = tape.dims(centers)[0];
    Ok(apply_mapping(tape, params, &vals, centers, m, None)?.slots)
}

/// Flattened centers through one large network; fixed M and K.
pub fn map_large_mlp(tape: &mut Tape, params: &MappingParams, centers: Val) -> Result<Val> {
    let vals = params.register(tape);
    Ok(apply_mapping(tape, params, &vals, centers, params.k, None)?.slots)
}

/// Permutation-invariant mapping: softmax-normalized importance of every
/// center for every position-encoded slot, then a weighted elementwise sum.
pub fn map_pseudoweights(
    tape: &mut Tape,
    params: &MappingParams,
    centers: Val,
    k: usize,
) -> Result<(Val, Val)> {
    let vals = params.register(tape);
    let out = apply_mapping(tape, params, &vals, centers, k, None)?;
    Ok((out.slots, out.pseudoweights.expect("pseudoweights tensor")))
}

/// Gaussian-parameter variant: the mapping emits (mu, log sigma) and slots
/// are sampled with gradients flowing to both.
pub fn map_to_gaussian_and_sample(
    tape: &mut Tape,
    params: &MappingParams,
    centers: Val,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Val> {
    if !params.gaussian_output {
        return Err(Error::UnsupportedVariant(
            "mapping was built without gaussian_output".into(),
        ));
    }
    let vals = params.register(tape);
    Ok(apply_mapping(tape, params, &vals, centers, k, Some(rng))?.slots)
}

// ── Slot initialization front end ───────────────────────────────────

/// K x D slot matrix plus the mapping that produced it.
#[derive(Debug, Clone)]
pub struct SlotSet {
    pub slots: Tensor,
    pub origin: SlotOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOrigin {
    Random,
    Clustered(InitMethod, MappingVariant),
}

/// Learnable state behind `init_slots`.
#[derive(Debug, Clone)]
pub enum SlotInit {
    /// Baseline: slots drawn from one learned Gaussian per dimension.
    Random { mu: Tensor, log_sigma: Tensor },
    Clustered {
        method: InitMethod,
        mapping: MappingParams,
    },
}

impl SlotInit {
    pub fn random(d: usize) -> Self {
        // Standard Gaussian at initialization: mu = 0, log sigma = 0.
        SlotInit::Random {
            mu: Tensor::zeros(vec![d]).with_grad(true),
            log_sigma: Tensor::zeros(vec![d]).with_grad(true),
        }
    }

    pub fn method(&self) -> InitMethod {
        match self {
            SlotInit::Random { .. } => InitMethod::Random,
            SlotInit::Clustered { method, .. } => *method,
        }
    }

    pub fn register(&self, tape: &mut Tape) -> SlotInitVals {
        match self {
            SlotInit::Random { mu, log_sigma } => SlotInitVals {
                mapping: None,
                random: Some((tape.leaf(mu), tape.leaf(log_sigma))),
            },
            SlotInit::Clustered { mapping, .. } => SlotInitVals {
                mapping: Some(mapping.register(tape)),
                random: None,
            },
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            SlotInit::Random { mu, log_sigma } => {
                out.push((format!("{prefix}.mu"), mu));
                out.push((format!("{prefix}.log_sigma"), log_sigma));
            }
            SlotInit::Clustered { mapping, .. } => mapping.collect(&format!("{prefix}.mapping"), out),
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            SlotInit::Random { mu, log_sigma } => {
                out.push((format!("{prefix}.mu"), mu));
                out.push((format!("{prefix}.log_sigma"), log_sigma));
            }
            SlotInit::Clustered { mapping, .. } => {
                mapping.collect_mut(&format!("{prefix}.mapping"), out)
            }
        }
    }
}

pub struct SlotInitVals {
    pub mapping: Option<MappingVals>,
    pub random: Option<(Val, Val)>,
}

/// Knobs for the clustering stage of slot initialization.
#[derive(Debug, Clone)]
pub struct ClusteringOptions {
    pub kmeans_max_iter: usize,
    pub kmeans_tolerance: f64,
    pub meanshift: MeanShiftConfig,
    /// Backpropagate through at most this many trailing mean-shift
    /// iterations per query; `None` unrolls everything.
    pub backprop_iterations: Option<usize>,
}

impl Default for ClusteringOptions {
    fn default() -> Self {
        ClusteringOptions {
            kmeans_max_iter: 100,
            kmeans_tolerance: 1e-4,
            meanshift: MeanShiftConfig::default(),
            backprop_iterations: Some(10),
        }
    }
}

/// Captured hard decisions of one clustering pass, reusable to make a
/// later forward pass a smooth function of the features.
#[derive(Debug, Clone)]
pub enum FrozenClustering {
    None,
    Kmeans {
        /// M x N membership-averaging matrix.
        averaging: Tensor,
        iterations: usize,
    },
    Meanshift {
        start_indices: Vec<usize>,
        iterations: Vec<usize>,
        /// Component id per query plus the component count.
        components: Vec<usize>,
        component_count: usize,
    },
}

pub struct InitOutcome {
    pub slots: Val,
    pub origin: SlotOrigin,
    /// Slot count actually produced (mean-shift discovers it).
    pub discovered_k: usize,
    pub clustering_iterations: usize,
    /// Pseudoweights tensor when that mapping ran.
    pub pseudoweights: Option<Val>,
    pub frozen: FrozenClustering,
}

/// Initializes slots from tape-resident features.
///
/// `k` is the slot count for `random` and `kmeans`; mean-shift discovers
/// its own. `freeze` replays the hard decisions of an earlier pass instead
/// of re-clustering, which keeps the graph differentiable end to end.
#[allow(clippy::too_many_arguments)]
pub fn init_slots(
    tape: &mut Tape,
    init: &SlotInit,
    vals: &SlotInitVals,
    features: Val,
    k: usize,
    opts: &ClusteringOptions,
    rng: &mut ChaCha8Rng,
    freeze: Option<&FrozenClustering>,
) -> Result<InitOutcome> {
    let dims = tape.dims(features).to_vec();
    if dims.len() != 2 {
        return Err(Error::Shape {
            op: "init_slots",
            lhs: format!("{dims:?}"),
            rhs: "rank-2 feature grid required".into(),
        });
    }
    let (n, d) = (dims[0], dims[1]);
    match init {
        SlotInit::Random { .. } => {
            let (mu, log_sigma) = vals.random.expect("random init registered");
            let sigma = tape.exp(log_sigma)?;
            let eta: Vec<f64> = (0..k * d).map(|_| StandardNormal.sample(rng)).collect();
            let eta_val = tape.constant(vec![k, d], eta);
            let noise = tape.mul(eta_val, sigma)?;
            let slots = tape.add(noise, mu)?;
            Ok(InitOutcome {
                slots,
                origin: SlotOrigin::Random,
                discovered_k: k,
                clustering_iterations: 0,
                pseudoweights: None,
                frozen: FrozenClustering::None,
            })
        }
        SlotInit::Clustered { method, mapping } => {
            validate_combination(*method, mapping.variant, mapping.gaussian_output)?;
            let (centers, iterations, frozen, k_for_mapping) = match method {
                InitMethod::Kmeans => {
                    let (averaging, iterations) = match freeze {
                        Some(FrozenClustering::Kmeans {
                            averaging,
                            iterations,
                        }) => (averaging.clone(), *iterations),
                        _ => {
                            let x = tape.to_tensor(features);
                            let m = cluster_count_for(mapping.variant, k);
                            let cs = clustering::kmeans_run(
                                &x,
                                m,
                                rng,
                                opts.kmeans_max_iter,
                                opts.kmeans_tolerance,
                            )?;
                            (membership_averaging(&cs.assignments, m, n), cs.iterations_used)
                        }
                    };
                    let a = tape.constant(averaging.dims().to_vec(), averaging.data().to_vec());
                    let centers = tape.matmul(a, features)?;
                    (
                        centers,
                        iterations,
                        FrozenClustering::Kmeans {
                            averaging,
                            iterations,
                        },
                        k,
                    )
                }
                InitMethod::Meanshift => {
                    let (starts, iters, components, comp_count) = match freeze {
                        Some(FrozenClustering::Meanshift {
                            start_indices,
                            iterations,
                            components,
                            component_count,
                        }) => (
                            start_indices.clone(),
                            iterations.clone(),
                            components.clone(),
                            *component_count,
                        ),
                        _ => {
                            let x = tape.to_tensor(features);
                            let starts =
                                clustering::sample_query_indices(n, &opts.meanshift, rng)?;
                            let trace = clustering::meanshift_trace(&x, &opts.meanshift, &starts)?;
                            let iters: Vec<usize> =
                                trace.queries.iter().map(|q| q.iterations()).collect();
                            let comp_count = trace.centers.rows();
                            (starts, iters, trace.query_component, comp_count)
                        }
                    };
                    let centers = replay_meanshift_on_tape(
                        tape,
                        features,
                        &starts,
                        &iters,
                        &components,
                        comp_count,
                        opts,
                    )?;
                    let max_iter = iters.iter().copied().max().unwrap_or(0);
                    (
                        centers,
                        max_iter,
                        FrozenClustering::Meanshift {
                            start_indices: starts,
                            iterations: iters,
                            components,
                            component_count: comp_count,
                        },
                        comp_count,
                    )
                }
                InitMethod::Random => unreachable!("random handled above"),
            };
            let mapping_vals = vals.mapping.as_ref().expect("clustered init registered");
            let rng_opt = if mapping.gaussian_output { Some(rng) } else { None };
            let out = apply_mapping(tape, mapping, mapping_vals, centers, k_for_mapping, rng_opt)?;
            let discovered_k = tape.dims(out.slots)[0];
            Ok(InitOutcome {
                slots: out.slots,
                origin: SlotOrigin::Clustered(*method, mapping.variant),
                discovered_k,
                clustering_iterations: iterations,
                pseudoweights: out.pseudoweights,
                frozen,
            })
        }
    }
}

/// M x N matrix with row i holding 1/|C_i| at the members of cluster i, so
/// centers = averaging @ features is the member-mean map.
fn membership_averaging(assignments: &[usize], m: usize, n: usize) -> Tensor {
    let mut counts = vec![0usize; m];
    for &a in assignments {
        counts[a] += 1;
    }
    let mut data = vec![0.0; m * n];
    for (p, &a) in assignments.iter().enumerate() {
        data[a * n + p] = 1.0 / counts[a] as f64;
    }
    Tensor::new(vec![m, n], data).unwrap()
}

/// Re-runs the recorded mean-shift trajectories as tape operations so
/// gradients reach the features. Iterations beyond the backprop budget run
/// detached; each query then enters the tape at the recorded offset.
///
/// All queries advance in lockstep as matrix ops (distances via the
/// norm-expansion identity), with a per-iteration snapshot; every query is
/// then read off at its own recorded stopping iteration.
fn replay_meanshift_on_tape(
    tape: &mut Tape,
    features: Val,
    starts: &[usize],
    iterations: &[usize],
    components: &[usize],
    component_count: usize,
    opts: &ClusteringOptions,
) -> Result<Val> {
    let dims = tape.dims(features).to_vec();
    let (n, d) = (dims[0], dims[1]);
    let q_count = starts.len();
    let sigma = opts.meanshift.sigma;
    let scale = -0.5 / (sigma * sigma);
    let budget = opts.backprop_iterations.unwrap_or(usize::MAX);
    let taped: Vec<usize> = iterations.iter().map(|t| (*t).min(budget)).collect();
    let t_max = taped.iter().max().copied().unwrap_or(0);

    let mut start_rows = Vec::with_capacity(q_count);
    let mut detached_features: Option<Tensor> = None;
    for (qi, &start) in starts.iter().enumerate() {
        let detached = iterations[qi] - taped[qi];
        if detached == 0 {
            start_rows.push(tape.gather_rows(features, &[start])?);
        } else {
            // Warm up off the tape, then continue differentiably.
            let x = detached_features.get_or_insert_with(|| tape.to_tensor(features));
            let mut pos = x.row(start).to_vec();
            for _ in 0..detached {
                let w = clustering::gaussian_kernel_weights(&pos, x, sigma);
                let mut next = vec![0.0; d];
                for (p, wp) in w.iter().enumerate() {
                    for (acc, v) in next.iter_mut().zip(x.row(p)) {
                        *acc += wp * v;
                    }
                }
                pos = next;
            }
            start_rows.push(tape.constant(vec![1, d], pos));
        }
    }
    let mut queries = tape.concat_rows(&start_rows)?;
    let mut snapshots = vec![queries];

    let features_t = tape.transpose(features)?;
    let feature_sq = tape.square(features)?;
    let feature_norms = tape.reduce_sum(feature_sq, 1)?;
    let feature_norms_row = tape.reshape(feature_norms, vec![1, n])?;
    let ones_q = tape.constant(vec![q_count, 1], vec![1.0; q_count]);
    let feature_norms_mat = tape.matmul(ones_q, feature_norms_row)?;
    let ones_n = tape.constant(vec![1, n], vec![1.0; n]);

    for _ in 0..t_max {
        let q_sq = tape.square(queries)?;
        let q_norms = tape.reduce_sum(q_sq, 1)?;
        let q_norms_col = tape.reshape(q_norms, vec![q_count, 1])?;
        let q_norms_mat = tape.matmul(q_norms_col, ones_n)?;
        let cross = tape.matmul(queries, features_t)?;
        let cross_neg2 = tape.scale(cross, -2.0)?;
        let partial = tape.add(q_norms_mat, cross_neg2)?;
        let dist2 = tape.add(partial, feature_norms_mat)?;
        let logits = tape.scale(dist2, scale)?;
        let weights = tape.softmax_axis(logits, 1)?;
        queries = tape.matmul(weights, features)?;
        snapshots.push(queries);
    }

    let stacked = tape.concat_rows(&snapshots)?;
    let select: Vec<usize> = taped
        .iter()
        .enumerate()
        .map(|(qi, t)| t * q_count + qi)
        .collect();
    let finals = tape.gather_rows(stacked, &select)?;

    // Collapse each component to the mean of its member queries.
    let mut counts = vec![0usize; component_count];
    for &c in components {
        counts[c] += 1;
    }
    let mut avg = vec![0.0; component_count * q_count];
    for (qi, &c) in components.iter().enumerate() {
        avg[c * q_count + qi] = 1.0 / counts[c] as f64;
    }
    let avg_val = tape.constant(vec![component_count, q_count], avg);
    tape.matmul(avg_val, finals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_centers(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![m, d], data).unwrap()
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let d = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for &p in perm {
            data.extend_from_slice(t.row(p));
        }
        Tensor::new(vec![perm.len(), d], data).unwrap()
    }

    #[test]
    fn encoding_first_row_analytic() {
        let enc = positional_encoding(1, 4).unwrap();
        let row = enc.row(0);
        let expect = [1.0, 0.0, 0.0, -1.0]; // sin/cos of pi/2 and pi
        for (a, b) in row.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn encoding_pairs_lie_on_unit_circle() {
        let enc = positional_encoding(6, 8).unwrap();
        for k in 0..6 {
            let row = enc.row(k);
            for pair in row.chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-9);
            }
            for v in row {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn encoding_rows_pairwise_distinct() {
        let enc = positional_encoding(8, 16).unwrap();
        for i in 0..8 {
            for j in i + 1..8 {
                let max_diff = enc
                    .row(i)
                    .iter()
                    .zip(enc.row(j))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(max_diff > 1e-3, "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn encoding_rejects_odd_dim() {
        assert!(positional_encoding(4, 5).is_err());
        assert!(positional_encoding(4, 0).is_err());
    }

    #[test]
    fn direct_is_bitwise_identity_and_equivariant() {
        let mut r = rng(1);
        let params = MappingParams::init(&mut r, MappingVariant::Direct, false, 7, 7, 4, None, None)
            .unwrap();
        let c = random_centers(&mut r, 7, 4);
        let (slots, _) = params.map(&c, 7, None).unwrap();
        assert_eq!(slots.data(), c.data());
        assert_eq!(slots.rows(), 7);
        let perm: Vec<usize> = vec![3, 0, 6, 1, 5, 2, 4];
        let (permuted_slots, _) = params.map(&permute_rows(&c, &perm), 7, None).unwrap();
        assert_eq!(permuted_slots.data(), permute_rows(&slots, &perm).data());
    }

    #[test]
    fn direct_rejects_gaussian_output() {
        let mut r = rng(2);
        assert!(matches!(
            MappingParams::init(&mut r, MappingVariant::Direct, true, 3, 3, 4, None, None),
            Err(Error::UnsupportedVariant(_))
        ));
    }

    #[test]
    fn shared_mlp_equivariance_is_exact() {
        let mut r = rng(3);
        let params =
            MappingParams::init(&mut r, MappingVariant::SharedMlp, false, 5, 5, 6, None, None)
                .unwrap();
        let c = random_centers(&mut r, 5, 6);
        let (slots, _) = params.map(&c, 5, None).unwrap();
        let perm = vec![4, 2, 0, 3, 1];
        let (permuted_slots, _) = params.map(&permute_rows(&c, &perm), 5, None).unwrap();
        assert_eq!(permuted_slots.data(), permute_rows(&slots, &perm).data());
    }

    #[test]
    fn shared_mlp_duplicate_centers_give_duplicate_slots() {
        let mut r = rng(4);
        let params =
            MappingParams::init(&mut r, MappingVariant::SharedMlp, false, 3, 3, 4, None, None)
                .unwrap();
        let base = random_centers(&mut r, 1, 4);
        let c = permute_rows(&base, &[0, 0, 0]);
        let (slots, _) = params.map(&c, 3, None).unwrap();
        assert_eq!(slots.row(0), slots.row(1));
        assert_eq!(slots.row(1), slots.row(2));
    }

    #[test]
    fn large_mlp_requires_built_cluster_count() {
        let mut r = rng(5);
        let params =
            MappingParams::init(&mut r, MappingVariant::LargeMlp, false, 7, 14, 4, None, None)
                .unwrap();
        let c = random_centers(&mut r, 14, 4);
        let (slots, _) = params.map(&c, 7, None).unwrap();
        assert_eq!(slots.dims(), &[7, 4]);
        let wrong = random_centers(&mut r, 10, 4);
        assert!(matches!(
            params.map(&wrong, 7, None),
            Err(Error::Shape { op: "map_large_mlp", .. })
        ));
    }

    #[test]
    fn large_mlp_breaks_permutation_symmetry() {
        let mut witnessed = 0;
        for seed in 0..100 {
            let mut r = rng(seed);
            let params =
                MappingParams::init(&mut r, MappingVariant::LargeMlp, false, 3, 6, 4, None, None)
                    .unwrap();
            let c = random_centers(&mut r, 6, 4);
            let (base, _) = params.map(&c, 3, None).unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut r);
            let (other, _) = params.map(&permute_rows(&c, &perm), 3, None).unwrap();
            let diff = base
                .data()
                .iter()
                .zip(other.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if diff > 1e-3 {
                witnessed += 1;
            }
        }
        assert!(witnessed >= 95, "only {witnessed}/100 permutations moved the output");
    }

    #[test]
    fn pseudoweights_normalized_and_invariant() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let (k, m, d) = (4, 8, 6);
            let params =
                MappingParams::init(&mut r, MappingVariant::Pseudoweights, false, k, m, d, None, None)
                    .unwrap();
            let c = random_centers(&mut r, m, d);
            let (slots, weights) = params.map(&c, k, None).unwrap();
            let w = weights.unwrap();
            assert_eq!(w.dims(), &[k, m, d]);
            for slot in 0..k {
                for dim in 0..d {
                    let sum: f64 = (0..m).map(|mm| w.data()[(slot * m + mm) * d + dim]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
            // Convexity: every slot coordinate inside the center hull.
            for slot in 0..k {
                for dim in 0..d {
                    let lo = (0..m).map(|mm| c.row(mm)[dim]).fold(f64::INFINITY, f64::min);
                    let hi = (0..m)
                        .map(|mm| c.row(mm)[dim])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let v = slots.row(slot)[dim];
                    assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                }
            }
            // Invariance under a random permutation.
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut r);
            let (permuted, _) = params.map(&permute_rows(&c, &perm), k, None).unwrap();
            let scale = 1.0
                + slots
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
            let dev = slots
                .data()
                .iter()
                .zip(permuted.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                / scale;
            assert!(dev < 1e-6, "seed {seed}: deviation {dev}");
        }
    }

    #[test]
    fn pseudoweights_single_center_copies_it() {
        let mut r = rng(9);
        let params =
            MappingParams::init(&mut r, MappingVariant::Pseudoweights, false, 3, 1, 4, None, None)
                .unwrap();
        let c = random_centers(&mut r, 1, 4);
        let (slots, weights) = params.map(&c, 3, None).unwrap();
        for w in weights.unwrap().data() {
            assert!((w - 1.0).abs() < 1e-12);
        }
        for slot in 0..3 {
            for (a, b) in slots.row(slot).iter().zip(c.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pseudoweights_generalize_to_more_slots() {
        let mut r = rng(10);
        let params =
            MappingParams::init(&mut r, MappingVariant::Pseudoweights, false, 5, 10, 8, None, None)
                .unwrap();
        let c = random_centers(&mut r, 10, 8);
        let (five, _) = params.map(&c, 5, None).unwrap();
        assert_eq!(five.dims(), &[5, 8]);
        // Same parameters, eight slots requested: no rebuild, no error.
        let (eight, _) = params.map(&c, 8, None).unwrap();
        assert_eq!(eight.dims(), &[8, 8]);
        for slot in 0..5 {
            for (a, b) in five.row(slot).iter().zip(eight.row(slot)) {
                assert!((a - b).abs() < 1e-12, "slot {slot} changed under K growth");
            }
        }
    }

    #[test]
    fn gaussian_sampling_collapses_at_tiny_sigma() {
        let mut r = rng(11);
        let mut params =
            MappingParams::init(&mut r, MappingVariant::SharedMlp, true, 4, 4, 4, None, None)
                .unwrap();
        // Zero the network and set the bias to (mu | log sigma) with a huge
        // negative log sigma so z collapses onto mu.
        let net = params.net.as_mut().unwrap();
        for layer in &mut net.layers {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
            for v in layer.bias.data_mut() {
                *v = 0.0;
            }
        }
        let last = net.layers.last_mut().unwrap();
        let out_w = last.bias.len();
        for (i, v) in last.bias.data_mut().iter_mut().enumerate() {
            *v = if i < out_w / 2 { 0.7 } else { (1e-8f64).ln() };
        }
        let c = random_centers(&mut r, 4, 4);
        let mut tape = Tape::new();
        let cv = tape.leaf(&c);
        let z = map_to_gaussian_and_sample(&mut tape, &params, cv, 4, &mut rng(0)).unwrap();
        for v in tape.data(z) {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_sampling_deterministic_per_seed() {
        let mut r = rng(12);
        let params =
            MappingParams::init(&mut r, MappingVariant::SharedMlp, true, 4, 4, 6, None, None)
                .unwrap();
        let c = random_centers(&mut r, 4, 6);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let cv = tape.leaf(&c);
            let z = map_to_gaussian_and_sample(&mut tape, &params, cv, 4, &mut rng(seed)).unwrap();
            tape.data(z).to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn gaussian_sampling_requires_flag() {
        let mut r = rng(13);
        let params =
            MappingParams::init(&mut r, MappingVariant::SharedMlp, false, 4, 4, 6, None, None)
                .unwrap();
        let c = random_centers(&mut r, 4, 6);
        let mut tape = Tape::new();
        let cv = tape.leaf(&c);
        assert!(matches!(
            map_to_gaussian_and_sample(&mut tape, &params, cv, 4, &mut rng(0)),
            Err(Error::UnsupportedVariant(_))
        ));
    }

    /// Monte Carlo check of the reparameterized sampler's first moment.
    #[test]
    fn gaussian_sample_mean_approaches_mu() {
        let mut r = rng(14);
        let mut params =
            MappingParams::init(&mut r, MappingVariant::SharedMlp, true, 1, 1, 2, None, None)
                .unwrap();
        let net = params.net.as_mut().unwrap();
        for layer in &mut net.layers {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
            for v in layer.bias.data_mut() {
                *v = 0.0;
            }
        }
        let mu = [0.4, -1.1];
        let sigma = 0.5f64;
        let last = net.layers.last_mut().unwrap();
        let bias = last.bias.data_mut();
        bias[0] = mu[0];
        bias[1] = mu[1];
        bias[2] = sigma.ln();
        bias[3] = sigma.ln();
        let c = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let draws = 100_000usize;
        let mut sums = [0.0f64; 2];
        let mut sampler = rng(999);
        for _ in 0..draws {
            let (z, _) = params.map(&c, 1, Some(&mut sampler)).unwrap();
            sums[0] += z.data()[0];
            sums[1] += z.data()[1];
        }
        let bound = 3.0 * sigma / (draws as f64).sqrt();
        for dim in 0..2 {
            let mean = sums[dim] / draws as f64;
            assert!((mean - mu[dim]).abs() < bound, "dim {dim}: {mean} vs {}", mu[dim]);
        }
    }

    #[test]
    fn combination_table_enforced() {
        assert!(validate_combination(InitMethod::Meanshift, MappingVariant::LargeMlp, false).is_err());
        assert!(validate_combination(InitMethod::Meanshift, MappingVariant::SharedMlp, false).is_ok());
        assert!(validate_combination(InitMethod::Kmeans, MappingVariant::Direct, true).is_err());
        assert!(validate_combination(InitMethod::Kmeans, MappingVariant::Pseudoweights, true).is_ok());
    }

    #[test]
    fn cluster_counts_follow_the_mapping() {
        assert_eq!(cluster_count_for(MappingVariant::Pseudoweights, 5), 10);
        assert_eq!(cluster_count_for(MappingVariant::LargeMlp, 7), 14);
        assert_eq!(cluster_count_for(MappingVariant::Direct, 5), 5);
        assert_eq!(cluster_count_for(MappingVariant::SharedMlp, 5), 5);
    }

    #[test]
    fn init_slots_meanshift_discovers_blob_count() {
        let mut r = rng(20);
        // Three tight 2-D blobs in feature space.
        let mut data = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)] {
            for _ in 0..30 {
                data.push(cx + r.gen_range(-0.2..0.2));
                data.push(cy + r.gen_range(-0.2..0.2));
            }
        }
        let features = Tensor::new(vec![90, 2], data).unwrap();
        let mut map_rng = rng(21);
        let mapping =
            MappingParams::init(&mut map_rng, MappingVariant::SharedMlp, false, 1, 1, 2, None, None)
                .unwrap();
        let init = SlotInit::Clustered {
            method: InitMethod::Meanshift,
            mapping,
        };
        let opts = ClusteringOptions {
            meanshift: MeanShiftConfig {
                sigma: 0.6,
                epsilon: 0.3,
                initial_centers: 15,
                max_iterations: 100,
                fixed_point_tolerance: 1e-6,
            },
            ..Default::default()
        };
        let mut tape = Tape::new();
        let vals = init.register(&mut tape);
        let f = tape.leaf(&features);
        let out = init_slots(&mut tape, &init, &vals, f, 0, &opts, &mut rng(22), None).unwrap();
        assert_eq!(out.discovered_k, 3);
        assert_eq!(tape.dims(out.slots), &[3, 2]);
    }

    #[test]
    fn init_slots_kmeans_requests_double_clusters_for_pseudoweights() {
        let mut r = rng(30);
        let features = random_centers(&mut r, 40, 4);
        let mapping =
            MappingParams::init(&mut r, MappingVariant::Pseudoweights, false, 5, 10, 4, None, None)
                .unwrap();
        let init = SlotInit::Clustered {
            method: InitMethod::Kmeans,
            mapping,
        };
        let mut tape = Tape::new();
        let vals = init.register(&mut tape);
        let f = tape.leaf(&features);
        let out = init_slots(
            &mut tape,
            &init,
            &vals,
            f,
            5,
            &ClusteringOptions::default(),
            &mut rng(31),
            None,
        )
        .unwrap();
        assert_eq!(tape.dims(out.slots), &[5, 4]);
        match out.frozen {
            FrozenClustering::Kmeans { ref averaging, .. } => {
                assert_eq!(averaging.dims(), &[10, 40]);
            }
            _ => panic!("expected frozen kmeans"),
        }
    }

    #[test]
    fn init_slots_random_is_standard_gaussian_shaped() {
        let init = SlotInit::random(6);
        let mut tape = Tape::new();
        let vals = init.register(&mut tape);
        let features = Tensor::zeros(vec![10, 6]);
        let f = tape.leaf(&features);
        let out = init_slots(
            &mut tape,
            &init,
            &vals,
            f,
            4,
            &ClusteringOptions::default(),
            &mut rng(40),
            None,
        )
        .unwrap();
        assert_eq!(tape.dims(out.slots), &[4, 6]);
        assert_eq!(out.origin, SlotOrigin::Random);
    }
}
