//! Desk-scale reconstruction pipeline: convolutional encoder, iterative
//! slot-attention refinement, spatial-broadcast decoder, and the
//! alpha-composited renderer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{ConvLayer, ConvVals, Linear, LinearVals, Mlp, MlpVals};
use crate::slotinit::{
    init_slots, FrozenClustering, InitMethod, MappingParams, SlotInit,
    SlotInitVals, SlotOrigin,
};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Normalized pixel-center coordinate grid, row-major, N x 2 in [0, 1].
pub fn coordinate_grid(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(if w > 1 { x as f64 / (w - 1) as f64 } else { 0.5 });
            data.push(if h > 1 { y as f64 / (h - 1) as f64 } else { 0.5 });
        }
    }
    Tensor::new(vec![h * w, 2], data).unwrap()
}

/// Two same-size conv stages plus a learned projection of pixel
/// coordinates added to the flattened features.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub coord_proj: Tensor, // 2 x D
}

impl EncoderParams {
    pub fn init(rng: &mut ChaCha8Rng, hidden: usize, d: usize) -> Self {
        use rand::Rng;
        let a = (6.0 / (2 + d) as f64).sqrt();
        let proj: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-a..a)).collect();
        EncoderParams {
            conv1: ConvLayer::init(rng, 3, hidden),
            conv2: ConvLayer::init(rng, hidden, d),
            coord_proj: Tensor::new(vec![2, d], proj).unwrap().with_grad(true),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVals {
        EncoderVals {
            conv1: self.conv1.register(tape),
            conv2: self.conv2.register(tape),
            coord_proj: tape.leaf(&self.coord_proj),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        out.push((format!("{prefix}.coord_proj"), &self.coord_proj));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv1.collect_mut(&format!("{prefix}.conv1"), out);
        self.conv2.collect_mut(&format!("{prefix}.conv2"), out);
        out.push((format!("{prefix}.coord_proj"), &mut self.coord_proj));
    }
}

pub struct EncoderVals {
    pub conv1: ConvVals,
    pub conv2: ConvVals,
    pub coord_proj: Val,
}

/// Encodes an H x W x 3 image into an N x D feature grid with coordinate
/// information injected, so clustering can separate same-colored objects.
pub fn encode(
    tape: &mut Tape,
    vals: &EncoderVals,
    image: Val,
    coords: Val,
    d: usize,
) -> Result<Val> {
    let dims = tape.dims(image).to_vec();
    if dims.len() != 3 || dims[2] != 3 {
        return Err(Error::Shape {
            op: "encode",
            lhs: format!("{dims:?}"),
            rhs: "H x W x 3 image required".into(),
        });
    }
    let (h, w) = (dims[0], dims[1]);
    let h1 = vals.conv1.apply(tape, image)?;
    let h1 = tape.relu(h1)?;
    let h2 = vals.conv2.apply(tape, h1)?;
    let flat = tape.reshape(h2, vec![h * w, d])?;
    let pos = tape.matmul(coords, vals.coord_proj)?;
    tape.add(flat, pos)
}

/// Slot-attention refinement parameters: query/key/value projections, a
/// single-gate recurrent update, and a residual feed-forward block.
#[derive(Debug, Clone)]
pub struct RefinementParams {
    pub query_proj: Tensor, // D x D
    pub key_proj: Tensor,
    pub value_proj: Tensor,
    pub gate: Linear,      // 2D -> D
    pub candidate: Linear, // 2D -> D
    pub residual: Mlp,     // D -> 2D -> D
}

impl RefinementParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        use rand::Rng;
        let a = (6.0 / (2 * d) as f64).sqrt();
        let mut square = || -> Tensor {
            let data: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(vec![d, d], data).unwrap().with_grad(true)
        };
        let query_proj = square();
        let key_proj = square();
        let value_proj = square();
        RefinementParams {
            query_proj,
            key_proj,
            value_proj,
            gate: Linear::init(rng, 2 * d, d),
            candidate: Linear::init(rng, 2 * d, d),
            residual: Mlp::init(rng, &[d, 2 * d, d]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> RefinementVals {
        RefinementVals {
            query_proj: tape.leaf(&self.query_proj),
            key_proj: tape.leaf(&self.key_proj),
            value_proj: tape.leaf(&self.value_proj),
            gate: self.gate.register(tape),
            candidate: self.candidate.register(tape),
            residual: self.residual.register(tape),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.query_proj"), &self.query_proj));
        out.push((format!("{prefix}.key_proj"), &self.key_proj));
        out.push((format!("{prefix}.value_proj"), &self.value_proj));
        self.gate.collect(&format!("{prefix}.gate"), out);
        self.candidate.collect(&format!("{prefix}.candidate"), out);
        self.residual.collect(&format!("{prefix}.residual"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.query_proj"), &mut self.query_proj));
        out.push((format!("{prefix}.key_proj"), &mut self.key_proj));
        out.push((format!("{prefix}.value_proj"), &mut self.value_proj));
        self.gate.collect_mut(&format!("{prefix}.gate"), out);
        self.candidate.collect_mut(&format!("{prefix}.candidate"), out);
        self.residual.collect_mut(&format!("{prefix}.residual"), out);
    }
}

pub struct RefinementVals {
    pub query_proj: Val,
    pub key_proj: Val,
    pub value_proj: Val,
    pub gate: LinearVals,
    pub candidate: LinearVals,
    pub residual: MlpVals,
}

/// Iteratively updates slots against the feature grid. Per iteration the
/// attention softmax runs over the slot axis (slots compete for pixels),
/// the per-slot aggregate renormalizes over pixels, and a gated recurrent
/// update plus a residual feed-forward block absorb it. Zero iterations
/// return the input unchanged.
pub fn refine_slots(
    tape: &mut Tape,
    vals: &RefinementVals,
    slots: Val,
    features: Val,
    iterations: usize,
) -> Result<(Val, Option<Val>)> {
    let sdims = tape.dims(slots).to_vec();
    if sdims.is_empty() || sdims[0] == 0 {
        return Err(Error::DegenerateInput("refine_slots with zero slots".into()));
    }
    let (k, d) = (sdims[0], sdims[1]);
    let scale = 1.0 / (d as f64).sqrt();
    let keys = tape.matmul(features, vals.key_proj)?;
    let values = tape.matmul(features, vals.value_proj)?;
    let ones = tape.constant(vec![k, d], vec![1.0; k * d]);
    let mut current = slots;
    let mut last_attention = None;
    for _ in 0..iterations {
        let queries = tape.matmul(current, vals.query_proj)?;
        let queries_t = tape.transpose(queries)?;
        let logits = tape.matmul(keys, queries_t)?;
        let logits = tape.scale(logits, scale)?;
        let attention = tape.softmax_axis(logits, 1)?;
        last_attention = Some(attention);
        let per_slot_mass = tape.reduce_sum(attention, 0)?;
        let normalized = tape.div(attention, per_slot_mass)?;
        let normalized_t = tape.transpose(normalized)?;
        let aggregate = tape.matmul(normalized_t, values)?;
        let joint = tape.concat_cols(current, aggregate)?;
        let gate_pre = vals.gate.apply(tape, joint)?;
        let gate = tape.sigmoid(gate_pre)?;
        let cand_pre = vals.candidate.apply(tape, joint)?;
        let cand = tape.tanh(cand_pre)?;
        let keep = tape.sub(ones, gate)?;
        let kept = tape.mul(keep, current)?;
        let injected = tape.mul(gate, cand)?;
        let gated = tape.add(kept, injected)?;
        let res = vals.residual.apply(tape, gated)?;
        current = tape.add(gated, res)?;
    }
    Ok((current, last_attention))
}

/// Spatial-broadcast decoder output.
pub struct Rendered {
    /// N x 3 composited reconstruction.
    pub reconstruction: Val,
    /// K x N alpha masks (softmax over slots per pixel).
    pub masks: Val,
    /// (K*N) x 3 per-slot rgb, slot-major.
    pub rgbs: Val,
}

/// Broadcasts each slot across the coordinate grid, decodes rgb plus an
/// alpha logit per pixel, and composites with a per-pixel softmax over
/// slots: reconstruction = sum_k mask_k * rgb_k.
pub fn decode_and_render(
    tape: &mut Tape,
    decoder: &MlpVals,
    slots: Val,
    coords: Val,
    h: usize,
    w: usize,
) -> Result<Rendered> {
    let sdims = tape.dims(slots).to_vec();
    let (k, d) = (sdims[0], sdims[1]);
    let n = h * w;
    let slot_rows: Vec<usize> = (0..k).flat_map(|s| std::iter::repeat(s).take(n)).collect();
    let broadcast = tape.gather_rows(slots, &slot_rows)?;
    let coord_rows: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
    let coords_tiled = tape.gather_rows(coords, &coord_rows)?;
    let joint = tape.concat_cols(broadcast, coords_tiled)?;
    let got = tape.dims(joint)[1];
    if got != d + 2 {
        return Err(Error::Shape {
            op: "decode_and_render",
            lhs: format!("decoder input width {got}"),
            rhs: format!("expected {}", d + 2),
        });
    }
    let out = decoder.apply(tape, joint)?;
    let rgb_pre = tape.slice_cols(out, 0, 3)?;
    let rgbs = tape.sigmoid(rgb_pre)?;
    let alpha = tape.slice_cols(out, 3, 4)?;
    let alpha_grid = tape.reshape(alpha, vec![k, n])?;
    let masks = tape.softmax_axis(alpha_grid, 0)?;
    let mask_col = tape.reshape(masks, vec![k * n, 1])?;
    let ones3 = tape.constant(vec![1, 3], vec![1.0; 3]);
    let mask3 = tape.matmul(mask_col, ones3)?;
    let weighted = tape.mul(rgbs, mask3)?;
    let stacked = tape.reshape(weighted, vec![k, n * 3])?;
    let summed = tape.reduce_sum(stacked, 0)?;
    let reconstruction = tape.reshape(summed, vec![n, 3])?;
    Ok(Rendered {
        reconstruction,
        masks,
        rgbs,
    })
}

/// Mean squared error over all pixels and channels.
pub fn reconstruction_loss(tape: &mut Tape, reconstruction: Val, target: Val) -> Result<Val> {
    if tape.dims(reconstruction) != tape.dims(target) {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            lhs: format!("{:?}", tape.dims(reconstruction)),
            rhs: format!("{:?}", tape.dims(target)),
        });
    }
    let diff = tape.sub(reconstruction, target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean_all(sq))
}

/// Per-pixel argmax over the slot axis; ties go to the lowest slot index.
pub fn segment(masks: &Tensor) -> Result<Vec<usize>> {
    let (k, n) = match masks.dims() {
        [k, n] => (*k, *n),
        [k, h, w] => (*k, h * w),
        other => {
            return Err(Error::Shape {
                op: "segment",
                lhs: format!("{other:?}"),
                rhs: "K x N or K x H x W masks required".into(),
            })
        }
    };
    let data = masks.data();
    let mut labels = vec![0usize; n];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = data[p];
        for slot in 1..k {
            let v = data[slot * n + p];
            if v > best_v {
                best_v = v;
                best = slot;
            }
        }
        *label = best;
    }
    Ok(labels)
}

// ── Full model ──────────────────────────────────────────────────────

/// All learnable state of the reconstruction pipeline.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: EncoderParams,
    pub init: SlotInit,
    pub refine: RefinementParams,
    pub decoder: Mlp,
    pub config: RunConfig,
    /// Bandwidth actually in use (calibrated or configured).
    pub sigma: f64,
    pub epsilon: f64,
}

pub struct ModelVals {
    pub encoder: EncoderVals,
    pub init: SlotInitVals,
    pub refine: RefinementVals,
    pub decoder: MlpVals,
    /// Every learnable leaf in `collect` order.
    pub ordered: Vec<Val>,
}

/// Diagnostics of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardDiagnostics {
    pub discovered_k: usize,
    pub clustering_iterations: usize,
    /// Mean per-pixel entropy of the final attention map (nats).
    pub attention_entropy: f64,
    pub origin: SlotOrigin,
}

pub struct BuiltForward {
    pub reconstruction: Val,
    pub masks: Val,
    pub slots: Val,
    pub diagnostics: ForwardDiagnostics,
    pub frozen: FrozenClustering,
}

/// Detached forward results.
pub struct ForwardOutput {
    /// H x W x 3 reconstruction.
    pub reconstruction: Tensor,
    /// K x H x W masks.
    pub masks: Tensor,
    /// K x D slots after refinement.
    pub slots: Tensor,
    pub diagnostics: ForwardDiagnostics,
    pub frozen: FrozenClustering,
}

impl Model {
    /// Fresh model from a validated config. `sigma`/`epsilon` fall back to
    /// placeholder defaults until calibration resolves them.
    pub fn init(rng: &mut ChaCha8Rng, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let init = match config.method {
            InitMethod::Random => SlotInit::random(d),
            method => SlotInit::Clustered {
                method,
                mapping: MappingParams::init(
                    rng,
                    config.mapping,
                    config.gaussian_output,
                    config.k,
                    config.cluster_count(),
                    d,
                    config.mapping_hidden,
                    config.mapping_depth,
                )?,
            },
        };
        let mut decoder_widths = vec![d + 2];
        for _ in 0..config.decoder_depth.max(1) - 1 {
            decoder_widths.push(config.decoder_hidden);
        }
        decoder_widths.push(4);
        Ok(Model {
            encoder: EncoderParams::init(rng, config.conv1_channels, d),
            init,
            refine: RefinementParams::init(rng, d),
            decoder: Mlp::init(rng, &decoder_widths),
            config: config.clone(),
            sigma: config.sigma.unwrap_or(1.0),
            epsilon: config.epsilon.or(config.sigma.map(|s| s / 2.0)).unwrap_or(0.5),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVals {
        let encoder = self.encoder.register(tape);
        let init = self.init.register(tape);
        let refine = self.refine.register(tape);
        let decoder = self.decoder.register(tape);
        let mut ordered = vec![
            encoder.conv1.kernels,
            encoder.conv1.bias,
            encoder.conv2.kernels,
            encoder.conv2.bias,
            encoder.coord_proj,
        ];
        if let Some((mu, log_sigma)) = init.random {
            ordered.push(mu);
            ordered.push(log_sigma);
        }
        if let Some(mapping) = &init.mapping {
            if let Some(net) = &mapping.net {
                for layer in &net.layers {
                    ordered.push(layer.weight);
                    ordered.push(layer.bias);
                }
            }
        }
        ordered.push(refine.query_proj);
        ordered.push(refine.key_proj);
        ordered.push(refine.value_proj);
        ordered.push(refine.gate.weight);
        ordered.push(refine.gate.bias);
        ordered.push(refine.candidate.weight);
        ordered.push(refine.candidate.bias);
        for layer in &refine.residual.layers {
            ordered.push(layer.weight);
            ordered.push(layer.bias);
        }
        for layer in &decoder.layers {
            ordered.push(layer.weight);
            ordered.push(layer.bias);
        }
        ModelVals {
            encoder,
            init,
            refine,
            decoder,
            ordered,
        }
    }

    /// Rebuilds a `ModelVals` from externally created leaves in `collect`
    /// order, so a gradient checker can own the leaf tensors.
    pub fn vals_from_ordered(&self, vals: &[Val]) -> ModelVals {
        let mut it = vals.iter().copied();
        let mut next = || it.next().expect("enough leaf vals for the architecture");
        let encoder = EncoderVals {
            conv1: crate::params::ConvVals {
                kernels: next(),
                bias: next(),
            },
            conv2: crate::params::ConvVals {
                kernels: next(),
                bias: next(),
            },
            coord_proj: next(),
        };
        let init = match &self.init {
            SlotInit::Random { .. } => SlotInitVals {
                mapping: None,
                random: Some((next(), next())),
            },
            SlotInit::Clustered { mapping, .. } => {
                let net = mapping.net.as_ref().map(|n| {
                    let taken: Vec<Val> = (0..n.layers.len() * 2).map(|_| next()).collect();
                    crate::params::MlpVals::from_ordered(&taken)
                });
                SlotInitVals {
                    mapping: Some(crate::slotinit::MappingVals { net }),
                    random: None,
                }
            }
        };
        let refine = RefinementVals {
            query_proj: next(),
            key_proj: next(),
            value_proj: next(),
            gate: crate::params::LinearVals {
                weight: next(),
                bias: next(),
            },
            candidate: crate::params::LinearVals {
                weight: next(),
                bias: next(),
            },
            residual: {
                let taken: Vec<Val> =
                    (0..self.refine.residual.layers.len() * 2).map(|_| next()).collect();
                crate::params::MlpVals::from_ordered(&taken)
            },
        };
        let decoder = {
            let taken: Vec<Val> = (0..self.decoder.layers.len() * 2).map(|_| next()).collect();
            crate::params::MlpVals::from_ordered(&taken)
        };
        ModelVals {
            encoder,
            init,
            refine,
            decoder,
            ordered: vals.to_vec(),
        }
    }

    /// Named parameter views in the same order as `ModelVals::ordered`.
    pub fn collect(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect("encoder", &mut out);
        self.init.collect("init", &mut out);
        self.refine.collect("refine", &mut out);
        self.decoder.collect("decoder", &mut out);
        out
    }

    pub fn collect_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect_mut("encoder", &mut out);
        self.init.collect_mut("init", &mut out);
        self.refine.collect_mut("refine", &mut out);
        self.decoder.collect_mut("decoder", &mut out);
        out
    }

    /// Builds the full differentiable graph on `tape`: encode, initialize
    /// slots, refine for `iterations`, decode, composite.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        vals: &ModelVals,
        image: &Tensor,
        iterations: usize,
        rng: &mut ChaCha8Rng,
        freeze: Option<&FrozenClustering>,
    ) -> Result<BuiltForward> {
        let dims = image.dims();
        if dims.len() != 3 || dims[2] != 3 {
            return Err(Error::Shape {
                op: "forward",
                lhs: format!("{dims:?}"),
                rhs: "H x W x 3 image required".into(),
            });
        }
        let (h, w) = (dims[0], dims[1]);
        let image_val = tape.constant(dims.to_vec(), image.data().to_vec());
        let coords = coordinate_grid(h, w);
        let coords_val = tape.constant(coords.dims().to_vec(), coords.data().to_vec());
        let features = encode(tape, &vals.encoder, image_val, coords_val, self.config.d)?;
        let opts = self
            .config
            .clustering_options(self.sigma, self.epsilon);
        let outcome = init_slots(
            tape,
            &self.init,
            &vals.init,
            features,
            self.config.k,
            &opts,
            rng,
            freeze,
        )?;
        let (slots, attention) =
            refine_slots(tape, &vals.refine, outcome.slots, features, iterations)?;
        let rendered = decode_and_render(tape, &vals.decoder, slots, coords_val, h, w)?;
        let attention_entropy = attention
            .map(|a| mean_attention_entropy(tape.data(a), tape.dims(a)[1]))
            .unwrap_or(0.0);
        Ok(BuiltForward {
            reconstruction: rendered.reconstruction,
            masks: rendered.masks,
            slots,
            diagnostics: ForwardDiagnostics {
                discovered_k: outcome.discovered_k,
                clustering_iterations: outcome.clustering_iterations,
                attention_entropy,
                origin: outcome.origin,
            },
            frozen: outcome.frozen,
        })
    }

    /// Runs the pipeline on a private tape and detaches the results.
    pub fn forward(
        &self,
        image: &Tensor,
        iterations: usize,
        seed: u64,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vals = self.register(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let built = self.build_forward(&mut tape, &vals, image, iterations, &mut rng, None)?;
        let (h, w) = (image.dims()[0], image.dims()[1]);
        let k = tape.dims(built.masks)[0];
        let recon = Tensor::new(
            vec![h, w, 3],
            tape.data(built.reconstruction).to_vec(),
        )?;
        let masks = Tensor::new(vec![k, h, w], tape.data(built.masks).to_vec())?;
        Ok(ForwardOutput {
            reconstruction: recon,
            masks,
            slots: tape.to_tensor(built.slots),
            diagnostics: built.diagnostics,
            frozen: built.frozen,
        })
    }
}

fn mean_attention_entropy(attention: &[f64], k: usize) -> f64 {
    let n = attention.len() / k;
    let mut total = 0.0;
    for p in 0..n {
        for s in 0..k {
            let a = attention[p * k + s];
            if a > 0.0 {
                total -= a * a.ln();
            }
        }
    }
    total / n as f64
}
