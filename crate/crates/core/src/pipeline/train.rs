use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{compute_bounds, AnchorSet, AttributeGroup, AttributeLayout};
use crate::entropy::{gmm_on_tape, prob_on_tape, rate_on_tape, ContextModel};
use crate::location::quantize_locations;
use crate::masking::{anchor_mask, gaussian_mask, masked_offset_distortion, MaskState};
use crate::quantizer::{quantize_train, step_size_on_tape, uniform_noise};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamState, ParamId, Tape, Tensor, TensorError, Var};

use super::{Model, Phase, PipelineError, TrainConfig};

/// One evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub phase: u8,
    pub d_surr: f64,
    /// Estimated attribute bits over all anchors.
    pub entropy_bits: f64,
    pub hash_bits: f64,
    pub total: f64,
}

/// Attributes and lattice coordinates in input order.
#[derive(Debug, Clone)]
pub struct TrainData<S> {
    pub layout: AttributeLayout,
    pub coords: Vec<[S; 3]>,
    /// Row-major per group, indexed by [`AttributeGroup::index`].
    pub groups: [Vec<S>; 3],
}

impl<S: Scalar> TrainData<S> {
    pub fn new(anchors: &AnchorSet, bounds: &crate::anchor::SceneBounds) -> Self {
        let q = quantize_locations(&anchors.locations, bounds);
        let mut coords = vec![[S::zero(); 3]; anchors.len()];
        for (x, &i) in q.normalized().iter().zip(&q.order) {
            coords[i] = x.map(|v| S::c(v as f64));
        }
        let conv = |v: &[f32]| v.iter().map(|&x| S::c(x as f64)).collect::<Vec<S>>();
        TrainData {
            layout: anchors.layout,
            coords,
            groups: [
                conv(&anchors.features),
                conv(&anchors.scalings),
                conv(&anchors.offsets),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn rows(&self, g: AttributeGroup, rows: &[usize]) -> Tensor<S> {
        let d = self.layout.dim(g);
        let src = &self.groups[g.index()];
        let mut v = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            v.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        Tensor::new(rows.len(), d, v)
    }
}

/// Graph nodes of one loss evaluation.
pub struct LossGraph {
    pub loss: Var,
    pub d_surr: Var,
    pub entropy: Option<Var>,
    pub hash: Option<Var>,
    pub batch: usize,
}

/// Inputs of one loss evaluation besides the model.
pub struct LossInputs<'a, S> {
    pub data: &'a TrainData<S>,
    pub mask_logits: ParamId,
    pub rows: &'a [usize],
    /// Uniform draws in `[-½, ½)`, `rows × P`, or `None` for no noise.
    pub noise: Option<&'a [S]>,
    pub phase: Phase,
    pub config: &'a TrainConfig,
}

fn split_noise<S: Scalar>(layout: AttributeLayout, rows: usize, u: &[S]) -> [Tensor<S>; 3] {
    let p = layout.total();
    AttributeGroup::ALL.map(|g| {
        let (s, d) = (layout.start(g), layout.dim(g));
        let mut v = Vec::with_capacity(rows * d);
        for r in 0..rows {
            v.extend_from_slice(&u[r * p + s..r * p + s + d]);
        }
        Tensor::new(rows, d, v)
    })
}

fn feature_probs<S: Scalar>(
    tape: &mut Tape<S>,
    model: &ContextModel,
    store: &crate::tensor::ParamStore<S>,
    hac: &crate::entropy::HacVars,
    x: Var,
    q: Var,
) -> Result<Var, PipelineError> {
    let da = model.layout.feature_dim;
    let mu = tape.slice_cols(hac.mu, 0, da);
    let sigma = tape.slice_cols(hac.sigma, 0, da);
    if !model.has_intra() {
        return Ok(prob_on_tape(tape, x, q, mu, sigma));
    }
    let pi = tape.slice_cols(hac.pi, 0, da);
    let c = model.chunk_width();
    let mut parts = Vec::with_capacity(model.config.chunks);
    for n in 0..model.config.chunks {
        let prefix = (n > 0).then(|| tape.slice_cols(x, 0, n * c));
        let cv = model.intra_on_tape(tape, store, prefix, hac, n)?;
        let (a, b) = (n * c, (n + 1) * c);
        let xs = tape.slice_cols(x, a, b);
        let qs = tape.slice_cols(q, a, b);
        let s = (
            tape.slice_cols(mu, a, b),
            tape.slice_cols(sigma, a, b),
            tape.slice_cols(pi, a, b),
        );
        parts.push(gmm_on_tape(tape, xs, qs, s, (cv.mu, cv.sigma, cv.pi)));
    }
    Ok(tape.concat_cols(&parts))
}

/// Records the objective for the anchors in `inputs.rows`.
pub fn build_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    inputs: &LossInputs<'_, S>,
) -> Result<LossGraph, PipelineError> {
    let data = inputs.data;
    let layout = data.layout;
    let rows = inputs.rows;
    let b = rows.len();
    let n_total = data.len();
    let p = layout.total();
    let cfg = inputs.config;
    let store = &model.store;

    let logits = tape.param_rows(store, inputs.mask_logits, rows);
    let m = gaussian_mask(tape, logits, cfg.mask_threshold)?;

    let x = AttributeGroup::ALL.map(|g| tape.leaf(data.rows(g, rows)));
    let noise = inputs.noise.map(|u| split_noise(layout, b, u));

    let mut hac = None;
    let mut hash = None;
    let mut steps: Vec<Option<Var>> = vec![None; 3];
    if inputs.phase == Phase::Full {
        let table = model.grid.binarized_on_tape(tape, store);
        let plan = Rc::new(
            model
                .grid
                .plan(&rows.iter().map(|&r| data.coords[r]).collect::<Vec<_>>()),
        );
        let fh = model.grid.features_on_tape(tape, table, plan);
        let h = model.context.hac_on_tape(tape, store, fh)?;
        for g in AttributeGroup::ALL {
            let r = tape.slice_cols(h.r, g.index(), g.index() + 1);
            let q = step_size_on_tape(tape, r, S::c(model.quant.q0(g) as f64));
            steps[g.index()] = Some(tape.repeat_each(q, layout.dim(g)));
        }
        hash = Some(tape.hash_rate(table));
        hac = Some(h);
    } else if noise.is_some() {
        for g in AttributeGroup::ALL {
            let q0 = S::c(model.quant.q0(g) as f64);
            let t = Tensor::new(b, layout.dim(g), vec![q0; b * layout.dim(g)]);
            steps[g.index()] = Some(tape.leaf(t));
        }
    }

    let noisy: [Var; 3] = AttributeGroup::ALL.map(|g| {
        let i = g.index();
        match (&noise, steps[i]) {
            (Some(u), Some(q)) => {
                let uv = tape.leaf(u[i].clone());
                quantize_train(tape, x[i], q, uv)
            }
            _ => x[i],
        }
    });

    let w = cfg.distortion.as_array();
    let mut d_terms = Vec::with_capacity(3);
    for g in [AttributeGroup::Feature, AttributeGroup::Scaling] {
        let i = g.index();
        let e = tape.sub(noisy[i], x[i]);
        let sq = tape.mul(e, e);
        let s = tape.sum(sq);
        d_terms.push(tape.scale(s, S::c(w[i])));
    }
    let od = masked_offset_distortion(tape, m, noisy[2], x[2]);
    let od = tape.sum(od);
    d_terms.push(tape.scale(od, S::c(w[2])));
    let d01 = tape.add(d_terms[0], d_terms[1]);
    let d_all = tape.add(d01, d_terms[2]);
    let d_surr = tape.scale(d_all, S::c(1.0 / (b * p) as f64));

    let mut entropy = None;
    let mut loss = d_surr;
    if let (Some(h), Some(hb)) = (&hac, hash) {
        let qv = steps
            .iter()
            .map(|s| s.expect("steps exist in full phase"))
            .collect::<Vec<_>>();
        let pf = feature_probs(tape, &model.context, store, h, noisy[0], qv[0])?;
        let (da, ls) = (layout.feature_dim, AttributeLayout::SCALING_DIM);
        let mu_l = tape.slice_cols(h.mu, da, da + ls);
        let sg_l = tape.slice_cols(h.sigma, da, da + ls);
        let pl = prob_on_tape(tape, noisy[1], qv[1], mu_l, sg_l);
        let mu_o = tape.slice_cols(h.mu, da + ls, p);
        let sg_o = tape.slice_cols(h.sigma, da + ls, p);
        let po = prob_on_tape(tape, noisy[2], qv[2], mu_o, sg_o);
        let bits = [pf, pl, po].map(|v| tape.neg_log2(v));
        let ma = anchor_mask(tape, m)?;
        let per_anchor = rate_on_tape(tape, bits[0], bits[1], bits[2], m, ma);
        let ent = tape.sum(per_anchor);
        let ent_scaled = tape.scale(ent, S::c(1.0 / (b * p) as f64));
        let hash_scaled = tape.scale(hb, S::c(1.0 / (n_total * p) as f64));
        let rate = tape.add(ent_scaled, hash_scaled);
        let rate = tape.scale(rate, S::c(cfg.lambda));
        loss = tape.add(d_surr, rate);
        entropy = Some(ent);
    }
    Ok(LossGraph {
        loss,
        d_surr,
        entropy,
        hash,
        batch: b,
    })
}

/// Training state over a fixed anchor set.
pub struct Trainer<S> {
    pub model: Model<S>,
    pub mask_logits: ParamId,
    pub config: TrainConfig,
    pub data: TrainData<S>,
    adam: AdamState,
    pub history: Vec<LossReport>,
    next: usize,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub masks: MaskState,
    pub history: Vec<LossReport>,
}

fn static_stats<S: Scalar>(data: &TrainData<S>) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for g in AttributeGroup::ALL {
        let d = data.layout.dim(g);
        let v = &data.groups[g.index()];
        for j in 0..d {
            let m = (0..data.len()).map(|i| v[i * d + j].to_f64_()).sum::<f64>() / n;
            let var = (0..data.len())
                .map(|i| (v[i * d + j].to_f64_() - m).powi(2))
                .sum::<f64>()
                / n;
            mean.push(m);
            std.push(var.sqrt().max(1e-3 * data_scale(g)));
        }
    }
    (mean, std)
}

fn data_scale(g: AttributeGroup) -> f64 {
    g.default_q0() as f64
}

impl<S: Scalar> Trainer<S> {
    pub fn new(anchors: &AnchorSet, config: TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        anchors.validate()?;
        let bounds = compute_bounds(anchors, config.bounds_margin)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Model::new(
            anchors.layout,
            config.grid.clone(),
            config.context.clone(),
            config.quant,
            bounds,
            config.grid_init,
            &mut rng,
        )?;
        let data = TrainData::new(anchors, &bounds);
        let (mean, std) = static_stats(&data);
        model.context.init_output(&mut model.store, &mean, &std);
        let k = anchors.layout.offsets_per_anchor;
        let mask_logits = model.store.add(
            "mask_logits",
            Tensor::new(
                anchors.len(),
                k,
                vec![S::c(config.mask_init); anchors.len() * k],
            ),
        );
        let lr = config.lr_context;
        {
            let p = model.store.get_mut(mask_logits);
            p.row_sparse = true;
            p.lr_scale = config.lr_mask / lr;
        }
        model.store.get_mut(model.grid.table).lr_scale = config.lr_grid / lr;
        Ok(Trainer {
            model,
            mask_logits,
            config,
            data,
            adam: AdamState::new(),
            history: Vec::new(),
            next: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.next
    }

    /// Sampled anchor rows of an iteration, ascending.
    pub fn sample_rows(&self, iteration: usize, fraction: f64) -> Vec<usize> {
        let n = self.data.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);
        if k == n {
            return (0..n).collect();
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED_0000_0000 ^ iteration as u64);
        let mut rows = sample(&mut rng, n, k).into_vec();
        rows.sort_unstable();
        rows
    }

    fn noise_for(&self, iteration: usize, rows: &[usize], phase: Phase) -> Option<Vec<S>> {
        (phase != Phase::Warmup).then(|| {
            uniform_noise(
                self.config.seed,
                iteration as u64,
                rows,
                self.data.layout.total(),
            )
        })
    }

    /// Loss of `iteration` on a sample of the given fraction, without a step.
    pub fn evaluate_loss(
        &self,
        iteration: usize,
        fraction: f64,
    ) -> Result<LossReport, PipelineError> {
        let phase = self.config.phase(iteration);
        let rows = self.sample_rows(iteration, fraction);
        let noise = self.noise_for(iteration, &rows, phase);
        let mut tape = Tape::new();
        let g = build_loss(
            &mut tape,
            &self.model,
            &LossInputs {
                data: &self.data,
                mask_logits: self.mask_logits,
                rows: &rows,
                noise: noise.as_deref(),
                phase,
                config: &self.config,
            },
        )?;
        Ok(self.report(&tape, &g, iteration, phase))
    }

    fn report(&self, tape: &Tape<S>, g: &LossGraph, iteration: usize, phase: Phase) -> LossReport {
        let n = self.data.len() as f64;
        LossReport {
            iteration,
            phase: phase.number(),
            d_surr: tape.scalar(g.d_surr).to_f64_(),
            entropy_bits: g
                .entropy
                .map_or(0.0, |e| tape.scalar(e).to_f64_() * n / g.batch as f64),
            hash_bits: g.hash.map_or(0.0, |h| tape.scalar(h).to_f64_()),
            total: tape.scalar(g.loss).to_f64_(),
        }
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<LossReport, PipelineError> {
        let it = self.next;
        let phase = self.config.phase(it);
        let rows = self.sample_rows(it, self.config.sample_fraction);
        let noise = self.noise_for(it, &rows, phase);
        let mut tape = Tape::new();
        let g = build_loss(
            &mut tape,
            &self.model,
            &LossInputs {
                data: &self.data,
                mask_logits: self.mask_logits,
                rows: &rows,
                noise: noise.as_deref(),
                phase,
                config: &self.config,
            },
        )?;
        let report = self.report(&tape, &g, it, phase);
        let diverged = |detail: String| PipelineError::Divergence {
            phase: phase.number(),
            iteration: it,
            detail,
        };
        if !report.total.is_finite() {
            return Err(diverged(format!("loss is {}", report.total)));
        }
        self.model.store.zero_grad();
        tape.backward(g.loss, &mut self.model.store)?;
        let mut adam = self.config.adam;
        adam.lr = self.config.lr_context * self.config.lr_decay(it);
        adam_step(&mut self.model.store, &mut self.adam, &adam).map_err(|e| match e {
            TensorError::NonFiniteGradient(p) => diverged(format!("non-finite gradient in `{p}`")),
            other => PipelineError::Tensor(other),
        })?;
        self.history.push(report);
        self.next += 1;
        Ok(report)
    }

    pub fn run(&mut self) -> Result<(), PipelineError> {
        while self.next < self.config.iterations {
            let r = self.step()?;
            if r.iteration % 1000 == 0 {
                log::info!(
                    "iter {} phase {} loss {:.6} d {:.6} bits {:.0} hash {:.0}",
                    r.iteration,
                    r.phase,
                    r.total,
                    r.d_surr,
                    r.entropy_bits,
                    r.hash_bits
                );
            }
        }
        Ok(())
    }

    pub fn masks(&self) -> MaskState {
        MaskState::from_logits(
            &self.model.store.value(self.mask_logits).values,
            self.data.layout.offsets_per_anchor,
            self.config.mask_threshold,
        )
    }

    /// Freezes the grid to ±1 and the masks to booleans.
    pub fn finish(mut self) -> TrainOutcome<S> {
        let masks = self.masks();
        self.model.grid.freeze(&mut self.model.store);
        TrainOutcome {
            model: self.model,
            masks,
            history: self.history,
        }
    }
}

pub fn train<S: Scalar>(
    anchors: &AnchorSet,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>, PipelineError> {
    let mut t = Trainer::new(anchors, config.clone())?;
    t.run()?;
    Ok(t.finish())
}
