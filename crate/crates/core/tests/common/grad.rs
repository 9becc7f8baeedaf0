//! Central finite-difference checks of every differentiable path, in f64.
//!
//! Straight-through nodes, including the probability floor, are checked
//! against finite differences of their first-order expansion
//! (`Tape::linearized`), which is the gradient the estimator defines.

use std::rc::Rc;

use hacpp::anchor::{generate, SyntheticConfig};
use hacpp::entropy::{gmm_on_tape, positive_on_tape, prob_on_tape, rate_on_tape};
use hacpp::hash_grid::{HashGrid, HashGridConfig};
use hacpp::masking::{anchor_mask, gaussian_mask, masked_offset_distortion};
use hacpp::pipeline::{build_loss, LossInputs, Phase, TrainConfig, Trainer};
use hacpp::quantizer::{quantize_train, step_size_on_tape, uniform_noise};
use hacpp::tensor::{Activation, DenseNet, ParamId, ParamStore, SteReference, Tape, Tensor, Var};
use hacpp::{OracleScalar, OracleTape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type S = OracleScalar;

pub const SEEDS: u64 = 100;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Gradients smaller than this fraction of the loss scale are compared in
/// absolute terms, since rounding in the loss dominates there.
const FLOOR: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<S> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Weighted sum `Σ c ⊙ v` with fixed random `c`, reducing any node to a scalar.
fn project(tape: &mut OracleTape, v: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(v);
    let mut g = rng(seed ^ 0xC0FF_EE00);
    let w = tape.leaf(Tensor::new(r, c, uniform(&mut g, r * c, -1.0, 1.0)));
    let p = tape.mul(v, w);
    tape.sum(p)
}

/// Outcome of one gradient comparison.
#[derive(Default)]
pub struct Check {
    worst: f64,
    checked: usize,
    /// Entries within a step of a kink, where no derivative exists.
    skipped: usize,
}

#[derive(Debug, Default)]
pub struct Summary {
    pub worst: f64,
    pub worst_seed: u64,
    pub checked: usize,
    pub skipped: usize,
}

/// Largest relative error between analytic and numeric gradients over
/// `samples` random entries of each parameter in `ids`.
fn max_error<F>(
    store: &mut ParamStore<S>,
    ids: &[ParamId],
    samples: usize,
    seed: u64,
    build: F,
) -> Check
where
    F: Fn(&mut OracleTape, &ParamStore<S>) -> Var,
{
    max_error_in(store, |s| s, ids, samples, seed, |t, s| build(t, s))
}

/// [`max_error`] for parameters owned by a larger structure.
fn max_error_in<T, A, F>(
    state: &mut T,
    store_of: A,
    ids: &[ParamId],
    samples: usize,
    seed: u64,
    build: F,
) -> Check
where
    A: Fn(&mut T) -> &mut ParamStore<S>,
    F: Fn(&mut OracleTape, &T) -> Var,
{
    let mut tape = Tape::recording_ste();
    let loss = build(&mut tape, state);
    store_of(state).zero_grad();
    tape.backward(loss, store_of(state)).unwrap();
    let reference: SteReference<S> = tape.ste_reference().unwrap().clone();

    let eval = |state: &T| {
        let mut t = Tape::linearized(reference.clone());
        let l = build(&mut t, state);
        t.scalar(l)
    };
    let base = eval(state);
    assert!(
        (base - tape.scalar(loss)).abs() <= 1e-12 * base.abs().max(1.0),
        "linearized pass must reproduce the reference loss"
    );

    let floor = FLOOR * base.abs().max(1.0);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(floor);
    let mut pick = rng(seed ^ 0xF1D0);
    let mut out = Check::default();
    for &id in ids {
        let n = store_of(state).value(id).len();
        let grad = store_of(state)
            .get(id)
            .tensor
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..samples.min(n) {
            let i = pick.gen_range(0..n);
            let x0 = store_of(state).value(id).values[i];
            let mut central = |h: f64| {
                store_of(state).value_mut(id).values[i] = x0 + h;
                let up = eval(state);
                store_of(state).value_mut(id).values[i] = x0 - h;
                let down = eval(state);
                store_of(state).value_mut(id).values[i] = x0;
                (up - down) / (2.0 * h)
            };
            let h = STEP * x0.abs().max(1.0);
            let (coarse, fine) = (central(h), central(h / 4.0));
            out.checked += 1;
            // A smooth function gives the same difference at both steps.
            if rel(coarse, fine) > TOLERANCE {
                out.skipped += 1;
                continue;
            }
            out.worst = out.worst.max(rel(coarse, grad[i]));
        }
    }
    out
}

/// Worst error of one path over all seeds, or why it failed.
pub fn run_path(name: &str, check: fn(u64) -> Check) -> Result<Summary, String> {
    let mut s = Summary::default();
    for seed in 0..SEEDS {
        let c = check(seed);
        if !c.worst.is_finite() {
            return Err(format!("{name}: seed {seed} gave a non-finite error"));
        }
        if c.worst > s.worst {
            (s.worst, s.worst_seed) = (c.worst, seed);
        }
        s.checked += c.checked;
        s.skipped += c.skipped;
    }
    if s.worst >= TOLERANCE {
        return Err(format!(
            "{name}: relative error {:.3e} at seed {}",
            s.worst, s.worst_seed
        ));
    }
    if s.skipped * 100 > s.checked {
        return Err(format!(
            "{name}: {} of {} entries sat on a kink",
            s.skipped, s.checked
        ));
    }
    Ok(s)
}

pub fn dense_layers(seed: u64) -> Check {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let acts = [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::None,
    ];
    let depth = g.gen_range(1..=4);
    let dims: Vec<usize> = (0..=depth).map(|_| g.gen_range(1..7)).collect();
    let activations: Vec<Activation> = (0..depth).map(|_| acts[g.gen_range(0..4)]).collect();
    let net = DenseNet::new(&mut store, "net", &dims, &activations, &mut g);
    let rows = g.gen_range(1..5);
    let x = Tensor::new(rows, dims[0], uniform(&mut g, rows * dims[0], -2.0, 2.0));
    let ids = net.param_ids();
    max_error(&mut store, &ids, 8, seed, |tape, store| {
        let xv = tape.leaf(x.clone());
        let y = net.forward(tape, store, xv).unwrap();
        project(tape, y, seed)
    })
}

pub fn step_size(seed: u64) -> Check {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let n = g.gen_range(1..20);
    let r = store.add("r", Tensor::new(n, 1, uniform(&mut g, n, -3.0, 3.0)));
    let q0 = [1.0, 0.001, 0.2][g.gen_range(0..3)];
    max_error(&mut store, &[r], 20, seed, |tape, store| {
        let rv = tape.param(store, r);
        let q = step_size_on_tape(tape, rv, q0);
        project(tape, q, seed)
    })
}

pub fn noise_quantization(seed: u64) -> Check {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let (rows, cols) = (g.gen_range(1..6), g.gen_range(1..6));
    let x = store.add(
        "x",
        Tensor::new(rows, cols, uniform(&mut g, rows * cols, -3.0, 3.0)),
    );
    let r = store.add("r", Tensor::new(rows, 1, uniform(&mut g, rows, -2.0, 2.0)));
    let u = Tensor::new(rows, cols, uniform(&mut g, rows * cols, -0.5, 0.5));
    max_error(&mut store, &[x, r], 12, seed, |tape, store| {
        let xv = tape.param(store, x);
        let rv = tape.param(store, r);
        let q = step_size_on_tape(tape, rv, 0.2);
        let qr = tape.repeat_each(q, cols);
        let uv = tape.leaf(u.clone());
        let y = quantize_train(tape, xv, qr, uv);
        let sq = tape.mul(y, y);
        project(tape, sq, seed)
    })
}

pub fn straight_through_masks(seed: u64) -> Check {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let (rows, k) = (g.gen_range(1..6), g.gen_range(1..5));
    // Logits below ln(0.01/0.99) ≈ -4.6 give masked offsets.
    let logits = store.add(
        "logits",
        Tensor::new(rows, k, uniform(&mut g, rows * k, -8.0, 3.0)),
    );
    let recon = store.add(
        "recon",
        Tensor::new(rows, 3 * k, uniform(&mut g, rows * 3 * k, -1.0, 1.0)),
    );
    let orig = Tensor::new(rows, 3 * k, uniform(&mut g, rows * 3 * k, -1.0, 1.0));
    max_error(&mut store, &[logits, recon], 12, seed, |tape, store| {
        let l = tape.param(store, logits);
        let m = gaussian_mask(tape, l, 0.01).unwrap();
        let ma = anchor_mask(tape, m).unwrap();
        let rv = tape.param(store, recon);
        let ov = tape.leaf(orig.clone());
        let d = masked_offset_distortion(tape, m, rv, ov);
        let dsum = tape.sum(d);
        let a = project(tape, ma, seed);
        tape.add(dsum, a)
    })
}

fn small_grid() -> HashGridConfig {
    HashGridConfig {
        levels_3d: 2,
        min_res_3d: 2,
        max_res_3d: 5,
        table_log2_3d: 5,
        levels_2d: 1,
        min_res_2d: 4,
        max_res_2d: 4,
        table_log2_2d: 5,
        feature_dim: 2,
    }
}

pub fn hash_binarization(seed: u64) -> Check {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let grid = HashGrid::new(small_grid(), &mut store, 0.5, &mut g).unwrap();
    let points: Vec<[S; 3]> = (0..g.gen_range(1..6))
        .map(|_| [g.gen::<f64>(), g.gen::<f64>(), g.gen::<f64>()])
        .collect();
    let plan = Rc::new(grid.plan(&points));
    let width = grid.config.feature_dim * 3;
    let net = DenseNet::new(
        &mut store,
        "mlp",
        &[width, 4, 2],
        &[Activation::Tanh, Activation::None],
        &mut g,
    );
    let mut ids = vec![grid.table];
    ids.extend(net.param_ids());
    max_error(&mut store, &ids, 16, seed, |tape, store| {
        let b = grid.binarized_on_tape(tape, store);
        let f = grid.features_on_tape(tape, b, plan.clone());
        let y = net.forward(tape, store, f).unwrap();
        project(tape, y, seed)
    })
}

pub fn rate_with_masks_and_mixture(seed: u64) -> Check {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let rows = g.gen_range(1..5);
    let (df, k) = (g.gen_range(1..5), g.gen_range(1..4));
    let mut add = |name: &str, cols: usize, lo: f64, hi: f64, g: &mut ChaCha8Rng| {
        store.add(
            name,
            Tensor::new(rows, cols, uniform(g, rows * cols, lo, hi)),
        )
    };
    // Wide enough that some interval masses hit the probability floor.
    let xf = add("xf", df, -2.0, 2.0, &mut g);
    let mus = add("mu_s", df, -2.0, 2.0, &mut g);
    let sgs = add("sigma_s", df, -1.0, 1.5, &mut g);
    let pis = add("pi_s", df, -2.0, 2.0, &mut g);
    let muc = add("mu_c", df, -2.0, 2.0, &mut g);
    let sgc = add("sigma_c", df, -1.0, 1.5, &mut g);
    let pic = add("pi_c", df, -2.0, 2.0, &mut g);
    let xl = add("xl", 6, -1.0, 1.0, &mut g);
    let mul = add("mu_l", 6, -1.0, 1.0, &mut g);
    let sgl = add("sigma_l", 6, -1.0, 1.0, &mut g);
    let xo = add("xo", 3 * k, -1.0, 1.0, &mut g);
    let muo = add("mu_o", 3 * k, -1.0, 1.0, &mut g);
    let sgo = add("sigma_o", 3 * k, -1.0, 1.0, &mut g);
    let r = add("r", 3, -1.5, 1.5, &mut g);
    let logits = add("logits", k, -8.0, 3.0, &mut g);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    max_error(&mut store, &ids, 6, seed, |tape, store| {
        let p = |tape: &mut OracleTape, id| tape.param(store, id);
        let rv = p(tape, r);
        let steps: Vec<Var> = [(0, 1.0, df), (1, 0.3, 6), (2, 0.2, 3 * k)]
            .iter()
            .map(|&(c, q0, d)| {
                let rc = tape.slice_cols(rv, c, c + 1);
                let q = step_size_on_tape(tape, rc, q0);
                tape.repeat_each(q, d)
            })
            .collect();
        let sigma = |tape: &mut OracleTape, id| {
            let raw = tape.param(store, id);
            positive_on_tape(tape, raw)
        };
        let (x_f, m_s, s_s, p_s) = (p(tape, xf), p(tape, mus), sigma(tape, sgs), p(tape, pis));
        let (m_c, s_c, p_c) = (p(tape, muc), sigma(tape, sgc), p(tape, pic));
        let pf = gmm_on_tape(tape, x_f, steps[0], (m_s, s_s, p_s), (m_c, s_c, p_c));
        let (x_l, m_l, s_l) = (p(tape, xl), p(tape, mul), sigma(tape, sgl));
        let pl = prob_on_tape(tape, x_l, steps[1], m_l, s_l);
        let (x_o, m_o, s_o) = (p(tape, xo), p(tape, muo), sigma(tape, sgo));
        let po = prob_on_tape(tape, x_o, steps[2], m_o, s_o);
        let bits = [pf, pl, po].map(|v| tape.neg_log2(v));
        let lv = p(tape, logits);
        let m = gaussian_mask(tape, lv, 0.01).unwrap();
        let ma = anchor_mask(tape, m).unwrap();
        let per_anchor = rate_on_tape(tape, bits[0], bits[1], bits[2], m, ma);
        tape.sum(per_anchor)
    })
}

pub fn hash_rate(seed: u64) -> Check {
    let mut g = rng(seed);
    let mut store = ParamStore::new();
    let n = g.gen_range(2..64);
    let bias = g.gen_range(-0.5..0.5);
    let latent = store.add(
        "latent",
        Tensor::new(n, 1, uniform(&mut g, n, bias - 1.0, bias + 1.0)),
    );
    max_error(&mut store, &[latent], 16, seed, |tape, store| {
        let l = tape.param(store, latent);
        let b = tape.sign_ste(l);
        tape.hash_rate(b)
    })
}

pub fn full_training_loss(seed: u64) -> Check {
    let anchors = generate(&SyntheticConfig {
        n: 24,
        seed: 3,
        ..Default::default()
    });
    let mut cfg = TrainConfig::default().with_iterations(30);
    cfg.seed = seed;
    cfg.grid = small_grid();
    cfg.grid_init = 0.1;
    cfg.context.use_intra = seed.is_multiple_of(2);
    let mut trainer = Trainer::<S>::new(&anchors, cfg.clone()).unwrap();
    let mut g = rng(seed);
    let logits = trainer.mask_logits;
    for v in trainer.model.store.value_mut(logits).values.iter_mut() {
        *v = g.gen_range(-8.0..3.0);
    }
    let rows: Vec<usize> = (0..anchors.len()).filter(|_| g.gen_bool(0.5)).collect();
    let rows = if rows.is_empty() { vec![0] } else { rows };
    let noise = uniform_noise::<S>(seed, 0, &rows, trainer.data.layout.total());
    let ids: Vec<ParamId> = trainer.model.store.iter().map(|(id, _)| id).collect();
    max_error_in(
        &mut trainer,
        |t| &mut t.model.store,
        &ids,
        3,
        seed,
        |tape, t| {
            let inputs = LossInputs {
                data: &t.data,
                mask_logits: t.mask_logits,
                rows: &rows,
                noise: Some(&noise),
                phase: Phase::Full,
                config: &cfg,
            };
            build_loss(tape, &t.model, &inputs).unwrap().loss
        },
    )
}

/// Every differentiable path, by name.
pub const PATHS: [(&str, fn(u64) -> Check); 8] = [
    ("dense", dense_layers),
    ("step size", step_size),
    ("noise quantization", noise_quantization),
    ("masks", straight_through_masks),
    ("hash binarization", hash_binarization),
    ("rate", rate_with_masks_and_mixture),
    ("hash rate", hash_rate),
    ("full loss", full_training_loss),
];
