#![allow(dead_code)]

use maskspec::frontend::{FrontendConfig, Spectrogram, WaveformClip};
use maskspec::model::{DecoderConfig, EncoderConfig, Model, ModelConfig};
use maskspec::patch::MaskPlan;
use maskspec::patch::PatchGrid;
use maskspec::tensor::{Graph, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Step of the fourth-order central stencil.
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor in `|a − n| / max(|a|, |n|, floor)`.
pub const REL_FLOOR: f64 = 1e-6;

/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub fn stencil(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = FD_STEP;
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(r: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

/// Largest relative error between the analytic gradient of `build` (which
/// returns a scalar) and central differences, over every input coordinate.
pub fn check_inputs(inputs: &[Tensor<f64>], build: &dyn Fn(&Graph<f64>, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss).expect("backward");
    let eval = |ins: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&g, &vars);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut ins = inputs.to_vec();
            let numeric = stencil(
                |x| {
                    ins[k].data_mut()[j] = x;
                    eval(&ins)
                },
                t.data()[j],
            );
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any op output into a scalar.
pub fn project(g: &Graph<f64>, out: Var, w: &Tensor<f64>) -> Var {
    let w = g.constant(w.clone());
    let prod = g.mul(out, w).expect("project mul");
    g.sum(prod).expect("project sum")
}

/// Finite-difference check of `model`'s masked loss at `coords` (parameter
/// index, element index). Returns the relative error per coordinate.
pub fn check_model_coords(
    model: &mut Model<f64>,
    grids: &[PatchGrid<f64>],
    plans: &[MaskPlan],
    coords: &[(usize, usize)],
) -> Vec<f64> {
    model.params.zero_grads();
    let g = Graph::new();
    let fwd = model.pretrain_forward(&g, grids, plans).expect("forward");
    g.backward(fwd.loss).expect("backward").accumulate_into(&mut model.params);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(p, j)| model.params.iter().nth(p).unwrap().1.grad.data()[j])
        .collect();
    let loss_at = |m: &Model<f64>| {
        let g = Graph::new();
        let fwd = m.pretrain_forward(&g, grids, plans).expect("forward");
        g.value(fwd.loss).item()
    };
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    coords
        .iter()
        .zip(&analytic)
        .map(|(&(p, j), &a)| {
            let id = ids[p];
            let x = model.params.get(id).value.data()[j];
            let numeric = stencil(
                |v| {
                    model.params.get_mut(id).value.data_mut()[j] = v;
                    loss_at(model)
                },
                x,
            );
            model.params.get_mut(id).value.data_mut()[j] = x;
            rel_err(a, numeric)
        })
        .collect()
}

pub fn micro_config(patch: usize) -> ModelConfig {
    ModelConfig {
        patch,
        encoder: EncoderConfig { depth: 2, heads: 2, emb: 8, ffn: 12, patch_dim: patch * patch },
        decoder: Some(DecoderConfig { depth: 1, heads: 2, emb: 6, ffn: 10, out_dim: patch * patch }),
        num_classes: None,
        ln_eps: 1e-6,
        init_std: 0.02,
    }
}

/// Eight fixed 64×128 spectrograms: per-clip offset, a harmonic stack and a
/// slow temporal ripple, in the range of real log-mel values.
pub fn synthetic_spectrograms(count: usize, frames: usize, seed: u64) -> Vec<Spectrogram<f32>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let offset = r.random_range(-9.0..-5.0);
            let f0 = r.random_range(4.0..20.0);
            let period = r.random_range(6.0..24.0);
            let amp = r.random_range(2.0..5.0);
            let values = Tensor::from_fn([frames, 128], |i| {
                let (t, m) = ((i / 128) as f64, (i % 128) as f64);
                let harmonic = (0..4).any(|h| (m - f0 * (h + 1) as f64).abs() < 1.5);
                let ripple = (std::f64::consts::TAU * t / period).sin();
                (offset + if harmonic { amp * (1.0 + 0.3 * ripple) } else { 0.5 * ripple }) as f32
            });
            Spectrogram::new(values).unwrap()
        })
        .collect()
}

pub fn tone(cfg: &FrontendConfig, freq: f64, amp: f64, phase: f64) -> Vec<f32> {
    (0..cfg.clip_samples)
        .map(|i| (amp * (std::f64::consts::TAU * freq * i as f64 / cfg.sample_rate as f64 + phase).sin()) as f32)
        .collect()
}

pub fn noise(cfg: &FrontendConfig, amp: f64, r: &mut Rng) -> Vec<f32> {
    (0..cfg.clip_samples).map(|_| r.random_range(-amp..amp) as f32).collect()
}

/// Pure tones (label 0) and white noise (label 1), alternating.
pub fn tones_vs_noise(cfg: &FrontendConfig, count: usize, seed: u64) -> Vec<(WaveformClip<f32>, usize)> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                let f = r.random_range(300.0..4000.0);
                let a = r.random_range(0.2..0.6);
                let ph = r.random_range(0.0..std::f64::consts::TAU);
                (WaveformClip::mono(tone(cfg, f, a, ph), cfg.sample_rate), 0)
            } else {
                let a = r.random_range(0.1..0.5);
                (WaveformClip::mono(noise(cfg, a, &mut r), cfg.sample_rate), 1)
            }
        })
        .collect()
}

pub struct OpResult {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

type Builder = Box<dyn Fn(&Graph<f64>, &[Var]) -> Var>;

/// One randomized instance of `op`: inputs and a scalar-valued graph builder.
fn instance(op: &'static str, r: &mut Rng) -> (Vec<Tensor<f64>>, Builder) {
    let mut d = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (m, n, k) = (d(1, 4), d(1, 4), d(1, 4));
    let mut r2 = rng(r.random());
    let w_mn = rand_tensor(&mut r2, &[m, n], 1.0);
    match op {
        "matmul" => {
            let ins = vec![rand_tensor(&mut r2, &[m, k], 1.0), rand_tensor(&mut r2, &[k, n], 1.0)];
            (ins, Box::new(move |g, v| project(g, g.matmul(v[0], v[1]).unwrap(), &w_mn)))
        }
        "add" | "sub" | "mul" => {
            let ins = vec![rand_tensor(&mut r2, &[m, n], 1.0), rand_tensor(&mut r2, &[m, n], 1.0)];
            (
                ins,
                Box::new(move |g, v| {
                    let out = match op {
                        "add" => g.add(v[0], v[1]),
                        "sub" => g.sub(v[0], v[1]),
                        _ => g.mul(v[0], v[1]),
                    };
                    project(g, out.unwrap(), &w_mn)
                }),
            )
        }
        "scale" => {
            let c: f64 = r2.random_range(-2.0..2.0);
            (vec![rand_tensor(&mut r2, &[m, n], 1.0)], Box::new(move |g, v| project(g, g.scale(v[0], c).unwrap(), &w_mn)))
        }
        "add_bias" => {
            let ins = vec![rand_tensor(&mut r2, &[m, n], 1.0), rand_tensor(&mut r2, &[n], 1.0)];
            (ins, Box::new(move |g, v| project(g, g.add_bias(v[0], v[1]).unwrap(), &w_mn)))
        }
        "softmax" => {
            let axis = r2.random_range(0..2usize);
            (
                vec![rand_tensor(&mut r2, &[m, n], 2.0)],
                Box::new(move |g, v| project(g, g.softmax(v[0], axis).unwrap(), &w_mn)),
            )
        }
        "layer_norm" => {
            let n = n + 2;
            let w = rand_tensor(&mut r2, &[m, n], 1.0);
            let ins = vec![rand_tensor(&mut r2, &[m, n], 1.0), rand_tensor(&mut r2, &[n], 1.5), rand_tensor(&mut r2, &[n], 1.0)];
            (ins, Box::new(move |g, v| project(g, g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(), &w)))
        }
        "gelu" => (
            vec![rand_tensor(&mut r2, &[m, n], 3.0)],
            Box::new(move |g, v| project(g, g.gelu(v[0]).unwrap(), &w_mn)),
        ),
        "attention" => {
            let heads = r2.random_range(1..=2usize);
            let dh = r2.random_range(1..=3usize);
            let seq = r2.random_range(1..=4usize);
            let segs = r2.random_range(1..=2usize);
            let shape = [segs * seq, heads * dh];
            let w = rand_tensor(&mut r2, &shape, 1.0);
            let ins = (0..3).map(|_| rand_tensor(&mut r2, &shape, 1.0)).collect();
            (ins, Box::new(move |g, v| project(g, g.attention(v[0], v[1], v[2], heads, seq).unwrap(), &w)))
        }
        "gather_rows" => {
            let count = r2.random_range(1..=6usize);
            let idx: Vec<usize> = (0..count).map(|_| r2.random_range(0..m)).collect();
            let w = rand_tensor(&mut r2, &[count, n], 1.0);
            (
                vec![rand_tensor(&mut r2, &[m, n], 1.0)],
                Box::new(move |g, v| project(g, g.gather_rows(v[0], &idx).unwrap(), &w)),
            )
        }
        "fill_rows" => {
            let extra = r2.random_range(1..=3usize);
            let mut source: Vec<Option<usize>> = (0..m).map(Some).chain((0..extra).map(|_| None)).collect();
            use rand::seq::SliceRandom;
            source.shuffle(&mut r2);
            let w = rand_tensor(&mut r2, &[source.len(), n], 1.0);
            let ins = vec![rand_tensor(&mut r2, &[m, n], 1.0), rand_tensor(&mut r2, &[n], 1.0)];
            (ins, Box::new(move |g, v| project(g, g.fill_rows(v[0], v[1], &source).unwrap(), &w)))
        }
        "mean_segments" => {
            let seq = r2.random_range(1..=3usize);
            let w = rand_tensor(&mut r2, &[m, n], 1.0);
            (
                vec![rand_tensor(&mut r2, &[m * seq, n], 1.0)],
                Box::new(move |g, v| project(g, g.mean_segments(v[0], seq).unwrap(), &w)),
            )
        }
        "sum" => (vec![rand_tensor(&mut r2, &[m, n], 1.0)], Box::new(move |g, v| g.sum(v[0]).unwrap())),
        "mse" => {
            let t = rand_tensor(&mut r2, &[m, n], 1.0);
            (vec![rand_tensor(&mut r2, &[m, n], 1.0)], Box::new(move |g, v| g.mse(v[0], &t).unwrap()))
        }
        "bce_with_logits" => {
            let t = Tensor::from_fn([m, n], |_| r2.random_range(0.0..1.0));
            (vec![rand_tensor(&mut r2, &[m, n], 3.0)], Box::new(move |g, v| g.bce_with_logits(v[0], &t).unwrap()))
        }
        "softmax_cross_entropy" => {
            let n = n + 1;
            let raw = Tensor::from_fn([m, n], |_| r2.random_range(0.0..1.0));
            let t = Tensor::from_fn([m, n], |i| raw.data()[i] / raw.row(i / n).iter().sum::<f64>());
            (
                vec![rand_tensor(&mut r2, &[m, n], 3.0)],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], &t).unwrap()),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "softmax",
    "layer_norm",
    "gelu",
    "attention",
    "gather_rows",
    "fill_rows",
    "mean_segments",
    "sum",
    "mse",
    "bce_with_logits",
    "softmax_cross_entropy",
];

/// `trials` random instances of every differentiable op.
pub fn op_suite(trials: usize, seed: u64) -> Vec<OpResult> {
    let mut r = rng(seed);
    OPS.iter()
        .map(|&op| {
            let worst = (0..trials)
                .map(|_| {
                    let (ins, build) = instance(op, &mut r);
                    check_inputs(&ins, &*build)
                })
                .fold(0.0, f64::max);
            OpResult { op, trials, max_rel_err: worst }
        })
        .collect()
}

/// Tiny-width encoder and standard-width decoder, two blocks each, on one
/// 8-patch clip at α = 0.75; `per_tensor` random coordinates of every
/// parameter tensor. Returns (coordinates checked, max relative error).
pub fn tiny_two_block_check(per_tensor: usize, seed: u64) -> (usize, f64) {
    use maskspec::model::Scale;
    let mut cfg = ModelConfig::pretrain(Scale::Tiny, 16);
    cfg.encoder.depth = 2;
    cfg.decoder.as_mut().unwrap().depth = 2;
    let mut model = Model::<f64>::new(cfg, seed).unwrap();
    let mut r = rng(seed + 1);
    let grid = PatchGrid { patches: rand_tensor(&mut r, &[8, 256], 1.0), rows: 2, cols: 4, p: 16 };
    let plan = maskspec::patch::random_mask_seeded(8, 0.75, seed).unwrap();
    let sizes: Vec<usize> = model.params.iter().map(|(_, p)| p.value.len()).collect();
    let coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &len)| (0..per_tensor).map(move |_| i).zip(std::iter::repeat(len)))
        .map(|(i, len)| (i, r.random_range(0..len)))
        .collect();
    let errs = check_model_coords(&mut model, &[grid], &[plan], &coords);
    (errs.len(), errs.into_iter().fold(0.0, f64::max))
}

/// Quadratic rank walk: item `i` sits at rank `1 + #{j : s_j > s_i, or s_j = s_i and j < i}`;
/// each positive contributes the fraction of positives at or above its rank.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            pos.iter().filter(|&&j| rank(j) <= r).count() as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

/// Column-wise oracle AP averaged over classes that have a positive.
pub fn map_oracle(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
    let classes = scores[0].len();
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            ap_oracle(&s, &l)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// One grid, one plan and a copy of the grid whose survivor rows are replaced
/// by unrelated values. Returns the two losses.
pub fn survivor_perturbation_losses(model: &Model<f64>, seed: u64, alpha: f64) -> (f64, f64) {
    let mut r = rng(seed);
    let p = model.config.patch;
    let (rows, cols) = (2, 4);
    let grid = PatchGrid { patches: rand_tensor(&mut r, &[rows * cols, p * p], 3.0), rows, cols, p };
    let plan = maskspec::patch::random_mask(rows * cols, alpha, &mut r).unwrap();
    let mut target = grid.clone();
    let d = p * p;
    for &i in &plan.survivor_idx {
        for v in &mut target.patches.data_mut()[i * d..(i + 1) * d] {
            *v = r.random_range(-1e3..1e3);
        }
    }
    let loss = |t: &PatchGrid<f64>| {
        let g = Graph::new();
        let f = model
            .pretrain_forward_with_targets(&g, std::slice::from_ref(&grid), std::slice::from_ref(t), std::slice::from_ref(&plan))
            .unwrap();
        g.value(f.loss).item()
    };
    (loss(&grid), loss(&target))
}
