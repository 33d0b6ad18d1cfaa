//! Reverse-mode gradients against central finite differences on composite
//! graphs. Each case compares directional derivatives along the normalised
//! gradient and along a direction 45° away from it (gradient plus a random
//! unit vector). A purely random direction in a few thousand dimensions is
//! nearly orthogonal to the gradient, and its tiny derivative drowns in f32
//! round-off. Small graphs also check their largest gradient coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vinpaint_core::denoiser::ParamGroup;
use vinpaint_core::numerics::sinusoidal_encoding;
use vinpaint_core::training::{gen_random_mask, gen_synthetic_sample, loss_gradients, Objective, TrainingExample};
use vinpaint_core::training::loss::loss_value;
use vinpaint_core::{DenoiserConfig, Graph, Model, NoiseSchedule, Tensor, Var};

pub const REL_TOL: f64 = 1e-3;
const H: f64 = 5e-2;

/// Richardson-extrapolated central difference: cancels the O(h²) term so a
/// step large enough to swamp f32 round-off can be used.
fn derivative(mut f: impl FnMut(f64) -> f64) -> f64 {
    let d = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (a, b) = (d(&mut f, H), d(&mut f, H / 2.0));
    (4.0 * b - a) / 3.0
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

fn directions(grads: &[Tensor], rng: &mut ChaCha8Rng) -> [Vec<Tensor>; 2] {
    let g = normalise(grads.to_vec());
    let r = normalise(grads.iter().map(|t| Tensor::randn(t.shape(), rng)).collect());
    let mixed = normalise(g.iter().zip(&r).map(|(a, b)| a.add(b).unwrap()).collect());
    [g, mixed]
}

fn one_hot(shapes: &[Vec<usize>], tensor: usize, index: usize) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Tensor::from_fn(s, |j| (i == tensor && j == index) as u8 as f32))
        .collect()
}

fn normalise(d: Vec<Tensor>) -> Vec<Tensor> {
    let n: f64 = d.iter().flat_map(|t| t.data().iter()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    d.into_iter().map(|t| t.scale((1.0 / n) as f32)).collect()
}

fn dot(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&p, &q)| p as f64 * q as f64)
        .sum()
}

fn shifted(base: &[Tensor], d: &[Tensor], h: f64) -> Vec<Tensor> {
    base.iter().zip(d).map(|(b, t)| b.zip_map(t, |x, y| (x as f64 + h * y as f64) as f32).unwrap()).collect()
}

/// Checks `f` (a scalar graph over `params`) and returns the worst relative
/// error over both directions.
fn check_graph(params: Vec<Tensor>, f: impl Fn(&[Var]) -> Var, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(&format!("p{i:02}"), t.clone(), true)).collect();
    let loss = f(&vars);
    let grads = g.backward(&loss).unwrap();
    let grads: Vec<Tensor> = (0..params.len()).map(|i| grads[&format!("p{i:02}")].clone()).collect();
    let eval = |ps: &[Tensor]| -> f64 {
        let vs: Vec<Var> = ps.iter().cloned().map(Var::constant).collect();
        f(&vs).value().item().unwrap() as f64
    };
    let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
    let mut entries: Vec<(usize, usize, f32)> = grads
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.data().iter().enumerate().map(move |(j, &v)| (i, j, v.abs())))
        .collect();
    entries.sort_by(|a, b| b.2.total_cmp(&a.2));
    let coords = entries.iter().take(3).map(|&(i, j, _)| one_hot(&shapes, i, j));
    let mut worst = 0.0f64;
    for d in directions(&grads, rng).into_iter().chain(coords) {
        let analytic = dot(&grads, &d);
        let numeric = derivative(|h| eval(&shifted(&params, &d, h)));
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

fn conv_case(rng: &mut ChaCha8Rng) -> f64 {
    let params = vec![
        Tensor::randn(&[2, 3, 6, 6], rng),
        Tensor::randn(&[4, 3, 3, 3], rng).scale(0.3),
        Tensor::randn(&[4], rng).scale(0.1),
        Tensor::randn(&[4], rng).scale(0.2).map(|v| v + 1.0),
        Tensor::randn(&[4], rng).scale(0.1),
        Tensor::randn(&[2, 4, 2, 2], rng).scale(0.3),
    ];
    let target = Var::constant(Tensor::randn(&[2, 2, 3, 3], rng));
    check_graph(
        params,
        |p| {
            let h = p[0].conv2d(&p[1], Some(&p[2]), 1, 1).unwrap();
            let h = h.group_norm(2, &p[3], &p[4]).unwrap().silu().unwrap();
            let y = h.conv2d(&p[5], None, 2, 0).unwrap();
            y.mse(&target).unwrap()
        },
        rng,
    )
}

fn tokens(x: &Var) -> Var {
    let s = x.shape().to_vec();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).unwrap().permute(&[0, 2, 1]).unwrap()
}

fn spatial_case(rng: &mut ChaCha8Rng) -> f64 {
    let (f, c, side) = (2, 4, 3);
    let params = vec![
        Tensor::randn(&[f, c, side, side], rng),
        Tensor::randn(&[c, c], rng).scale(0.5),
        Tensor::randn(&[c, c], rng).scale(0.5),
        Tensor::randn(&[c, c], rng).scale(0.5),
        Tensor::randn(&[c, c], rng).scale(0.5),
        Tensor::randn(&[c], rng).scale(0.1),
    ];
    let target = Var::constant(Tensor::randn(&[f, side * side, c], rng));
    check_graph(
        params,
        |p| {
            let t = tokens(&p[0]);
            let q = t.linear(&p[1], None).unwrap();
            let k = t.linear(&p[2], None).unwrap();
            let v = t.linear(&p[3], None).unwrap();
            let a = Var::attention(&q, &k, &v).unwrap();
            let y = a.linear(&p[4], Some(&p[5])).unwrap().add(&t).unwrap();
            y.mse(&target).unwrap()
        },
        rng,
    )
}

fn temporal_case(rng: &mut ChaCha8Rng) -> f64 {
    let (f, c, side) = (3, 4, 2);
    let params = vec![
        Tensor::randn(&[f, c, side, side], rng),
        Tensor::randn(&[c, c], rng).scale(0.5),
        Tensor::randn(&[c, c], rng).scale(0.5),
        Tensor::randn(&[c, c], rng).scale(0.5),
        Tensor::randn(&[c, c], rng).scale(0.5),
    ];
    let pe: Vec<f32> = (0..f).flat_map(|i| sinusoidal_encoding(i, c).unwrap().into_vec()).collect();
    let pe = Var::constant(Tensor::new(&[f, c], pe).unwrap());
    let target = Var::constant(Tensor::randn(&[side * side, f, c], rng));
    check_graph(
        params,
        |p| {
            // [F, C, H, W] → [HW, F, C]: attention runs across frames per pixel.
            let x = p[0].reshape(&[f, c, side * side]).unwrap().permute(&[2, 0, 1]).unwrap();
            let xp = x.add_leading(&pe).unwrap();
            let q = xp.linear(&p[1], None).unwrap();
            let k = xp.linear(&p[2], None).unwrap();
            let v = xp.linear(&p[3], None).unwrap();
            let a = Var::attention(&q, &k, &v).unwrap();
            a.linear(&p[4], None).unwrap().add(&x).unwrap().mse(&target).unwrap()
        },
        rng,
    )
}

/// Directional check of a training loss with respect to one parameter group.
fn loss_case(seed: u64, objective: Objective, group: ParamGroup, rng: &mut ChaCha8Rng) -> f64 {
    let mut model = Model::init(DenoiserConfig::micro(), seed).unwrap();
    model.weights.jitter(seed + 100, 0.1);
    let s = gen_synthetic_sample(seed, 2).unwrap();
    let ex = TrainingExample {
        masks: gen_random_mask(32, 32, 2, seed).unwrap(),
        video: s.video,
        caption: s.caption,
        null: false,
    };
    let sched = NoiseSchedule::standard();
    let eps = Tensor::randn(&[2, 3, 32, 32], rng);
    let t = 200 + seed as usize * 37;
    let (_, grads) = loss_gradients(&model, &ex, t, &eps, &sched, objective, &[group]).unwrap();
    let names: Vec<String> = grads.keys().cloned().collect();
    assert!(!names.is_empty());
    let base: Vec<Tensor> = names.iter().map(|n| model.weights.get(n).unwrap().clone()).collect();
    let g: Vec<Tensor> = names.iter().map(|n| grads[n].clone()).collect();
    let mut worst = 0.0f64;
    for d in directions(&g, rng) {
        let analytic = dot(&g, &d);
        let mut at = |h: f64| {
            let mut m = model.clone();
            for (n, v) in names.iter().zip(shifted(&base, &d, h)) {
                m.weights.set(n, v).unwrap();
            }
            loss_value(&m, &ex, t, &eps, &sched, objective).unwrap()
        };
        let numeric = derivative(&mut at);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Every case name with its worst relative error: 15 small graphs (conv,
/// spatial and temporal attention) and 9 training-loss graphs.
pub fn run_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(String, f64)> = Vec::new();
    for i in 0..5 {
        results.push((format!("conv #{i}"), conv_case(&mut rng)));
        results.push((format!("spatial attention #{i}"), spatial_case(&mut rng)));
        results.push((format!("temporal attention #{i}"), temporal_case(&mut rng)));
    }
    for s in 0..3 {
        results.push((format!("inpaint loss / backbone #{s}"), loss_case(s, Objective::Inpaint, ParamGroup::Backbone, &mut rng)));
        results.push((format!("inpaint loss / motion #{s}"), loss_case(s, Objective::Inpaint, ParamGroup::Motion, &mut rng)));
        results.push((format!("structure loss / control #{s}"), loss_case(s, Objective::Structure, ParamGroup::Control, &mut rng)));
    }
    results
}
