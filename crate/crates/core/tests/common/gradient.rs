//! Random model instances and central finite differences.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semtopo::model::{
    forward, grad_loss_cls, grad_loss_reg, grad_loss_sa, loss_cls, loss_reg, loss_sa, total_loss, KnownSet,
    LossWeights, ModelConfig, ModelParams, Target,
};
use semtopo::openworld::BoundingBox;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 100;

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

pub fn central(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += H;
            down[i] -= H;
            (f(&up) - f(&down)) / (2.0 * H)
        })
        .collect()
}

pub fn vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = vector(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(0.2..3.0),
        rng.random_range(0.2..3.0),
    )
    .unwrap()
}

pub struct Case {
    pub params: ModelParams,
    pub input: Vec<f64>,
    pub known: KnownSet,
    pub slot: usize,
    pub anchor: Option<Vec<f64>>,
    pub bbox: Option<BoundingBox>,
}

pub fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(0..=2);
    let config = ModelConfig {
        input_dim: rng.random_range(1..=16),
        extractor_widths: (0..layers).map(|_| rng.random_range(1..=16)).collect(),
        anchor_dim: rng.random_range(1..=16),
        max_classes: rng.random_range(1..=15),
    };
    let mut params = ModelParams::init(config.clone(), seed).unwrap();
    // Non-zero biases so their gradients are exercised away from the origin.
    for (_, block) in params.blocks_mut() {
        for b in &mut block.bias {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let mut known = KnownSet::new(&config);
    for slot in 0..config.max_classes {
        if rng.random_bool(0.6) {
            known.open(slot);
        }
    }
    let slots: Vec<usize> = known.slots().collect();
    let slot = slots[rng.random_range(0..slots.len())];
    let anchor = rng.random_bool(0.85).then(|| unit(&mut rng, config.anchor_dim));
    let bbox = (slot != config.unknown_slot() && rng.random_bool(0.85)).then(|| random_box(&mut rng));
    Case {
        input: vector(&mut rng, config.input_dim, 2.0),
        params,
        known,
        slot,
        anchor,
        bbox,
    }
}

pub fn loss_at(case: &Case, params: &ModelParams, weights: &LossWeights) -> f64 {
    let trace = forward(params, &case.input, &case.known).unwrap();
    let target = Target {
        slot: case.slot,
        anchor: case.anchor.as_deref(),
        bbox: case.bbox,
    };
    total_loss(params, &trace, &target, weights, &case.known).unwrap().0.total
}

/// Worst relative error of the full parameter gradient over all instances.
pub fn parameter_gradient_error(weights: LossWeights) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let c = case(seed);
        let trace = forward(&c.params, &c.input, &c.known).unwrap();
        let target = Target {
            slot: c.slot,
            anchor: c.anchor.as_deref(),
            bbox: c.bbox,
        };
        let (_, grads) = total_loss(&c.params, &trace, &target, &weights, &c.known).unwrap();
        let analytic = grads.flat();
        let theta = c.params.flat();
        let numeric = central(&theta, |x| {
            let mut p = c.params.clone();
            for (slot, v) in p.flat_mut().into_iter().zip(x) {
                *slot = *v;
            }
            loss_at(&c, &p, &weights)
        });
        let err = rel_err(&analytic, &numeric);
        worst = worst.max(err);
    }
    worst
}

pub fn only(sa: f64, se: f64, roi: f64, reg: f64) -> LossWeights {
    LossWeights { sa, se, roi, reg }
}

/// Worst relative error of the standalone anchor-loss gradient.
pub fn anchor_loss_error() -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=16);
            let f_hat = vector(&mut rng, n, 2.0);
            let anchor = unit(&mut rng, n);
            let analytic = grad_loss_sa(&f_hat, &anchor).unwrap();
            rel_err(&analytic, &central(&f_hat, |x| loss_sa(x, &anchor).unwrap()))
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the standalone masked cross-entropy gradient.
pub fn classification_loss_error() -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=16);
            let logits = vector(&mut rng, n, 4.0);
            let known = KnownSet::from_slots(n, (0..n).filter(|_| rng.random_bool(0.7)).chain([n - 1]));
            let slots: Vec<usize> = known.slots().collect();
            let label = slots[rng.random_range(0..slots.len())];
            let analytic = grad_loss_cls(&logits, label, &known).unwrap();
            rel_err(&analytic, &central(&logits, |x| loss_cls(x, label, &known).unwrap()))
        })
        .fold(0.0, f64::max)
}

/// Worst relative error of the standalone box-loss gradient.
pub fn box_loss_error() -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = random_box(&mut rng);
            let pred: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let analytic = grad_loss_reg(&pred, &target).unwrap();
            rel_err(&analytic, &central(&pred, |x| loss_reg(&[x[0], x[1], x[2], x[3]], &target).unwrap()))
        })
        .fold(0.0, f64::max)
}
