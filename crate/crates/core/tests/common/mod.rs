//! Central-difference gradient checks shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use asa_geo::asa::{
    aggregate, asa_backward, asa_forward, compute_attention, AttentionGrad, PartitionSpec,
};
use asa_geo::backbone::{Backbone, BackboneConfig};
use asa_geo::data::Image;
use asa_geo::data::View;
use asa_geo::heads::{HeadBank, HeadConfig, HeadMode};
use asa_geo::losses::SampleTag;
use asa_geo::model::{GeoModel, ModelConfig};
use asa_geo::nn::Parameterized;
use ndarray::{Array1, Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// Scale below which a gradient counts as zero. Central differences at
/// `STEP` carry roughly 1e-10 of rounding noise, and some gradients (a bias
/// feeding batch normalization) are exactly zero.
pub const ZERO_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, ZERO_FLOOR)` over the sampled entries of one
/// tensor.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let a: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / a.max(n).max(ZERO_FLOOR)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Array3::from_shape_simple_fn((h, w, 3), || rng.random_range(-1.0..1.0))
}

fn grads<M: Parameterized>(model: &mut M) -> BTreeMap<String, Array2<f64>> {
    let mut out = BTreeMap::new();
    model.visit_params("", &mut |n, p| {
        out.insert(n.to_string(), p.grad.clone());
    });
    out
}

fn nudge<M: Parameterized>(model: &mut M, name: &str, idx: usize, delta: f64) {
    model.visit_params("", &mut |n, p| {
        if n == name {
            let cols = p.value.ncols();
            p.value[[idx / cols, idx % cols]] += delta;
        }
    });
}

/// Compare accumulated parameter gradients of `model` against central
/// differences of `loss` on up to `per_tensor` random entries of every
/// tensor. Returns the relative error per tensor.
pub fn check_params<M: Parameterized>(
    model: &mut M,
    loss: &dyn Fn(&M) -> f64,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, f64> {
    let analytic = grads(model);
    let mut out = BTreeMap::new();
    for (name, g) in &analytic {
        let len = g.len();
        let picks = sample(rng, len, per_tensor.min(len)).into_vec();
        let mut a = Vec::new();
        let mut n = Vec::new();
        for idx in picks {
            nudge(model, name, idx, STEP);
            let up = loss(model);
            nudge(model, name, idx, -2.0 * STEP);
            let down = loss(model);
            nudge(model, name, idx, STEP);
            a.push(g.as_slice().unwrap()[idx]);
            n.push((up - down) / (2.0 * STEP));
        }
        out.insert(name.clone(), rel_err(&a, &n));
    }
    out
}

pub fn worst(errs: &BTreeMap<String, f64>) -> (String, f64) {
    errs.iter()
        .map(|(k, v)| (k.clone(), *v))
        .fold((String::new(), 0.0), |b, c| if c.1 > b.1 { c } else { b })
}

/// Encoder check: image -> tokens under a fixed random linear read-out.
pub fn encoder_errors(
    config: BackboneConfig,
    per_tensor: usize,
    seed: u64,
) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bb = Backbone::new(config.clone(), &mut rng).unwrap();
    let img = random_image(&mut rng, config.image_height, config.image_width);
    let rc = Array1::from_shape_simple_fn(config.embed_dim, || rng.random_range(-1.0..1.0));
    let rp = random_matrix(&mut rng, config.num_patches(), config.embed_dim);
    let loss = |bb: &Backbone| {
        let (t, _, _) = bb.forward(&img).unwrap();
        t.class_token.dot(&rc) + (&t.patch_tokens * &rp).sum()
    };
    let (_, embed, encode) = bb.forward(&img).unwrap();
    bb.zero_grad();
    let dz0 = bb.encode_backward(&encode, &rc, &rp);
    bb.embed_backward(&embed, &dz0);
    check_params(&mut bb, &loss, per_tensor, &mut rng)
}

/// Heads in training mode (batch statistics) under a random linear
/// objective on both features and logits; includes the input gradients.
pub fn head_errors(
    input_dim: usize,
    num_parts: usize,
    batch: usize,
    seed: u64,
) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = HeadConfig {
        additive_dim: 12,
        num_classes: 5,
        ..HeadConfig::default()
    };
    let mut bank = HeadBank::new(input_dim, num_parts, cfg, &mut rng).unwrap();
    let inputs: Vec<Array2<f64>> = (0..=num_parts)
        .map(|_| random_matrix(&mut rng, batch, input_dim))
        .collect();
    let rf: Vec<Array2<f64>> = (0..=num_parts)
        .map(|_| random_matrix(&mut rng, batch, 12))
        .collect();
    let rz: Vec<Array2<f64>> = (0..=num_parts)
        .map(|_| random_matrix(&mut rng, batch, 5))
        .collect();
    let mode = HeadMode::Train { seed: 0 };
    let objective = |bank: &HeadBank, inputs: &[Array2<f64>]| {
        let out = bank.forward_batch(inputs, mode).unwrap();
        (0..=num_parts)
            .map(|h| (&out.f[h] * &rf[h]).sum() + (&out.z[h] * &rz[h]).sum())
            .sum::<f64>()
    };
    let out = bank.forward_batch(&inputs, mode).unwrap();
    bank.zero_grad();
    let d_inputs = bank.backward_batch(&out, &rf, &rz);
    let mut errs = check_params(&mut bank, &|b| objective(b, &inputs), 40, &mut rng);
    for h in 0..=num_parts {
        let mut a = Vec::new();
        let mut n = Vec::new();
        for idx in sample(&mut rng, batch * input_dim, 30.min(batch * input_dim)) {
            let (r, c) = (idx / input_dim, idx % input_dim);
            let mut plus = inputs.clone();
            plus[h][[r, c]] += STEP;
            let mut minus = inputs.clone();
            minus[h][[r, c]] -= STEP;
            a.push(d_inputs[h][[r, c]]);
            n.push((objective(&bank, &plus) - objective(&bank, &minus)) / (2.0 * STEP));
        }
        errs.insert(format!("input.{h}"), rel_err(&a, &n));
    }
    errs
}

/// ASA with anchors and assignments held fixed; in detach mode the
/// attention weights are held fixed as well.
pub fn asa_errors(n: usize, d: usize, k: usize, mode: AttentionGrad, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_matrix(&mut rng, n, d);
    let spec = PartitionSpec {
        num_parts: k,
        beta: 0.1,
        attention_grad: mode,
        ..PartitionSpec::default()
    };
    let parts = asa_forward(p.view(), &spec).unwrap();
    let r = random_matrix(&mut rng, k, d);
    let analytic = asa_backward(p.view(), &parts, &spec, &r);
    let objective = |p: &Array2<f64>| {
        let mut att = compute_attention(p.view(), &parts.anchor_indices, &spec).unwrap();
        if mode == AttentionGrad::Detach {
            att.weights = parts.attention.weights.clone();
        }
        (aggregate(p.view(), &att).unwrap() * &r).sum()
    };
    let mut a = Vec::new();
    let mut num = Vec::new();
    for i in 0..n {
        for j in 0..d {
            let mut plus = p.clone();
            plus[[i, j]] += STEP;
            let mut minus = p.clone();
            minus[[i, j]] -= STEP;
            a.push(analytic[[i, j]]);
            num.push((objective(&plus) - objective(&minus)) / (2.0 * STEP));
        }
    }
    rel_err(&a, &num)
}

/// Whole model on a small batch: CE plus triplet through heads, ASA and the
/// backbone.
pub fn model_errors(config: ModelConfig, per_tensor: usize, seed: u64) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GeoModel::new(config.clone(), seed).unwrap();
    let b = &config.backbone;
    let images: Vec<Image> = (0..4)
        .map(|_| random_image(&mut rng, b.image_height, b.image_width))
        .collect();
    let labels = vec![0, 0, 1, 1];
    let tags: Vec<SampleTag> = [
        (0, View::Uav),
        (0, View::Satellite),
        (1, View::Uav),
        (1, View::Satellite),
    ]
    .map(|(location, view)| SampleTag { location, view })
    .to_vec();
    let mode = HeadMode::Train { seed: 1 };
    let loss = |m: &GeoModel| {
        let fwd = m.forward_batch(&images, mode).unwrap();
        m.losses(&fwd, &labels, &tags).unwrap().0.total
    };
    let fwd = model.forward_batch(&images, mode).unwrap();
    let (_, df, dz) = model.losses(&fwd, &labels, &tags).unwrap();
    model.zero_grad();
    model.backward(&fwd, &df, &dz);
    check_params(&mut model, &loss, per_tensor, &mut rng)
}
