//! Symmetric-contrastive trainer used to produce the bundled encoder weights.
//!
//! Batches of rendered scenes are embedded by both towers; the loss is the
//! usual two-way cross-entropy over scaled cosine logits with a learnable
//! temperature. Optimization is Adam over every parameter tensor.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::DualEncoder;
use crate::nn::{ParamMut, Params};
use crate::scenes::{render, sample_scene};

pub struct TrainSettings {
    /// Number of distinct pregenerated scenes to train on.
    pub pool: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            pool: 256,
            epochs: 60,
            batch: 16,
            lr: 1.5e-3,
            warmup: 30,
            seed: 0,
            log_every: 100,
        }
    }
}

struct Adam {
    m: DualEncoder,
    v: DualEncoder,
    m_scale: f64,
    v_scale: f64,
    t: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-8;
const MAX_LOGIT_SCALE: f64 = 4.6051701859880914; // ln(100)

impl Adam {
    fn new(model: &DualEncoder) -> Self {
        Self {
            m: model.zeroed_clone(),
            v: model.zeroed_clone(),
            m_scale: 0.0,
            v_scale: 0.0,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DualEncoder, grads: &DualEncoder, grad_scale: f64, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let mut p_slots = Vec::new();
        model.visit_mut("", &mut p_slots);
        let mut g_slots = Vec::new();
        let grads_ref: &DualEncoder = grads;
        grads_ref.visit("", &mut g_slots);
        let mut m_slots = Vec::new();
        self.m.visit_mut("", &mut m_slots);
        let mut v_slots = Vec::new();
        self.v.visit_mut("", &mut v_slots);
        for (((p, g), m), v) in p_slots
            .iter_mut()
            .zip(g_slots.iter())
            .zip(m_slots.iter_mut())
            .zip(v_slots.iter_mut())
        {
            update_tensor(&mut p.1, &g.1, &mut m.1, &mut v.1, lr, bc1, bc2);
        }
        // Scalar logit scale.
        let g = grads.logit_scale;
        self.m_scale = BETA1 * self.m_scale + (1.0 - BETA1) * g;
        self.v_scale = BETA2 * self.v_scale + (1.0 - BETA2) * g * g;
        let mh = self.m_scale / bc1;
        let vh = self.v_scale / bc2;
        model.logit_scale -= lr * mh / (vh.sqrt() + ADAM_EPS);
        model.logit_scale = model.logit_scale.min(MAX_LOGIT_SCALE);
        let _ = grad_scale;
    }
}

fn update_tensor(
    p: &mut ParamMut<'_>,
    g: &crate::nn::ParamRef<'_>,
    m: &mut ParamMut<'_>,
    v: &mut ParamMut<'_>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    use crate::nn::ParamRef;
    let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
    };
    match (p, g, m, v) {
        (ParamMut::A1(p), ParamRef::A1(g), ParamMut::A1(m), ParamMut::A1(v)) => {
            for i in 0..p.len() {
                apply(&mut p[i], g[i], &mut m[i], &mut v[i]);
            }
        }
        (ParamMut::A2(p), ParamRef::A2(g), ParamMut::A2(m), ParamMut::A2(v)) => {
            for ((p, &g), (m, v)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                apply(p, g, m, v);
            }
        }
        _ => unreachable!("parameter enumeration order diverged"),
    }
}

pub struct TrainReport {
    pub final_loss: f64,
    pub retrieval_accuracy: f64,
}

/// Train in place; returns the last-step loss and a held-out retrieval score.
///
/// Scenes are pregenerated into a fixed pool and revisited over shuffled
/// epochs; retrieval is measured on freshly sampled held-out scenes.
pub fn train(model: &mut DualEncoder, settings: &TrainSettings) -> TrainReport {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let (pool_images, pool_captions) =
        sample_batch(&mut rng, settings.pool, model.config.resolution);
    let mut adam = Adam::new(model);
    let mut last_loss = f64::NAN;
    let steps_per_epoch = settings.pool / settings.batch;
    let total_steps = steps_per_epoch * settings.epochs;
    let mut step = 0;
    let mut order: Vec<usize> = (0..settings.pool).collect();
    for _epoch in 0..settings.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(settings.batch) {
            if chunk.len() < settings.batch {
                break;
            }
            let images: Vec<_> = chunk.iter().map(|&i| pool_images[i].clone()).collect();
            let captions: Vec<_> = chunk.iter().map(|&i| pool_captions[i].clone()).collect();
            let lr = schedule(settings, step, total_steps);
            let (loss, grads) = contrastive_step(model, &images, &captions);
            adam.step(model, &grads, 1.0, lr);
            last_loss = loss;
            step += 1;
            if settings.log_every > 0 && step % settings.log_every == 0 {
                eprintln!(
                    "[{}] step {:>5}/{} loss {:.4} scale {:.3}",
                    model.config.id,
                    step,
                    total_steps,
                    loss,
                    model.logit_scale.exp()
                );
            }
        }
    }
    let retrieval_accuracy = retrieval_accuracy(model, settings.seed ^ 0x5eed, 48);
    TrainReport {
        final_loss: last_loss,
        retrieval_accuracy,
    }
}

fn schedule(s: &TrainSettings, step: usize, total: usize) -> f64 {
    if step < s.warmup {
        s.lr * (step + 1) as f64 / s.warmup as f64
    } else {
        // Cosine decay to 10%.
        let p = (step - s.warmup) as f64 / (total - s.warmup).max(1) as f64;
        s.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    batch: usize,
    resolution: usize,
) -> (Vec<ndarray::Array3<f64>>, Vec<String>) {
    let mut images = Vec::with_capacity(batch);
    let mut captions: Vec<String> = Vec::with_capacity(batch);
    while images.len() < batch {
        let scene = sample_scene(rng);
        // Distinct captions within a batch keep the contrastive labels clean.
        if captions.iter().any(|c| *c == scene.caption) {
            continue;
        }
        images.push(render(&scene, resolution));
        captions.push(scene.caption);
    }
    (images, captions)
}

/// One forward/backward pass; returns (loss, parameter gradients).
fn contrastive_step(
    model: &DualEncoder,
    images: &[ndarray::Array3<f64>],
    captions: &[String],
) -> (f64, DualEncoder) {
    let b = images.len();
    let d = model.config.joint_dim;
    let img_fwd: Vec<_> = images.iter().map(|i| model.forward_image(i)).collect();
    let txt_fwd: Vec<_> = captions.iter().map(|c| model.forward_text(c)).collect();
    let mut v = Array2::zeros((b, d));
    let mut t = Array2::zeros((b, d));
    for i in 0..b {
        v.row_mut(i).assign(&img_fwd[i].embedding);
        t.row_mut(i).assign(&txt_fwd[i].embedding);
    }
    let sims = v.dot(&t.t());
    let scale = model.logit_scale.exp();
    let logits = sims.mapv(|s| s * scale);

    let row_sm = softmax_rows_of(&logits);
    let col_sm = softmax_rows_of(&logits.t().to_owned());
    let mut loss = 0.0;
    for i in 0..b {
        loss -= row_sm[[i, i]].ln();
        loss -= col_sm[[i, i]].ln();
    }
    loss /= 2.0 * b as f64;

    // d loss / d logits.
    let mut d_logits = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_logits[[i, j]] =
                ((row_sm[[i, j]] - delta) + (col_sm[[j, i]] - delta)) / (2.0 * b as f64);
        }
    }
    let mut grads = model.zeroed_clone();
    grads.logit_scale = (&d_logits * &logits).sum();
    let d_sims = d_logits.mapv(|g| g * scale);
    let d_v = d_sims.dot(&t);
    let d_t = d_sims.t().dot(&v);
    for i in 0..b {
        let d_emb: Array1<f64> = d_v.row(i).to_owned();
        model
            .vision
            .backward_to_pixels(&img_fwd[i], None, Some(&d_emb), Some(&mut grads.vision));
        let d_temb: Array1<f64> = d_t.row(i).to_owned();
        model.text.backward_params(&txt_fwd[i], &d_temb, &mut grads.text);
    }
    (loss, grads)
}

fn softmax_rows_of(x: &Array2<f64>) -> Array2<f64> {
    crate::nn::softmax_rows(x)
}

/// Top-1 image→text retrieval accuracy over a held-out sample.
pub fn retrieval_accuracy(model: &DualEncoder, seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (images, captions) = sample_batch(&mut rng, n, model.config.resolution);
    let embs: Vec<_> = images.iter().map(|i| model.image_embedding(i)).collect();
    let tembs: Vec<_> = captions.iter().map(|c| model.text_embedding(c)).collect();
    let mut hits = 0;
    for (i, e) in embs.iter().enumerate() {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, te) in tembs.iter().enumerate() {
            let s = e.dot(te);
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}


/// Diagnostic: repeatedly step on one fixed batch, printing the loss curve.
pub fn fixed_batch_overfit(
    model: &mut DualEncoder,
    images: &[ndarray::Array3<f64>],
    captions: &[String],
    steps: usize,
    lr: f64,
) {
    let mut adam = Adam::new(model);
    for step in 0..steps {
        let (loss, grads) = contrastive_step(model, images, captions);
        adam.step(model, &grads, 1.0, lr);
        if (step + 1) % 25 == 0 {
            eprintln!("overfit step {:>4} loss {:.5} scale {:.3}", step + 1, loss, model.logit_scale.exp());
        }
    }
}
