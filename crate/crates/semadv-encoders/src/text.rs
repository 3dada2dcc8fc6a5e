//! Text tower: word-level tokenizer, causal transformer, and projection into
//! the joint space.
//!
//! Pooling is the mean of the hidden states over the real token positions
//! (BOS through EOT). Causal masking means padding positions can never leak
//! into those states.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::nn::{randn2, Block, BlockCache, LayerNorm, LayerNormCache, ParamMut, ParamRef, Params};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOT: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved control tokens preceding the word vocabulary.
pub const SPECIAL_TOKENS: usize = 4;

/// Word-level vocabulary with fixed control tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub words: Vec<String>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn size(&self) -> usize {
        SPECIAL_TOKENS + self.words.len()
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| SPECIAL_TOKENS + i)
            .unwrap_or(UNK)
    }
}

/// Lowercase and split on non-alphanumeric runs.
pub fn word_split(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// `<bos> words <eot>` padded to `context`, plus the EOT position and whether
/// the input had to be truncated to fit.
pub fn encode(vocab: &Vocab, text: &str, context: usize) -> (Vec<usize>, usize, bool) {
    let words = word_split(text);
    let capacity = context - 2;
    let truncated = words.len() > capacity;
    let kept = if truncated { &words[..capacity] } else { &words[..] };
    let mut ids = Vec::with_capacity(context);
    ids.push(BOS);
    ids.extend(kept.iter().map(|w| vocab.id_of(w)));
    ids.push(EOT);
    let eot_pos = ids.len() - 1;
    ids.resize(context, PAD);
    (ids, eot_pos, truncated)
}

#[derive(Debug, Clone)]
pub struct TextTower {
    pub context: usize,
    pub width: usize,
    pub token_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    /// (width, joint_dim), no bias.
    pub proj: Array2<f64>,
}

pub struct TextForward {
    pub ids: Vec<usize>,
    pub eot_pos: usize,
    pub truncated: bool,
    pub embedding: Array1<f64>,
    pub joint_norm: f64,
    cache: TextCache,
}

struct TextCache {
    block_caches: Vec<BlockCache>,
    ln_final: LayerNormCache,
    hidden: Array2<f64>,
}

/// Mean of the hidden rows covering the real tokens (positions 0..=eot).
fn mean_pool(hidden: &Array2<f64>, eot_pos: usize) -> Array1<f64> {
    let n = (eot_pos + 1) as f64;
    let mut pooled = Array1::zeros(hidden.ncols());
    for pos in 0..=eot_pos {
        pooled += &hidden.row(pos);
    }
    pooled.mapv_inplace(|v| v / n);
    pooled
}

impl TextTower {
    pub fn new(
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        context: usize,
        width: usize,
        layers: usize,
        heads: usize,
        mlp_dim: usize,
        joint_dim: usize,
    ) -> Self {
        Self {
            context,
            width,
            token_embed: randn2(rng, vocab_size, width, 0.08),
            pos_embed: randn2(rng, context, width, 0.02),
            blocks: (0..layers).map(|_| Block::new(rng, width, heads, mlp_dim)).collect(),
            ln_final: LayerNorm::new(width),
            proj: randn2(rng, width, joint_dim, (width as f64).powf(-0.5)),
        }
    }

    pub fn forward(&self, vocab: &Vocab, text: &str) -> TextForward {
        let (ids, eot_pos, truncated) = encode(vocab, text, self.context);
        let mut x = Array2::zeros((self.context, self.width));
        for (pos, &id) in ids.iter().enumerate() {
            for j in 0..self.width {
                x[[pos, j]] = self.token_embed[[id, j]] + self.pos_embed[[pos, j]];
            }
        }
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, true);
            block_caches.push(cache);
            x = y;
        }
        let (hidden, ln_final) = self.ln_final.forward(&x);
        let pooled = mean_pool(&hidden, eot_pos);
        let joint_raw = pooled.dot(&self.proj);
        let joint_norm = joint_raw.dot(&joint_raw).sqrt();
        let embedding = joint_raw.mapv(|v| v / joint_norm);
        TextForward {
            ids,
            eot_pos,
            truncated,
            embedding,
            joint_norm,
            cache: TextCache {
                block_caches,
                ln_final,
                hidden,
            },
        }
    }

    /// Backward from a gradient w.r.t. the normalized embedding into the
    /// parameter accumulator. Used only by the trainer.
    pub fn backward_params(&self, fwd: &TextForward, d_embedding: &Array1<f64>, grads: &mut TextTower) {
        let pooled = mean_pool(&fwd.cache.hidden, fwd.eot_pos);
        let e_hat = {
            let u = pooled.dot(&self.proj);
            u.mapv(|v| v / fwd.joint_norm)
        };
        let coeff = d_embedding.dot(&e_hat);
        let d_u = (d_embedding - &(&e_hat * coeff)).mapv(|v| v / fwd.joint_norm);
        for i in 0..self.proj.nrows() {
            for j in 0..self.proj.ncols() {
                grads.proj[[i, j]] += pooled[i] * d_u[j];
            }
        }
        let d_pooled = self.proj.dot(&d_u);
        let mut d_hidden = Array2::zeros(fwd.cache.hidden.raw_dim());
        let n = (fwd.eot_pos + 1) as f64;
        for pos in 0..=fwd.eot_pos {
            d_hidden
                .row_mut(pos)
                .assign(&d_pooled.mapv(|v| v / n));
        }
        let mut d_x = self
            .ln_final
            .backward(&fwd.cache.ln_final, &d_hidden, Some(&mut grads.ln_final));
        for (i, block) in self.blocks.iter().enumerate().rev() {
            d_x = block.backward(&fwd.cache.block_caches[i], &d_x, Some(&mut grads.blocks[i]));
        }
        for (pos, &id) in fwd.ids.iter().enumerate() {
            for j in 0..self.width {
                grads.token_embed[[id, j]] += d_x[[pos, j]];
                grads.pos_embed[[pos, j]] += d_x[[pos, j]];
            }
        }
    }
}

impl Params for TextTower {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        out.push((format!("{prefix}.token_embed"), ParamRef::A2(&self.token_embed)));
        out.push((format!("{prefix}.pos_embed"), ParamRef::A2(&self.pos_embed)));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), out);
        }
        self.ln_final.visit(&format!("{prefix}.ln_final"), out);
        out.push((format!("{prefix}.proj"), ParamRef::A2(&self.proj)));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        out.push((format!("{prefix}.token_embed"), ParamMut::A2(&mut self.token_embed)));
        out.push((format!("{prefix}.pos_embed"), ParamMut::A2(&mut self.pos_embed)));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), out);
        }
        self.ln_final.visit_mut(&format!("{prefix}.ln_final"), out);
        out.push((format!("{prefix}.proj"), ParamMut::A2(&mut self.proj)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn vocab() -> Vocab {
        Vocab::new(vec!["a".into(), "red".into(), "circle".into(), "blue".into()])
    }

    #[test]
    fn encode_layout() {
        let v = vocab();
        let (ids, eot, truncated) = encode(&v, "A red circle", 8);
        assert_eq!(ids[0], BOS);
        assert_eq!(&ids[1..4], &[4, 5, 6]);
        assert_eq!(ids[4], EOT);
        assert_eq!(eot, 4);
        assert!(!truncated);
        assert_eq!(&ids[5..], &[PAD, PAD, PAD]);
    }

    #[test]
    fn encode_truncates_and_flags() {
        let v = vocab();
        let (ids, eot, truncated) = encode(&v, "a a a a a a a a a a", 6);
        assert!(truncated);
        assert_eq!(eot, 5);
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        let (ids, _, _) = encode(&v, "zebra", 5);
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn forward_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = vocab();
        let tower = TextTower::new(&mut rng, v.size(), 8, 12, 2, 2, 24, 8);
        let a = tower.forward(&v, "a red circle");
        let b = tower.forward(&v, "a red circle");
        assert_eq!(a.embedding, b.embedding);
        assert!((a.embedding.dot(&a.embedding).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let v = vocab();
        let mut tower = TextTower::new(&mut rng, v.size(), 8, 12, 2, 2, 24, 8);
        let w = Array1::from_shape_fn(8, |i| 0.3 * (i as f64 + 1.0));
        let fwd = tower.forward(&v, "a red circle");
        let mut grads = tower.zeroed_clone();
        tower.backward_params(&fwd, &w, &mut grads);

        let h = 1e-6;
        let mut offsets = vec![
            ("proj", 0usize),
            ("token_embed", 0),
            ("pos_embed", 0),
            ("block0", 0),
            ("ln_final", 0),
        ];
        for (name, _) in offsets.drain(..) {
            let analytic = {
                let mut slots = Vec::new();
                grads.visit("t", &mut slots);
                let (_, p) = slots
                    .into_iter()
                    .find(|(n, _)| n.contains(name))
                    .unwrap();
                match p {
                    ParamRef::A1(a) => a[0],
                    ParamRef::A2(a) => {
                        // token_embed row 0 is PAD whose grad position may be
                        // used; pick a coordinate touched by the forward pass.
                        if name == "token_embed" {
                            a[[BOS, 0]]
                        } else {
                            a[[0, 0]]
                        }
                    }
                }
            };
            let mut eval_at = |delta: f64| {
                {
                    let mut slots = Vec::new();
                    tower.visit_mut("t", &mut slots);
                    let (_, p) = slots.into_iter().find(|(n, _)| n.contains(name)).unwrap();
                    match p {
                        ParamMut::A1(a) => a[0] += delta,
                        ParamMut::A2(a) => {
                            if name == "token_embed" {
                                a[[BOS, 0]] += delta;
                            } else {
                                a[[0, 0]] += delta;
                            }
                        }
                    }
                }
                let f = tower.forward(&v, "a red circle");
                f.embedding.dot(&w)
            };
            let fp = eval_at(h);
            let fm = eval_at(-2.0 * h);
            eval_at(h);
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-10);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-5,
                "{name}: fd {fd} vs analytic {analytic}"
            );
        }
    }
}
