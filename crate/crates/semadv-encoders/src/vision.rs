//! Vision transformer tower: patch embedding, CLS token, pre-LN blocks,
//! final layer norm, and a linear projection into the joint space.
//!
//! `forward` captures everything `backward_to_pixels` needs, plus the
//! final-layer attention probabilities and value vectors that saliency
//! computations consume.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::{randn1, randn2, Block, BlockCache, LayerNorm, LayerNormCache, Linear, ParamMut, ParamRef, Params};

/// Pixel normalization applied before patch embedding: (x - MEAN) / STD.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct VisionTower {
    pub resolution: usize,
    pub patch_size: usize,
    pub width: usize,
    pub patch_embed: Linear,
    pub cls_token: Array1<f64>,
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
    /// (width, joint_dim), no bias.
    pub proj: Array2<f64>,
}

/// Everything produced by one vision forward pass.
pub struct VisionForward {
    /// Final hidden states after the post layer norm, (HW+1, width). CLS is row 0.
    pub hidden: Array2<f64>,
    /// Unnormalized joint-space vector `u = proj^T · hidden[0]`.
    pub joint_raw: Array1<f64>,
    /// `u / ||u||`.
    pub embedding: Array1<f64>,
    pub joint_norm: f64,
    /// Head-averaged CLS→patch attention of the last block, length HW.
    pub attn_cls: Array1<f64>,
    /// Value vectors of the last block for the patch tokens, (HW, width).
    pub values: Array2<f64>,
    cache: VisionCache,
}

struct VisionCache {
    patches: Array2<f64>,
    tokens_in: Array2<f64>,
    block_inputs: Vec<Array2<f64>>,
    block_caches: Vec<BlockCache>,
    ln_post: LayerNormCache,
}

impl VisionTower {
    pub fn new(
        rng: &mut ChaCha8Rng,
        resolution: usize,
        patch_size: usize,
        width: usize,
        layers: usize,
        heads: usize,
        mlp_dim: usize,
        joint_dim: usize,
    ) -> Self {
        assert!(resolution % patch_size == 0, "resolution must be a multiple of patch size");
        let grid = resolution / patch_size;
        let tokens = grid * grid + 1;
        let patch_dim = patch_size * patch_size * 3;
        Self {
            resolution,
            patch_size,
            width,
            patch_embed: Linear::new(rng, patch_dim, width, 0.02),
            cls_token: randn1(rng, width, 0.02),
            pos_embed: randn2(rng, tokens, width, 0.02),
            blocks: (0..layers).map(|_| Block::new(rng, width, heads, mlp_dim)).collect(),
            ln_post: LayerNorm::new(width),
            proj: randn2(rng, width, joint_dim, (width as f64).powf(-0.5)),
        }
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flatten an (R, R, 3) image into normalized per-patch rows,
    /// (HW, P·P·3), patch-major then (py, px, c) row-major inside a patch.
    fn extract_patches(&self, image: &Array3<f64>) -> Array2<f64> {
        let p = self.patch_size;
        let grid = self.grid();
        let patch_dim = p * p * 3;
        let mut out = Array2::zeros((grid * grid, patch_dim));
        for gy in 0..grid {
            for gx in 0..grid {
                let row = gy * grid + gx;
                let mut col = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            out[[row, col]] =
                                (image[[gy * p + py, gx * p + px, c]] - PIXEL_MEAN) / PIXEL_STD;
                            col += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, image: &Array3<f64>) -> VisionForward {
        let grid = self.grid();
        let hw = grid * grid;
        let patches = self.extract_patches(image);
        let patch_tokens = self.patch_embed.forward(&patches);
        let mut tokens = Array2::zeros((hw + 1, self.width));
        tokens.row_mut(0).assign(&self.cls_token);
        tokens.slice_mut(ndarray::s![1.., ..]).assign(&patch_tokens);
        tokens += &self.pos_embed;
        let tokens_in = tokens.clone();

        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut x = tokens;
        for block in &self.blocks {
            block_inputs.push(x.clone());
            let (y, cache) = block.forward(&x, false);
            block_caches.push(cache);
            x = y;
        }
        let (hidden, ln_post_cache) = self.ln_post.forward(&x);

        let last = block_caches.last().expect("at least one block");
        let mut attn_cls = Array1::zeros(hw);
        for p in &last.attn.probs {
            for i in 0..hw {
                attn_cls[i] += p[[0, i + 1]];
            }
        }
        attn_cls.mapv_inplace(|v| v / self.blocks.last().unwrap().attn.heads as f64);
        let values = last.attn.v.slice(ndarray::s![1.., ..]).to_owned();

        let o_cls = hidden.row(0).to_owned();
        let joint_raw = o_cls.dot(&self.proj);
        let joint_norm = joint_raw.dot(&joint_raw).sqrt();
        let embedding = joint_raw.mapv(|v| v / joint_norm);

        VisionForward {
            hidden,
            joint_raw,
            embedding,
            joint_norm,
            attn_cls,
            values,
            cache: VisionCache {
                patches,
                tokens_in,
                block_inputs,
                block_caches,
                ln_post: ln_post_cache,
            },
        }
    }

    /// Backpropagate seeds to image pixels.
    ///
    /// `d_hidden` is the loss gradient w.r.t. the post-LN hidden states and
    /// `d_embedding` the gradient w.r.t. the *normalized* joint embedding.
    /// Returns an (R, R, 3) pixel gradient; accumulates parameter gradients
    /// when `grads` is supplied.
    pub fn backward_to_pixels(
        &self,
        fwd: &VisionForward,
        d_hidden: Option<&Array2<f64>>,
        d_embedding: Option<&Array1<f64>>,
        mut grads: Option<&mut VisionTower>,
    ) -> Array3<f64> {
        let grid = self.grid();
        let p = self.patch_size;
        let hw = grid * grid;

        let mut d_hidden_total = match d_hidden {
            Some(d) => d.clone(),
            None => Array2::zeros(fwd.hidden.raw_dim()),
        };
        if let Some(d_emb) = d_embedding {
            // Through the normalization: d_u = (d_e - (d_e·ê) ê) / ||u||.
            let e_hat = &fwd.embedding;
            let proj_coeff = d_emb.dot(e_hat);
            let d_u = (d_emb - &(e_hat * proj_coeff)).mapv(|v| v / fwd.joint_norm);
            // Through the projection: d_o_cls = proj · d_u.
            let d_o_cls = self.proj.dot(&d_u);
            if let Some(g) = grads.as_deref_mut() {
                let o_cls = fwd.hidden.row(0);
                for i in 0..self.proj.nrows() {
                    for j in 0..self.proj.ncols() {
                        g.proj[[i, j]] += o_cls[i] * d_u[j];
                    }
                }
            }
            let mut row0 = d_hidden_total.row_mut(0);
            row0 += &d_o_cls;
        }

        let mut d_x = self.ln_post.backward(
            &fwd.cache.ln_post,
            &d_hidden_total,
            grads.as_deref_mut().map(|g| &mut g.ln_post),
        );
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let g_block = grads.as_deref_mut().map(|g| &mut g.blocks[i]);
            d_x = block.backward(&fwd.cache.block_caches[i], &d_x, g_block);
        }
        // d_x is now the gradient w.r.t. tokens_in = [cls; patch_embed] + pos.
        if let Some(g) = grads.as_deref_mut() {
            g.pos_embed += &d_x;
            let mut cls = g.cls_token.view_mut();
            cls += &d_x.row(0);
        }
        let d_patch_tokens = d_x.slice(ndarray::s![1.., ..]).to_owned();
        let d_patches = self.patch_embed.backward(
            &fwd.cache.patches,
            &d_patch_tokens,
            grads.as_deref_mut().map(|g| &mut g.patch_embed),
        );

        let mut d_image = Array3::zeros((self.resolution, self.resolution, 3));
        for gy in 0..grid {
            for gx in 0..grid {
                let row = gy * grid + gx;
                let mut col = 0;
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            d_image[[gy * p + py, gx * p + px, c]] =
                                d_patches[[row, col]] / PIXEL_STD;
                            col += 1;
                        }
                    }
                }
            }
        }
        let _ = hw;
        d_image
    }

    /// Gradient of `cos(embedding, text)` w.r.t. the post-LN CLS hidden state,
    /// flowing through the projection and the embedding normalization.
    pub fn cls_cosine_gradient(&self, fwd: &VisionForward, text_embedding: &Array1<f64>) -> Array1<f64> {
        let e_hat = &fwd.embedding;
        let cos = e_hat.dot(text_embedding);
        let d_u = (text_embedding - &(e_hat * cos)).mapv(|v| v / fwd.joint_norm);
        self.proj.dot(&d_u)
    }
}

impl Params for VisionTower {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), out);
        out.push((format!("{prefix}.cls_token"), ParamRef::A1(&self.cls_token)));
        out.push((format!("{prefix}.pos_embed"), ParamRef::A2(&self.pos_embed)));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), out);
        }
        self.ln_post.visit(&format!("{prefix}.ln_post"), out);
        out.push((format!("{prefix}.proj"), ParamRef::A2(&self.proj)));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        self.patch_embed.visit_mut(&format!("{prefix}.patch_embed"), out);
        out.push((format!("{prefix}.cls_token"), ParamMut::A1(&mut self.cls_token)));
        out.push((format!("{prefix}.pos_embed"), ParamMut::A2(&mut self.pos_embed)));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), out);
        }
        self.ln_post.visit_mut(&format!("{prefix}.ln_post"), out);
        out.push((format!("{prefix}.proj"), ParamMut::A2(&mut self.proj)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn tiny_tower(seed: u64) -> VisionTower {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VisionTower::new(&mut rng, 16, 8, 12, 2, 2, 24, 8)
    }

    fn random_image(rng: &mut ChaCha8Rng, r: usize) -> Array3<f64> {
        Array3::from_shape_fn((r, r, 3), |_| rng.gen::<f64>())
    }

    #[test]
    fn token_count_and_shapes() {
        let tower = tiny_tower(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 16);
        let fwd = tower.forward(&img);
        assert_eq!(fwd.hidden.nrows(), 5); // 2x2 grid + CLS
        assert_eq!(fwd.attn_cls.len(), 4);
        assert_eq!(fwd.values.nrows(), 4);
        assert!((fwd.embedding.dot(&fwd.embedding).sqrt() - 1.0).abs() < 1e-12);
        assert!(fwd.attn_cls.iter().all(|&a| a >= 0.0 && a.is_finite()));
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let tower = tiny_tower(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut img = random_image(&mut rng, 16);
        // Loss: weighted sum of hidden states plus a dot with the embedding.
        let w_hidden = Array2::from_shape_fn((5, 12), |_| rng.gen::<f64>() - 0.5);
        let w_emb = Array1::from_shape_fn(8, |_| rng.gen::<f64>() - 0.5);
        let loss = |img: &Array3<f64>| {
            let f = tower.forward(img);
            (&f.hidden * &w_hidden).sum() + f.embedding.dot(&w_emb)
        };
        let fwd = tower.forward(&img);
        let grad = tower.backward_to_pixels(&fwd, Some(&w_hidden), Some(&w_emb), None);
        let h = 1e-6;
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..12 {
            let i = rng2.gen_range(0..16);
            let j = rng2.gen_range(0..16);
            let c = rng2.gen_range(0..3);
            let orig = img[[i, j, c]];
            img[[i, j, c]] = orig + h;
            let fp = loss(&img);
            img[[i, j, c]] = orig - h;
            let fm = loss(&img);
            img[[i, j, c]] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grad[[i, j, c]];
            let denom = fd.abs().max(an.abs()).max(1e-10);
            assert!(((fd - an) / denom).abs() < 1e-6, "fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn cls_cosine_gradient_matches_projection_chain() {
        let tower = tiny_tower(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = random_image(&mut rng, 16);
        let fwd = tower.forward(&img);
        let mut t = Array1::from_shape_fn(8, |_| rng.gen::<f64>() - 0.5);
        let norm = t.dot(&t).sqrt();
        t.mapv_inplace(|v| v / norm);
        let g = tower.cls_cosine_gradient(&fwd, &t);
        // Finite differences on the CLS hidden state through proj+normalize.
        let cos_at = |o: &Array1<f64>| {
            let u = o.dot(&tower.proj);
            let n = u.dot(&u).sqrt();
            u.dot(&t) / n
        };
        let o0 = fwd.hidden.row(0).to_owned();
        let h = 1e-6;
        for k in 0..o0.len() {
            let mut op = o0.clone();
            op[k] += h;
            let mut om = o0.clone();
            om[k] -= h;
            let fd = (cos_at(&op) - cos_at(&om)) / (2.0 * h);
            let denom = fd.abs().max(g[k].abs()).max(1e-10);
            assert!(((fd - g[k]) / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let tower = tiny_tower(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = random_image(&mut rng, 16);
        let a = tower.forward(&img);
        let b = tower.forward(&img);
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.attn_cls, b.attn_cls);
    }
}
