use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semadv_encoders::model::{test_config, DualEncoder};
use semadv_encoders::scenes::{caption_vocab, render, sample_scene};
use semadv_encoders::train::fixed_batch_overfit;

fn main() {
    let cfg = test_config("overfit", caption_vocab());
    let mut model = DualEncoder::new(cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut imgs = Vec::new();
    let mut caps: Vec<String> = Vec::new();
    while imgs.len() < 8 {
        let s = sample_scene(&mut rng);
        if caps.iter().any(|c| *c == s.caption) { continue; }
        imgs.push(render(&s, 16));
        caps.push(s.caption);
    }
    fixed_batch_overfit(&mut model, &imgs, &caps, 300, 2e-3);
}
