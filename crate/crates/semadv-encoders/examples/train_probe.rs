use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use semadv_encoders::model::{test_config, DualEncoder};
use semadv_encoders::scenes::{caption_vocab, render, sample_scene};
use semadv_encoders::train::{train, retrieval_accuracy, TrainSettings};

fn stats(model: &DualEncoder, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut imgs = Vec::new();
    let mut caps = Vec::new();
    for _ in 0..12 {
        let s = sample_scene(&mut rng);
        imgs.push(render(&s, model.config.resolution));
        caps.push(s.caption);
    }
    let ve: Vec<_> = imgs.iter().map(|i| model.image_embedding(i)).collect();
    let te: Vec<_> = caps.iter().map(|c| model.text_embedding(c)).collect();
    let mut vv = vec![]; let mut tt = vec![]; let mut vt_diag = vec![]; let mut vt_off = vec![];
    for i in 0..12 { for j in 0..12 {
        if i<j { vv.push(ve[i].dot(&ve[j])); tt.push(te[i].dot(&te[j])); }
        if i!=j { vt_off.push(ve[i].dot(&te[j])); }
    } vt_diag.push(ve[i].dot(&te[i])); }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("img-img {:.4}  txt-txt {:.4}  matched {:.4}  mismatched {:.4}",
        mean(&vv), mean(&tt), mean(&vt_diag), mean(&vt_off));
}

fn main() {
    let cfg = test_config("probe", caption_vocab());
    let mut model = DualEncoder::new(cfg, 7);
    println!("== init =="); stats(&model, 55);
    let settings = TrainSettings { pool: 192, epochs: 40, batch: 16, lr: 1.5e-3, warmup: 20, seed: 42, log_every: 60 };
    let r = train(&mut model, &settings);
    println!("== after =="); stats(&model, 55);
    println!("loss {:.4} retrieval {:.4}", r.final_loss, r.retrieval_accuracy);
}
