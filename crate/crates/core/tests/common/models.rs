use hetgrow::model::ModelConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    loop {
        let embed = [8, 12, 16][rng.random_range(0..3)];
        let cfg = ModelConfig {
            embed_dim: embed,
            depth: rng.random_range(1..4),
            num_heads: [1, 2, 4][rng.random_range(0..3)],
            mlp_ratio: [1.0, 2.0, 4.0][rng.random_range(0..3)],
            fc_reduce: [1, 2, 4][rng.random_range(0..3)],
            attn_reduce: [1, 2][rng.random_range(0..2)],
            patch_size: 2,
            image_size: [2, 4, 6][rng.random_range(0..3)],
            in_chans: rng.random_range(1..4),
            num_classes: rng.random_range(2..6),
        };
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}
