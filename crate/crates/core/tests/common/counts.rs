use hetgrow::model::ModelConfig;

/// Closed-form parameter count of a ViT with the given widths.
pub fn param_oracle(c: &ModelConfig) -> usize {
    let d = c.embed_dim;
    let p = (c.image_size / c.patch_size).pow(2);
    let pd = c.in_chans * c.patch_size * c.patch_size;
    let a = d / c.attn_reduce;
    let h = (d as f64 * c.mlp_ratio) as usize / c.fc_reduce;
    let lin = |i: usize, o: usize| i * o + o;
    let block = 2 * d + lin(d, 3 * a) + lin(a, d) + 2 * d + lin(d, h) + lin(h, d);
    lin(pd, d) + d + (p + 1) * d + c.depth * block + 2 * d + lin(d, c.num_classes)
}

/// Matmul MACs per image: linear layers on every token, `QKᵀ` and `AV`.
pub fn mac_oracle(c: &ModelConfig) -> u64 {
    let d = c.embed_dim as u64;
    let p = ((c.image_size / c.patch_size) as u64).pow(2);
    let t = p + 1;
    let pd = (c.in_chans * c.patch_size * c.patch_size) as u64;
    let a = d / c.attn_reduce as u64;
    let h = (c.embed_dim as f64 * c.mlp_ratio) as u64 / c.fc_reduce as u64;
    let per_block = t * (d * 3 * a + a * d + d * h + h * d) + 2 * t * t * a;
    p * pd * d + c.depth as u64 * per_block + d * c.num_classes as u64
}
