//! Parameter shape audit: every tensor the region model owns, with the shape
//! the configuration implies.

use std::collections::BTreeMap;

use super::{encoder::bottleneck_positions, NetworkConfig, NUM_OUTPUT_TOKENS, NUM_SLOTS};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub type ShapeTable = BTreeMap<String, Vec<usize>>;

fn linear(t: &mut ShapeTable, name: &str, i: usize, o: usize, bias: bool) {
    t.insert(format!("{name}.weight"), vec![o, i]);
    if bias {
        t.insert(format!("{name}.bias"), vec![o]);
    }
}

fn norm(t: &mut ShapeTable, name: &str, d: usize) {
    t.insert(format!("{name}.weight"), vec![d]);
    t.insert(format!("{name}.bias"), vec![d]);
}

fn mlp(t: &mut ShapeTable, name: &str, dims: &[usize]) {
    for (i, w) in dims.windows(2).enumerate() {
        linear(t, &format!("{name}.layers.{i}"), w[0], w[1], true);
    }
}

fn attention(t: &mut ShapeTable, name: &str, d: usize, downsample: usize) {
    let inner = d / downsample;
    for p in ["q_proj", "k_proj", "v_proj"] {
        linear(t, &format!("{name}.{p}"), d, inner, true);
    }
    linear(t, &format!("{name}.out_proj"), inner, d, true);
}

/// Trainable parameter shapes implied by `cfg`.
pub fn expected_shapes(cfg: &NetworkConfig) -> ShapeTable {
    let mut t = ShapeTable::new();
    let e = cfg.encoder_dim;
    let g = cfg.grid_size();
    let w = cfg.window_size;
    let hidden = (e as f64 * cfg.mlp_ratio) as usize;
    let enc = "image_encoder";
    linear(&mut t, &format!("{enc}.patch_embed"), 3 * cfg.patch_size * cfg.patch_size, e, true);
    t.insert(format!("{enc}.pos_embed"), vec![g * g, e]);
    for i in 0..cfg.encoder_depth {
        let b = format!("{enc}.blocks.{i}");
        norm(&mut t, &format!("{b}.norm1"), e);
        norm(&mut t, &format!("{b}.norm2"), e);
        linear(&mut t, &format!("{b}.attn.qkv"), e, 3 * e, true);
        linear(&mut t, &format!("{b}.attn.proj"), e, e, true);
        t.insert(
            format!("{b}.attn.relative_position_bias_table"),
            vec![(2 * w - 1) * (2 * w - 1), cfg.encoder_heads],
        );
        linear(&mut t, &format!("{b}.mlp.fc1"), e, hidden, true);
        linear(&mut t, &format!("{b}.mlp.fc2"), hidden, e, true);
    }
    for i in 0..bottleneck_positions(cfg.encoder_depth, cfg.cross_window_blocks).len() {
        let b = format!("{enc}.cross.{i}");
        linear(&mut t, &format!("{b}.conv1"), e, e / 2, false);
        t.insert(format!("{b}.conv2.weight"), vec![e / 2, e / 2, 3, 3]);
        linear(&mut t, &format!("{b}.conv3"), e / 2, e, false);
        norm(&mut t, &format!("{b}.norm1"), e / 2);
        norm(&mut t, &format!("{b}.norm2"), e / 2);
        norm(&mut t, &format!("{b}.norm3"), e);
    }
    let d = cfg.decoder_dim;
    linear(&mut t, &format!("{enc}.neck"), e, d, true);
    norm(&mut t, &format!("{enc}.neck_norm"), d);

    t.insert("prompt_encoder.label_embed".into(), vec![super::prompt::NUM_LABEL_ROWS, d]);

    let dec = "mask_decoder";
    t.insert(format!("{dec}.output_tokens"), vec![NUM_OUTPUT_TOKENS, d]);
    for i in 0..cfg.decoder_depth {
        let l = format!("{dec}.layers.{i}");
        attention(&mut t, &format!("{l}.self_attn"), d, 1);
        attention(&mut t, &format!("{l}.cross_token_to_image"), d, cfg.attention_downsample);
        attention(&mut t, &format!("{l}.cross_image_to_token"), d, cfg.attention_downsample);
        linear(&mut t, &format!("{l}.mlp.fc1"), d, cfg.decoder_mlp_dim, true);
        linear(&mut t, &format!("{l}.mlp.fc2"), cfg.decoder_mlp_dim, d, true);
        for n in 1..=4 {
            norm(&mut t, &format!("{l}.norm{n}"), d);
        }
    }
    attention(&mut t, &format!("{dec}.final_attn"), d, cfg.attention_downsample);
    norm(&mut t, &format!("{dec}.norm_final"), d);
    linear(&mut t, &format!("{dec}.upscale1"), d, d, true);
    norm(&mut t, &format!("{dec}.upscale_norm"), d / 4);
    linear(&mut t, &format!("{dec}.upscale2"), d / 4, d / 2, true);
    for i in 0..NUM_SLOTS {
        mlp(&mut t, &format!("{dec}.hypernet.{i}"), &[d, d, d, d / 8]);
    }
    mlp(&mut t, &format!("{dec}.iou_head"), &[d, d, d, NUM_SLOTS]);
    mlp(
        &mut t,
        "semantic_head",
        &[d, cfg.semantic_hidden, cfg.semantic_hidden, cfg.text_dim],
    );
    t
}

/// Compares the store's image-path parameters against [`expected_shapes`].
/// Returns the number of audited tensors.
pub fn audit(store: &ParamStore, cfg: &NetworkConfig) -> Result<usize> {
    let expected = expected_shapes(cfg);
    let actual: ShapeTable = store
        .vars()
        .into_iter()
        .filter(|(k, _)| super::IMAGE_PATH_PREFIXES.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k, v.dims().to_vec()))
        .collect();
    for (name, shape) in &expected {
        match actual.get(name) {
            Some(s) if s == shape => {}
            Some(s) => {
                return Err(Error::InvalidConfig(format!(
                    "{name}: shape {s:?}, expected {shape:?}"
                )))
            }
            None => return Err(Error::NotFound(name.clone())),
        }
    }
    if let Some(extra) = actual.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::InvalidConfig(format!("unexpected parameter {extra}")));
    }
    Ok(expected.len())
}
