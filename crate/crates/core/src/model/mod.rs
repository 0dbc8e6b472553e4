//! The assembled classifier, masked-autoencoder pretraining, training and
//! checkpoints.
//!
//! Forward pipeline: normalize, farthest point sample the patch centers,
//! group their nearest neighbors, resort, embed and add positional
//! encodings, run the Transformer stack and fuse it into the token stream,
//! run the bi-SSM stack, normalize, pool (mean ‖ max) and classify.

mod checkpoint;
mod config;
mod mae;
mod train;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{bi_ssm_block, embed_patches, pos_encode, transformer_block, Graph, Params};
use crate::numeric::{Tensor, Var};
use crate::pointops::{farthest_point_sample, knn_group, normalize_cloud, PatchSet, PointCloud};
use crate::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, MAGIC};
pub use config::{module_of, param_breakdown, param_count, FusionMode, ModelConfig};
pub use mae::{mae_loss, mae_mask, MaskSplit};
pub use train::{
    evaluate, evaluate_prepared, init_from, prepare_dataset, train_epoch, EpochStats, Evaluation, Objective,
    TrainConfig, TrainState,
};

/// Patch set of an already normalized (and possibly augmented) cloud, in
/// serialization order.
pub fn sample_patches(cloud: &PointCloud, cfg: &ModelConfig, seed: u64) -> Result<PatchSet> {
    if cloud.len() < cfg.n_patches || cloud.len() < cfg.patch_size {
        return Err(Error::range(format!(
            "cloud has {} points; need at least {} patches and {} points per patch",
            cloud.len(),
            cfg.n_patches,
            cfg.patch_size
        )));
    }
    let centers = farthest_point_sample(cloud, cfg.n_patches, seed)?;
    Ok(knn_group(cloud, &centers, cfg.patch_size)?
        .with_order(cfg.order)
        .ordered())
}

/// Normalizes the cloud and samples its patches.
pub fn prepare(cloud: &PointCloud, cfg: &ModelConfig, seed: u64) -> Result<PatchSet> {
    sample_patches(&normalize_cloud(cloud), cfg, seed)
}

fn stacked_points(patches: &PatchSet) -> Tensor {
    let rows: Vec<[f64; 3]> = patches.patches.iter().flatten().copied().collect();
    Tensor::from_rows(&rows)
}

/// Patch tokens plus positional encodings of their centers, `n × C`, in the
/// patch set's stored order.
pub fn embed_tokens(g: &mut Graph<'_>, patches: &PatchSet, prefix: &str) -> Result<Var> {
    let pts = g.constant(stacked_points(patches));
    let tokens = embed_patches(g, pts, patches.patch_size(), &format!("{prefix}.embed"))?;
    let centers = g.constant(patches.centers_tensor());
    let pos = pos_encode(g, centers, &format!("{prefix}.pos"));
    Ok(g.tape.add(tokens, pos))
}

/// Joins the Transformer contribution with the tokens it started from.
pub fn fuse(g: &mut Graph<'_>, transformer_out: Var, pre_tokens: Var, mode: FusionMode) -> Result<Var> {
    let (a, b) = (g.value(transformer_out).shape(), g.value(pre_tokens).shape());
    if a != b || a.len() != 2 {
        return Err(Error::shape(format!("cannot fuse {a:?} with {b:?}")));
    }
    Ok(match mode {
        FusionMode::Residual => g.tape.add(transformer_out, pre_tokens),
        FusionMode::Concat => g.tape.concat_cols(&[transformer_out, pre_tokens]),
    })
}

/// Transformer stack, fusion, bi-SSM stack and final norm over `n × C`
/// tokens, giving `n × W`.
///
/// The fused Transformer output is the stack's residual branch `T(x) - x`,
/// so that zeroed branch projections leave the bare bi-SSM model, and zero
/// Transformer layers skip fusion altogether.
pub fn encode(g: &mut Graph<'_>, tokens: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut x = tokens;
    if cfg.transformer_layers > 0 {
        let dims = cfg.transformer_dims();
        let mut t = tokens;
        for i in 0..cfg.transformer_layers {
            t = transformer_block(g, t, &format!("encoder.transformer.{i}"), &dims)?;
        }
        let branch = g.tape.sub(t, tokens);
        x = fuse(g, branch, tokens, cfg.fusion)?;
    }
    let dims = cfg.ssm_dims();
    for j in 0..cfg.bissm_layers {
        x = bi_ssm_block(g, x, &format!("encoder.bissm.{j}"), &dims)?.output;
    }
    Ok(g.norm(x, "encoder.norm"))
}

/// Mean and max pooling, a hidden layer with dropout (when `dropout` holds
/// an RNG), and the class logits (`1 × K`).
pub fn classify_head(g: &mut Graph<'_>, features: Var, cfg: &ModelConfig, dropout: Option<&mut ChaCha8Rng>) -> Var {
    let mean = g.tape.mean_rows(features);
    let max = g.tape.max_rows(features);
    let pooled = g.tape.concat_cols(&[mean, max]);
    let h = g.linear(pooled, "head.fc1");
    let mut h = g.tape.gelu(h);
    if let Some(rng) = dropout {
        if cfg.dropout > 0.0 {
            let keep = 1.0 / (1.0 - cfg.dropout);
            let width = g.value(h).cols();
            let mask = Tensor::from_fn(
                &[1, width],
                |_| {
                    if rng.random::<f64>() < cfg.dropout {
                        0.0
                    } else {
                        keep
                    }
                },
            );
            let m = g.constant(mask);
            h = g.tape.mul(h, m);
        }
    }
    g.linear(h, "head.fc2")
}

/// Class logits of a prepared patch set.
pub fn logits(
    g: &mut Graph<'_>,
    patches: &PatchSet,
    cfg: &ModelConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let tokens = embed_tokens(g, patches, "encoder")?;
    let features = encode(g, tokens, cfg)?;
    Ok(classify_head(g, features, cfg, dropout))
}

/// Inference: `num_classes` logits of a raw cloud, deterministic in
/// `(cloud, params, cfg, seed)`.
pub fn forward(cloud: &PointCloud, params: &Params, cfg: &ModelConfig, seed: u64) -> Result<Vec<f64>> {
    let patches = prepare(cloud, cfg, seed)?;
    forward_prepared(&patches, params, cfg)
}

pub fn forward_prepared(patches: &PatchSet, params: &Params, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut g = Graph::inference(params);
    let out = logits(&mut g, patches, cfg, None)?;
    let v = g.value(out);
    v.check_finite()?;
    Ok(v.data().to_vec())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shape, ShapeKind};
    use rand::SeedableRng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            points_per_cloud: 64,
            n_patches: 8,
            patch_size: 8,
            width: 16,
            heads: 2,
            bissm_layers: 2,
            d_state: 4,
            embed_point_hidden: 8,
            embed_point_out: 16,
            embed_token_hidden: 16,
            pos_hidden: 8,
            head_hidden: 16,
            num_classes: 3,
            decoder_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn cloud(seed: u64) -> PointCloud {
        generate_shape(ShapeKind::Torus, 64, 0.01, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn init(cfg: &ModelConfig, seed: u64) -> Params {
        Params::init(&cfg.classifier_specs(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn logits_shape_and_determinism() {
        let cfg = tiny();
        let p = init(&cfg, 1);
        let c = cloud(2);
        let a = forward(&c, &p, &cfg, 5).unwrap();
        assert_eq!(a.len(), 3);
        let copy = PointCloud::new(c.points.to_vec(), None).unwrap();
        assert_eq!(forward(&copy, &p, &cfg, 5).unwrap(), a);
    }

    #[test]
    fn too_few_points() {
        let cfg = tiny();
        let p = init(&cfg, 1);
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0]; 7], None).unwrap();
        assert!(forward(&c, &p, &cfg, 0).is_err());
    }

    #[test]
    fn fuse_modes() {
        let p = Params::new();
        let mut g = Graph::inference(&p);
        let zero = g.constant(Tensor::zeros(&[3, 4]));
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
        let r = fuse(&mut g, zero, x, FusionMode::Residual).unwrap();
        assert_eq!(g.value(r), g.value(x));
        let c = fuse(&mut g, zero, x, FusionMode::Concat).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 8]);
        let y = g.constant(Tensor::zeros(&[3, 5]));
        assert!(fuse(&mut g, y, x, FusionMode::Residual).is_err());
    }

    #[test]
    fn zeroed_transformer_branches_give_bare_ssm_model() {
        let cfg = tiny();
        let mut p = init(&cfg, 3);
        let names: Vec<String> = p
            .names()
            .iter()
            .filter(|n| n.contains("attn.out") || n.contains("ffn.fc2"))
            .cloned()
            .collect();
        for n in names {
            p.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let bare_cfg = ModelConfig {
            transformer_layers: 0,
            ..cfg.clone()
        };
        let bare = Params::init(&bare_cfg.classifier_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut shared = Params::new();
        for name in bare.names() {
            shared.insert(name.clone(), p.get(name).unwrap().clone());
        }
        let c = cloud(4);
        let a = forward(&c, &p, &cfg, 9).unwrap();
        let b = forward(&c, &shared, &bare_cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_only_in_training() {
        let cfg = tiny();
        let p = init(&cfg, 5);
        let patches = prepare(&cloud(6), &cfg, 0).unwrap();
        let mut g = Graph::inference(&p);
        let a = logits(&mut g, &patches, &cfg, None).unwrap();
        let b = logits(&mut g, &patches, &cfg, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = logits(&mut g, &patches, &cfg, Some(&mut rng)).unwrap();
        assert_ne!(g.value(a), g.value(c));
    }
}
