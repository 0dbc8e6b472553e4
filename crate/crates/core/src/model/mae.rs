//! Masked-autoencoder pretraining: hide a random subset of patches, encode
//! the rest, and regress the hidden patches' points.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{embed_tokens, encode, ModelConfig};
use crate::blocks::{bi_ssm_block, pos_encode, Graph};
use crate::numeric::Var;
use crate::pointops::PatchSet;
use crate::{Error, Result};

/// Visible and masked patch positions, both ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Masks `floor(ratio · n)` of `n` patches uniformly at random.
pub fn mae_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n_mask = (ratio * n as f64).floor() as usize;
    if n_mask == 0 || n_mask == n {
        return Err(Error::config(format!(
            "mask ratio {ratio} over {n} patches leaves an empty visible or masked set"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut masked = idx[..n_mask].to_vec();
    let mut visible = idx[n_mask..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskSplit { visible, masked })
}

/// Mean Chamfer distance between each masked patch and its reconstruction.
///
/// The encoder sees only visible tokens. The decoder re-inserts a shared
/// mask token at each masked position, adds its own positional encoding of
/// every center, runs its bi-SSM stack and predicts `s × 3` points per
/// masked patch.
pub fn mae_loss(g: &mut Graph<'_>, patches: &PatchSet, split: &MaskSplit, cfg: &ModelConfig) -> Result<Var> {
    let n = patches.len();
    if split.visible.len() + split.masked.len() != n {
        return Err(Error::shape(format!("mask split does not cover {n} patches")));
    }
    let all = embed_tokens(g, patches, "encoder")?;
    let visible = g.tape.gather_rows(all, &split.visible);
    let encoded = encode(g, visible, cfg)?;

    let mask_token = g.param("decoder.mask_token");
    let fill = g.tape.gather_rows(mask_token, &vec![0; split.masked.len()]);
    let joined = g.tape.concat_rows(&[encoded, fill]);
    let mut slot = vec![0; n];
    for (k, &i) in split.visible.iter().chain(&split.masked).enumerate() {
        slot[i] = k;
    }
    let seq = g.tape.gather_rows(joined, &slot);
    let centers = g.constant(patches.centers_tensor());
    let pos = pos_encode(g, centers, "decoder.pos");
    let mut x = g.tape.add(seq, pos);
    let dims = cfg.ssm_dims();
    for j in 0..cfg.decoder_layers {
        x = bi_ssm_block(g, x, &format!("decoder.bissm.{j}"), &dims)?.output;
    }
    let x = g.norm(x, "decoder.norm");
    let hidden = g.tape.gather_rows(x, &split.masked);
    let pred = g.linear(hidden, "decoder.predict");

    let s = patches.patch_size();
    let mut total = None;
    for (k, &i) in split.masked.iter().enumerate() {
        let row = g.tape.gather_rows(pred, &[k]);
        let points = g.tape.reshape(row, &[s, 3]);
        let target = g.constant(patches.patch_tensor(i));
        let d = g.tape.chamfer(points, target);
        total = Some(match total {
            None => d,
            Some(t) => g.tape.add(t, d),
        });
    }
    let total = total.expect("at least one masked patch");
    Ok(g.tape.scale(total, 1.0 / split.masked.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_counts_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mae_mask(64, 0.6, &mut rng).unwrap();
        assert_eq!((m.masked.len(), m.visible.len()), (38, 26));
        let mut all: Vec<usize> = m.visible.iter().chain(&m.masked).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert!(m.visible.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mask_is_seeded() {
        let a = mae_mask(20, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mae_mask(20, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_masks_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for ratio in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(mae_mask(10, ratio, &mut rng).is_err());
        }
        assert!(mae_mask(4, 0.1, &mut rng).is_err());
        assert!(mae_mask(1, 0.5, &mut rng).is_err());
        assert_eq!(mae_mask(4, 0.99, &mut rng).unwrap().visible.len(), 1);
    }
}
