//! Patch embedding and positional encoding.

use super::{Graph, Registry};
use crate::numeric::{Tensor, Var};
use crate::{Error, Result};

/// Widths of the patch embedder: a shared per-point MLP `3 → point_hidden →
/// point_out`, max-pooled over the patch, then `point_out → token_hidden →
/// width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedDims {
    pub point_hidden: usize,
    pub point_out: usize,
    pub token_hidden: usize,
    pub width: usize,
}

impl EmbedDims {
    pub fn declare(&self, reg: &mut Registry, prefix: &str) {
        reg.linear(&format!("{prefix}.point1"), 3, self.point_hidden, true, 1.0);
        reg.linear(
            &format!("{prefix}.point2"),
            self.point_hidden,
            self.point_out,
            true,
            1.0,
        );
        reg.linear(
            &format!("{prefix}.token1"),
            self.point_out,
            self.token_hidden,
            true,
            1.0,
        );
        reg.linear(&format!("{prefix}.token2"), self.token_hidden, self.width, true, 1.0);
    }
}

/// Embeds `n` patches of `s` localized points, stacked as an `(n·s) × 3`
/// constant, into `n × width` tokens.
pub fn embed_patches(g: &mut Graph<'_>, points: Var, patch_size: usize, prefix: &str) -> Result<Var> {
    let shape = g.value(points).shape().to_vec();
    if shape.len() != 2 || shape[1] != 3 || patch_size == 0 || !shape[0].is_multiple_of(patch_size) {
        return Err(Error::shape(format!(
            "patch points {shape:?} do not split into patches of {patch_size}"
        )));
    }
    let h = g.linear(points, &format!("{prefix}.point1"));
    let h = g.tape.gelu(h);
    let h = g.linear(h, &format!("{prefix}.point2"));
    let pooled = g.tape.group_max(h, patch_size);
    let t = g.linear(pooled, &format!("{prefix}.token1"));
    let t = g.tape.gelu(t);
    Ok(g.linear(t, &format!("{prefix}.token2")))
}

/// Embeds one `s × 3` patch into a `1 × width` token.
pub fn embed_patch(g: &mut Graph<'_>, patch: &Tensor, prefix: &str) -> Result<Var> {
    let s = patch.rows();
    let pts = g.constant(patch.clone());
    embed_patches(g, pts, s, prefix)
}

/// Learned positional encoding: `3 → hidden → width` MLP on center
/// coordinates (`n × 3`), giving `n × width`.
pub fn pos_encode(g: &mut Graph<'_>, centers: Var, prefix: &str) -> Var {
    let h = g.linear(centers, &format!("{prefix}.fc1"));
    let h = g.tape.gelu(h);
    g.linear(h, &format!("{prefix}.fc2"))
}

pub(crate) fn declare_pos(reg: &mut Registry, prefix: &str, hidden: usize, width: usize) {
    reg.linear(&format!("{prefix}.fc1"), 3, hidden, true, 1.0);
    reg.linear(&format!("{prefix}.fc2"), hidden, width, true, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIMS: EmbedDims = EmbedDims {
        point_hidden: 8,
        point_out: 10,
        token_hidden: 12,
        width: 6,
    };

    fn setup(seed: u64) -> (Params, Tensor) {
        let mut reg = Registry::new();
        DIMS.declare(&mut reg, "emb");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(reg.specs(), &mut rng);
        let patch = Tensor::from_fn(&[7, 3], |_| rng.random_range(-0.3..0.3));
        (params, patch)
    }

    fn embed(params: &Params, patch: &Tensor) -> Tensor {
        let mut g = Graph::inference(params);
        let v = embed_patch(&mut g, patch, "emb").unwrap();
        g.value(v).clone()
    }

    #[test]
    fn permutation_invariant() {
        let (params, patch) = setup(1);
        let base = embed(&params, &patch);
        let perm = [4, 0, 6, 2, 1, 5, 3];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| patch.row(i).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rows);
        assert_eq!(embed(&params, &shuffled), base);
    }

    #[test]
    fn duplicates_do_not_change_token() {
        let (params, patch) = setup(2);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| patch.row(i).to_vec()).collect();
        let dedup = Tensor::from_rows(&rows);
        let mut padded = rows.clone();
        padded.push(rows[1].clone());
        padded.push(rows[1].clone());
        padded.push(rows[3].clone());
        let padded = Tensor::from_rows(&padded);
        assert_eq!(embed(&params, &padded), embed(&params, &dedup));
    }

    #[test]
    fn matches_explicit_point_loop() {
        use crate::numeric::kernels::gelu;
        let (params, patch) = setup(3);
        let got = embed(&params, &patch);

        let dense = |x: &[f64], name: &str| -> Vec<f64> {
            let w = params.get(&format!("emb.{name}.w")).unwrap();
            let b = params.get(&format!("emb.{name}.b")).unwrap();
            (0..w.cols())
                .map(|j| b.data()[j] + (0..w.rows()).map(|i| x[i] * w.at(i, j)).sum::<f64>())
                .collect()
        };
        let mut pooled = vec![f64::NEG_INFINITY; DIMS.point_out];
        for r in 0..patch.rows() {
            let h: Vec<f64> = dense(patch.row(r), "point1").into_iter().map(gelu).collect();
            let f = dense(&h, "point2");
            for (p, v) in pooled.iter_mut().zip(f) {
                *p = p.max(v);
            }
        }
        let t: Vec<f64> = dense(&pooled, "token1").into_iter().map(gelu).collect();
        let want = dense(&t, "token2");
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pos_encoding_zero_weights_and_equal_centers() {
        let mut reg = Registry::new();
        declare_pos(&mut reg, "pos", 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = Params::init(reg.specs(), &mut rng);

        let centers = Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.5, -0.1, 0.0], [0.1, 0.2, 0.3]]);
        let mut g = Graph::inference(&params);
        let c = g.constant(centers.clone());
        let e = pos_encode(&mut g, c, "pos");
        assert_eq!(g.value(e).row(0), g.value(e).row(2));

        let mut zeroed = params.clone();
        for t in zeroed.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&zeroed);
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
        let c = g.constant(centers);
        let e = pos_encode(&mut g, c, "pos");
        let xp = g.tape.add(x, e);
        assert_eq!(g.value(xp), g.value(x));
    }

    #[test]
    fn pos_encoding_gradient() {
        let mut reg = Registry::new();
        declare_pos(&mut reg, "pos", 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = Params::init(reg.specs(), &mut rng);
        let centers = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
        let target = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let (err, _) = crate::blocks::grad_check_params(&params, 1e-5, |g| {
            let c = g.constant(centers.clone());
            let t = g.constant(target.clone());
            let e = pos_encode(g, c, "pos");
            let p = g.tape.mul(e, t);
            Ok(g.tape.sum(p))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
