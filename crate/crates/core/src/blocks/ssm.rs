//! Selective state space scan and the bidirectional SSM block.
//!
//! Each direction owns its short convolution, its input-dependent `Δ`, `B`,
//! `C` projections, its diagonal state matrix (stored as `ln(-A)`) and its
//! skip `D`. Input and output projections are shared. The backward direction
//! runs the forward algorithm on the time-reversed sequence and reverses the
//! result.

use super::{Graph, Init, Registry};
use crate::numeric::Var;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn key(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    pub width: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
    /// Init scale of the output projection, in thousandths.
    pub out_gain_milli: u32,
}

impl SsmDims {
    pub fn declare(&self, reg: &mut Registry, prefix: &str) {
        let (w, di, n, r) = (self.width, self.d_inner, self.d_state, self.dt_rank);
        reg.norm(&format!("{prefix}.norm"), w);
        reg.linear(&format!("{prefix}.in_proj"), w, 2 * di, false, 1.0);
        for dir in [Direction::Forward, Direction::Backward] {
            let p = format!("{prefix}.{}", dir.key());
            let conv_bound = 1.0 / (self.d_conv as f64).sqrt();
            reg.add(
                format!("{p}.conv.w"),
                &[di, self.d_conv],
                Init::Uniform(conv_bound),
                true,
            );
            reg.add(format!("{p}.conv.b"), &[di], Init::Zeros, false);
            reg.linear(&format!("{p}.x_proj"), di, r + 2 * n, false, 1.0);
            reg.add(
                format!("{p}.dt_proj.w"),
                &[r, di],
                Init::Uniform(1.0 / (r as f64).sqrt()),
                true,
            );
            reg.add(
                format!("{p}.dt_proj.b"),
                &[di],
                Init::StepBias { min: 1e-3, max: 1e-1 },
                false,
            );
            reg.add(format!("{p}.a_log"), &[di, n], Init::StateLog, false);
            reg.add(format!("{p}.d"), &[di], Init::Ones, false);
        }
        let gain = self.out_gain_milli as f64 / 1000.0;
        reg.linear(&format!("{prefix}.out_proj"), di, w, false, gain);
    }
}

/// Input-dependent scan in forward time over `u` (`L × d_inner`) with the
/// parameters under `prefix` (one direction's set).
fn selective_ssm(g: &mut Graph<'_>, u: Var, prefix: &str, dims: &SsmDims) -> Var {
    let (r, n) = (dims.dt_rank, dims.d_state);
    let proj = g.linear(u, &format!("{prefix}.x_proj"));
    let dt_low = g.tape.slice_cols(proj, 0, r);
    let b = g.tape.slice_cols(proj, r, n);
    let c = g.tape.slice_cols(proj, r + n, n);
    let dt = g.linear(dt_low, &format!("{prefix}.dt_proj"));
    let delta = g.tape.softplus(dt);
    let a_log = g.param(&format!("{prefix}.a_log"));
    let a = g.tape.exp(a_log);
    let a = g.tape.scale(a, -1.0);
    let d = g.param(&format!("{prefix}.d"));
    g.tape.selective_scan([u, delta, a, b, c, d])
}

/// Selective scan in the given direction. Backward is exactly
/// `reverse(forward(reverse(u)))` over the direction's own parameters.
pub fn ssm_scan(g: &mut Graph<'_>, u: Var, prefix: &str, dims: &SsmDims, dir: Direction) -> Result<Var> {
    let shape = g.value(u).shape();
    if shape.len() != 2 || shape[1] != dims.d_inner {
        return Err(Error::shape(format!(
            "scan over {} channels given {shape:?}",
            dims.d_inner
        )));
    }
    Ok(match dir {
        Direction::Forward => selective_ssm(g, u, prefix, dims),
        Direction::Backward => {
            let rev = g.tape.reverse_rows(u);
            let y = selective_ssm(g, rev, prefix, dims);
            g.tape.reverse_rows(y)
        }
    })
}

/// One direction: short convolution (causal in that direction's time), SiLU,
/// then the selective scan.
fn direction_branch(g: &mut Graph<'_>, x: Var, prefix: &str, dims: &SsmDims, dir: Direction) -> Result<Var> {
    let p = format!("{prefix}.{}", dir.key());
    let w = g.param(&format!("{p}.conv.w"));
    let b = g.param(&format!("{p}.conv.b"));
    let conv = match dir {
        Direction::Forward => g.tape.depthwise_conv(x, w, b),
        Direction::Backward => {
            let rev = g.tape.reverse_rows(x);
            let y = g.tape.depthwise_conv(rev, w, b);
            g.tape.reverse_rows(y)
        }
    };
    let act = g.tape.silu(conv);
    ssm_scan(g, act, &p, dims, dir)
}

/// Intermediate values of a bidirectional block.
pub struct SsmTrace {
    pub forward: Var,
    pub backward: Var,
    /// `forward + backward`, before the gate.
    pub sum: Var,
    pub output: Var,
}

/// Bidirectional block over `n × width` tokens:
/// `T + W_out[(SSM_fwd(x) + SSM_bwd(x)) ⊙ SiLU(z)]` where `[x ‖ z]` is the
/// shared input projection of `norm(T)`.
pub fn bi_ssm_block(g: &mut Graph<'_>, tokens: Var, prefix: &str, dims: &SsmDims) -> Result<SsmTrace> {
    let shape = g.value(tokens).shape();
    if shape.len() != 2 || shape[1] != dims.width {
        return Err(Error::shape(format!(
            "bi-SSM block of width {} given tokens {shape:?}",
            dims.width
        )));
    }
    let di = dims.d_inner;
    let h = g.norm(tokens, &format!("{prefix}.norm"));
    let xz = g.linear(h, &format!("{prefix}.in_proj"));
    let x = g.tape.slice_cols(xz, 0, di);
    let z = g.tape.slice_cols(xz, di, di);
    let forward = direction_branch(g, x, prefix, dims, Direction::Forward)?;
    let backward = direction_branch(g, x, prefix, dims, Direction::Backward)?;
    let sum = g.tape.add(forward, backward);
    let gate = g.tape.silu(z);
    let gated = g.tape.mul(sum, gate);
    let out = g.linear(gated, &format!("{prefix}.out_proj"));
    let output = g.tape.add(tokens, out);
    Ok(SsmTrace {
        forward,
        backward,
        sum,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{grad_check_params, Params};
    use crate::numeric::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIMS: SsmDims = SsmDims {
        width: 4,
        d_inner: 6,
        d_state: 3,
        d_conv: 3,
        dt_rank: 2,
        out_gain_milli: 1000,
    };

    fn params(seed: u64) -> Params {
        let mut reg = Registry::new();
        DIMS.declare(&mut reg, "blk");
        let mut p = Params::init(reg.specs(), &mut ChaCha8Rng::seed_from_u64(seed));
        // Larger steps than the default init so the state actually mixes.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for dir in ["fwd", "bwd"] {
            let b = p.get_mut(&format!("blk.{dir}.dt_proj.b")).unwrap();
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..0.5));
        }
        p
    }

    fn tokens(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, DIMS.width], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn backward_scan_is_reversed_forward() {
        let p = params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::from_fn(&[7, DIMS.d_inner], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::inference(&p);
        let uv = g.constant(u);
        let back = ssm_scan(&mut g, uv, "blk.bwd", &DIMS, Direction::Backward).unwrap();
        let rev = g.tape.reverse_rows(uv);
        let fwd = ssm_scan(&mut g, rev, "blk.bwd", &DIMS, Direction::Forward).unwrap();
        let fwd = g.tape.reverse_rows(fwd);
        assert_eq!(g.value(back), g.value(fwd));
    }

    #[test]
    fn tied_parameters_give_symmetric_sum() {
        let mut p = params(3);
        let names: Vec<String> = p.names().iter().filter(|n| n.contains(".fwd.")).cloned().collect();
        for name in names {
            let t = p.get(&name).unwrap().clone();
            p.insert(name.replace(".fwd.", ".bwd."), t);
        }
        let base = tokens(4, 4);
        let rows: Vec<Vec<f64>> = (0..4).chain((0..4).rev()).map(|i| base.row(i).to_vec()).collect();
        let sym = Tensor::from_rows(&rows);
        let mut g = Graph::inference(&p);
        let x = g.constant(sym);
        let tr = bi_ssm_block(&mut g, x, "blk", &DIMS).unwrap();
        let s = g.value(tr.sum);
        let n = s.rows();
        for t in 0..n {
            for c in 0..s.cols() {
                assert!((s.at(t, c) - s.at(n - 1 - t, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zeroed_projections_give_identity() {
        let x = tokens(5, 5);
        for name in ["blk.in_proj.w", "blk.out_proj.w"] {
            let mut p = params(6);
            p.get_mut(name).unwrap().data_mut().fill(0.0);
            let mut g = Graph::inference(&p);
            let xv = g.constant(x.clone());
            let tr = bi_ssm_block(&mut g, xv, "blk", &DIMS).unwrap();
            assert_eq!(g.value(tr.output), &x, "{name}");
        }
    }

    #[test]
    fn wrong_width_rejected() {
        let p = params(7);
        let mut g = Graph::inference(&p);
        let x = g.constant(Tensor::zeros(&[3, 5]));
        assert!(bi_ssm_block(&mut g, x, "blk", &DIMS).is_err());
        let u = g.constant(Tensor::zeros(&[3, 5]));
        assert!(ssm_scan(&mut g, u, "blk.fwd", &DIMS, Direction::Forward).is_err());
    }

    #[test]
    fn block_gradient_matches_differences() {
        let p = params(8);
        let x = tokens(9, 5);
        let target = tokens(10, 5);
        let (err, name) = grad_check_params(&p, 1e-5, |g| {
            let xv = g.constant(x.clone());
            let t = g.constant(target.clone());
            let tr = bi_ssm_block(g, xv, "blk", &DIMS)?;
            let prod = g.tape.mul(tr.output, t);
            Ok(g.tape.sum(prod))
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }

    #[test]
    fn discretized_decay_in_unit_interval() {
        let p = params(11);
        for dir in ["fwd", "bwd"] {
            let a = p.get(&format!("blk.{dir}.a_log")).unwrap().map(|v| -v.exp());
            for &delta in &[1e-4, 0.01, 1.0, 50.0] {
                for &av in a.data() {
                    let dec = (delta * av).exp();
                    assert!(dec > 0.0 && dec < 1.0);
                }
            }
        }
    }
}
