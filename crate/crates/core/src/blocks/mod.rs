//! Neural building blocks and the named-parameter machinery they share.
//!
//! Every block declares its parameters as [`ParamSpec`]s under a dotted
//! prefix (`encoder.bissm.3.fwd.a_log`), and reads them back through a
//! [`Graph`] during the forward pass. The same declarations drive
//! initialization, parameter counting and checkpoint validation.

mod attention;
mod embed;
mod ssm;

use std::collections::HashMap;

use rand::Rng;

use crate::numeric::{Gradients, Tape, Tensor, Var};
use crate::{Error, Result};

pub use attention::{attention, multi_head_attention, transformer_block, NormPlacement, TransformerDims};
pub(crate) use embed::declare_pos;
pub use embed::{embed_patch, embed_patches, pos_encode, EmbedDims};
pub use ssm::{bi_ssm_block, ssm_scan, Direction, SsmDims, SsmTrace};

pub const NORM_EPS: f64 = 1e-5;

/// How a parameter tensor is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Symmetric uniform in `[-bound, bound]`.
    Uniform(f64),
    /// `ln(1..=N)` along each row: the negated state matrix is `-(1..=N)`.
    StateLog,
    /// Inverse softplus of a step size drawn log-uniformly from the range.
    StepBias {
        min: f64,
        max: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether AdamW weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Accumulates parameter declarations under a prefix.
#[derive(Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init, decay: bool) {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            decay,
        });
    }

    /// Weight matrix `fan_in × fan_out` with fan-in scaled uniform init,
    /// shrunk by `gain`, plus an optional zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, gain: f64) {
        let bound = gain / (fan_in as f64).sqrt();
        self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Uniform(bound), true);
        if bias {
            self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros, false);
        }
    }

    pub fn norm(&mut self, prefix: &str, width: usize) {
        self.add(format!("{prefix}.gain"), &[width], Init::Ones, false);
        self.add(format!("{prefix}.bias"), &[width], Init::Zeros, false);
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut params = Params::new();
        for spec in specs {
            params.insert(spec.name.clone(), init_tensor(spec, rng));
        }
        params
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: String, tensor: Tensor) {
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Subset whose names start with `prefix`, in order.
    pub fn filter_prefix(&self, prefix: &str) -> Params {
        let mut out = Params::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n.to_string(), t.clone());
        }
        out
    }

    /// Checks that names and shapes match `specs` exactly and in order.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.len() != specs.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.iter()) {
            if spec.name != name {
                return Err(Error::config(format!(
                    "parameter {name} where {} was expected",
                    spec.name
                )));
            }
            if spec.shape != t.shape() {
                return Err(Error::config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

fn init_tensor<R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> Tensor {
    let shape = &spec.shape;
    match spec.init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Uniform(bound) => {
            if bound == 0.0 {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
            }
        }
        Init::StateLog => {
            let cols = *shape.last().expect("rank >= 1");
            Tensor::from_fn(shape, |i| ((i % cols) as f64 + 1.0).ln())
        }
        Init::StepBias { min, max } => Tensor::from_fn(shape, |_| {
            let dt = rng.random_range(min.ln()..max.ln()).exp();
            // softplus⁻¹(dt) = dt + ln(1 - e^{-dt})
            dt + (-(-dt).exp_m1()).ln()
        }),
    }
}

/// A tape plus lazily bound model parameters.
pub struct Graph<'a> {
    pub tape: Tape<'a>,
    params: &'a Params,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    /// Parameters are differentiable leaves.
    pub fn new(params: &'a Params) -> Self {
        Self::with_mode(params, true)
    }

    /// Parameters are constants; nothing is differentiated.
    pub fn inference(params: &'a Params) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'a Params, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'a Params {
        self.params
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Binds the named parameter onto the tape (once) and returns its var.
    ///
    /// Panics when the parameter does not exist; parameter sets are
    /// validated against their declarations before a forward pass.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let t = &self.params.tensors()[idx];
        let v = if self.trainable {
            self.tape.leaf_ref(t)
        } else {
            self.tape.constant_ref(t)
        };
        self.bound[idx] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// `x · W (+ b)` using `{prefix}.w` and, when present, `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let y = self.tape.matmul(x, w);
        let bias = format!("{prefix}.b");
        if self.params.contains(&bias) {
            let b = self.param(&bias);
            self.tape.add_row(y, b)
        } else {
            y
        }
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let gain = self.param(&format!("{prefix}.gain"));
        let bias = self.param(&format!("{prefix}.bias"));
        self.tape.layer_norm(x, gain, bias, NORM_EPS)
    }

    /// Per-parameter gradients of `loss`, in parameter order. Parameters
    /// that did not take part get zeros.
    pub fn param_grads(&self, loss: Var) -> Vec<Tensor> {
        let mut grads: Gradients = self.tape.backward(loss);
        self.bound
            .iter()
            .zip(self.params.tensors())
            .map(|(b, t)| {
                b.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Central-difference check of `loss` with respect to every parameter
/// coordinate. Returns the maximum relative error and its parameter name.
pub fn grad_check_params<F>(params: &Params, eps: f64, loss: F) -> Result<(f64, String)>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    use crate::numeric::relative_error;

    let analytic = {
        let mut g = Graph::new(params);
        let out = loss(&mut g)?;
        g.param_grads(out)
    };
    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::inference(p);
        let out = loss(&mut g)?;
        let v = g.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::range("loss non-finite at a perturbed point"))
        }
    };
    let mut work = params.clone();
    let mut worst = (0.0f64, String::new());
    for (k, name) in params.names().iter().enumerate() {
        for i in 0..params.tensors()[k].len() {
            let orig = params.tensors()[k].data()[i];
            work.tensors_mut()[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.tensors_mut()[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.tensors_mut()[k].data_mut()[i] = orig;
            let err = relative_error(analytic[k].data()[i], (plus - minus) / (2.0 * eps));
            if err > worst.0 {
                worst = (err, name.clone());
            }
        }
    }
    Ok(worst)
}
