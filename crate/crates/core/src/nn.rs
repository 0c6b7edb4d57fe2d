//! Named parameters and the dense layers built on them.

use rand::Rng;

use crate::autodiff::{cast, Gradients, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn to_named_f32(&self) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().map(Tensor::cast))
            .collect()
    }

    /// Overwrite every parameter from a named list; names and shapes must
    /// match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", name)))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.cast();
        }
        if named.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                named.len(),
                self.names.len()
            )));
        }
        Ok(())
    }
}

/// A graph being built against a parameter store. Parameters become leaf
/// variables the first time they are used.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Use an existing variable in place of a parameter.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self) -> &[Option<Var>] {
        &self.bound
    }

    /// Gradient for every parameter of the store; parameters that were
    /// never used get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .zip(self.store.tensors())
            .map(|(b, t)| match b {
                Some(v) => grads.wrt(*v),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| cast(rng.random_range(-bound..bound)))
}

/// Affine map acting on axis 0 of a `[in, N]` feature matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(−1/√in, 1/√in)`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(format!("{}.weight", name), uniform(rng, &[out_dim, in_dim], bound));
        let bias = bias.then(|| store.add(format!("{}.bias", name), uniform(rng, &[out_dim], bound)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.graph.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.bias_add(y, b, 0)
            }
            None => Ok(y),
        }
    }

    /// Set the weight to the identity on the first `min(in, out)` channels
    /// and zero the bias.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let w = store.get_mut(self.weight);
        w.data_mut().fill(T::zero());
        for i in 0..self.in_dim.min(self.out_dim) {
            w.data_mut()[i * self.in_dim + i] = T::one();
        }
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; needs at least two entries.
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{}.{}", name, i), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if ctx.graph.shape(x).first() != Some(&self.in_dim()) {
            return Err(Error::shape(format!(
                "MLP expects {} input channels, got {:?}",
                self.in_dim(),
                ctx.graph.shape(x)
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = ctx.graph.gelu(h);
            }
            h = layer.forward(ctx, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        let x = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
        let proj = Tensor::<f64>::from_fn(&[2, 4], |i| (i as f64 * 1.3).sin());
        let inputs = vec![store.tensors()[0].clone(), store.tensors()[1].clone(), x];
        let err = gradient_check(
            |g, v| {
                let mut ctx = Ctx::new(g, &store);
                ctx.bind(lin.weight, v[0]);
                ctx.bind(lin.bias.unwrap(), v[1]);
                let y = lin.forward(&mut ctx, v[2])?;
                let p = ctx.graph.leaf(proj.clone());
                let m = ctx.graph.mul(y, p)?;
                Ok(ctx.graph.sum_all(m))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {}", err);
    }

    #[test]
    fn identity_linear_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 3, true, &mut rng);
        lin.set_identity(&mut store);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store);
        let x = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64);
        let xv = ctx.graph.leaf(x.clone());
        let y = lin.forward(&mut ctx, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut store = ParamStore::<f32>::new();
            Mlp::new(&mut store, "m", &[4, 8, 2], &mut rng);
            store
        };
        assert_eq!(build().tensors(), build().tensors());
    }

    #[test]
    fn load_named_checks_names_and_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2]));
        let good = vec![("a".to_string(), Tensor::ones(&[2]))];
        store.load_named(&good).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.0, 1.0]);
        assert!(store.load_named(&[("a".to_string(), Tensor::ones(&[3]))]).is_err());
        assert!(store.load_named(&[("b".to_string(), Tensor::ones(&[2]))]).is_err());
    }
}
