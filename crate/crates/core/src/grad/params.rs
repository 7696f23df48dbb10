use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{GradError, Result};

/// Shape plus flat row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(GradError::DataLength {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    /// The tensor viewed as a matrix: rank 0 and 1 become a single row,
    /// higher ranks fold every leading axis into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adaptive-moment hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with their accumulated gradients and optimizer moments.
///
/// Gradients accumulate across calls to [`super::Gradients::accumulate_into`]
/// until [`ParamStore::optimizer_step`] or [`ParamStore::zero_grad`] clears them.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
    adam: Adam,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(GradError::DuplicateParam(name.to_string()));
        }
        let t = Tensor::new(shape, value)?;
        let n = t.values.len();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: t.shape,
            value: t.values,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Registers a matrix initialised with scaled Gaussian entries
    /// (`std = sqrt(1 / fan_in)`), or zeros when `fan_in == 0`.
    pub fn init_matrix<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = (1.0 / rows.max(1) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, vec![rows, cols], values)
    }

    pub fn init_constant(&mut self, name: &str, shape: Vec<usize>, c: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![c; n])
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .map(ParamId)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self.id(name)?;
        let found = &self.params[id.0].shape;
        if found != shape {
            return Err(GradError::ParamShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: found.clone(),
            });
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let p = &self.params[id.0];
        Tensor {
            shape: p.shape.clone(),
            values: p.value.clone(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_adam(&mut self, adam: Adam) {
        self.adam = adam;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// One adaptive-moment update with bias correction, then zeroes the
    /// gradients. A non-finite gradient aborts before anything is modified.
    pub fn optimizer_step(&mut self, lr: f64) -> Result<()> {
        if let Some(p) = self
            .params
            .iter()
            .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(GradError::Divergence(p.name.clone()));
        }
        self.step += 1;
        let Adam { beta1, beta2, eps } = self.adam;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in &mut self.params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = 0.0;
            }
        }
        Ok(())
    }

    /// Parameter snapshot as `(name, tensor)` pairs in registration order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    Tensor {
                        shape: p.shape.clone(),
                        values: p.value.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn from_snapshot(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in entries {
            store.insert(&name, t.shape, t.values)?;
        }
        Ok(store)
    }

    /// Copies parameter values from `other` (matched by name), leaving the
    /// optimizer state untouched.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other.id(&p.name)?;
            let src = &other.params[src.0];
            if src.shape != p.shape {
                return Err(GradError::ParamShape {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    found: src.shape.clone(),
                });
            }
            p.value.copy_from_slice(&src.value);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        store.optimizer_step(0.1).unwrap();
        assert_eq!(store.value(id), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut store = ParamStore::new();
        let id = store.insert("w", vec![1], vec![0.0]).unwrap();
        let mut prev = 0.0;
        for _ in 0..50 {
            store.grad_mut(id)[0] = 2.5;
            store.optimizer_step(0.01).unwrap();
            let now = store.value(id)[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = sum_i c_i (w_i - t_i)^2
        let target = [1.5, -0.7, 3.0, 0.2];
        let curv = [1.0, 4.0, 0.5, 2.0];
        let mut store = ParamStore::new();
        let id = store.insert("w", vec![4], vec![0.0; 4]).unwrap();
        let loss = |w: &[f64]| -> f64 {
            (0..4).map(|i| curv[i] * (w[i] - target[i]).powi(2)).sum()
        };
        let initial = loss(store.value(id));
        for _ in 0..200 {
            let w = store.value(id).to_vec();
            for i in 0..4 {
                store.grad_mut(id)[i] = 2.0 * curv[i] * (w[i] - target[i]);
            }
            store.optimizer_step(0.05).unwrap();
        }
        let fin = loss(store.value(id));
        assert!(fin < 1e-3 * initial, "final {fin} initial {initial}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("ok", vec![1], vec![0.0]).unwrap();
        let bad = store.insert("bad", vec![2], vec![0.0, 0.0]).unwrap();
        store.grad_mut(bad)[1] = f64::NAN;
        match store.optimizer_step(0.1) {
            Err(GradError::Divergence(name)) => assert_eq!(name, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.value(bad), &[0.0, 0.0]);
    }

    #[test]
    fn fixed_seed_gives_bit_identical_parameters() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let id = store.init_matrix("w", 4, 3, &mut rng).unwrap();
            for step in 0..25 {
                let w = store.value(id).to_vec();
                for (i, g) in store.grad_mut(id).iter_mut().enumerate() {
                    *g = w[i].sin() + step as f64 * 1e-3;
                }
                store.optimizer_step(0.01).unwrap();
            }
            store.value(id).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn duplicate_and_shape_checks() {
        let mut store = ParamStore::new();
        store.insert("a", vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            store.insert("a", vec![1], vec![0.0]),
            Err(GradError::DuplicateParam(_))
        ));
        assert!(matches!(
            store.expect("a", &[4]),
            Err(GradError::ParamShape { .. })
        ));
        assert!(matches!(
            store.insert("b", vec![3], vec![0.0]),
            Err(GradError::DataLength { .. })
        ));
    }
}
