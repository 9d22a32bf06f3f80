use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order. The order defines the
/// serialized payload layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub(crate) fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.register(name, Tensor::from_vec(shape, data))
    }

    pub(crate) fn zeros(&mut self, name: impl Into<String>, shape: [usize; 4]) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite all values from a flat payload produced by [`ParamStore::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), String> {
        if flat.len() != self.count() {
            return Err(format!(
                "parameter payload has {} values, architecture expects {}",
                flat.len(),
                self.count()
            ));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(Tensor::zeros_like).collect()
    }
}
