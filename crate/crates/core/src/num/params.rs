use super::Tensor;
use alloc::collections::btree_map;
use alloc::collections::BTreeMap;
use alloc::string::String;

/// Named parameter tensors, iterated in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(path.into(), t)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Same paths and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let tensors = self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        Self { tensors }
    }

    /// Sub-store of the paths accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let tensors = self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { tensors }
    }

    /// Euclidean norm over every scalar, summed in path order.
    pub fn global_norm(&self) -> f64 {
        super::math::sqrt(self.tensors.values().map(|t| t.sum_squares()).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.values().flat_map(|t| t.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl<'a> IntoIterator for &'a ParamStore {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;
    fn into_iter(self) -> Self::IntoIter {
        self.tensors.iter()
    }
}
