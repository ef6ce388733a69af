//! Named parameter store and per-pass bindings onto a tape.
//!
//! Parameters (trainable weights and non-trainable running statistics) live in
//! a name-ordered map so that every iteration — optimizer steps, checkpoint
//! serialization, gradient collection — happens in one deterministic order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

#[derive(Clone, Debug)]
pub struct ParamEntry<S: Scalar> {
    pub tensor: Tensor4<S>,
    pub trainable: bool,
}

/// Name-ordered collection of model state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    /// Register a tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor4<S>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Usage(format!("parameter '{name}' registered twice")));
        }
        let tensor = tensor.requires_grad(trainable);
        self.entries.insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    /// Tensor value by name.
    pub fn tensor(&self, name: &str) -> Result<&Tensor4<S>> {
        Ok(&self.get(name)?.tensor)
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over trainable entries.
    pub fn trainable_len(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }
}

/// Leaf variables bound from a store for one forward/backward pass.
///
/// Binding clones the parameter value onto the tape; after `backward`,
/// [`Bindings::collect_grads`] copies gradients back into the store. Binding
/// the same name twice within a pass returns the original variable, so shared
/// parameters accumulate correctly.
#[derive(Default)]
pub struct Bindings {
    pairs: Vec<(String, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings { pairs: Vec::new() }
    }

    pub fn bind<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        name: &str,
    ) -> Result<Var> {
        if let Some((_, v)) = self.pairs.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let entry = store.get(name)?;
        let var = tape.leaf(entry.tensor.clone());
        self.pairs.push((name.to_string(), var));
        Ok(var)
    }

    /// Copy gradients from the tape into `tensor.grad` of each bound entry.
    /// Trainable parameters the loss never reached get zero gradients.
    pub fn collect_grads<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &mut ParamStore<S>,
    ) -> Result<()> {
        for (name, var) in &self.pairs {
            let entry = store.get_mut(name)?;
            if !entry.trainable {
                continue;
            }
            entry.tensor.grad = Some(match tape.grad(*var) {
                Some(g) => g.data().to_vec(),
                None => vec![S::zero(); entry.tensor.numel()],
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ReduceSet;
    use crate::tape::Reduction;
    use crate::tensor::Shape4;

    #[test]
    fn names_iterate_sorted() {
        let mut store = ParamStore::<f64>::new();
        store.insert("b.w", Tensor4::zeros(Shape4::new(1, 1, 1, 1)), true).unwrap();
        store.insert("a.w", Tensor4::zeros(Shape4::new(1, 1, 1, 1)), true).unwrap();
        store.insert("a.b", Tensor4::zeros(Shape4::new(1, 1, 1, 1)), false).unwrap();
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, vec!["a.b", "a.w", "b.w"]);
        assert!(store.insert("a.w", Tensor4::zeros(Shape4::new(1, 1, 1, 1)), true).is_err());
    }

    #[test]
    fn double_bind_shares_one_leaf() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor4::from_vec(Shape4::matrix(1, 2), vec![2.0, 3.0]).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let w1 = b.bind(&mut tape, &store, "w").unwrap();
        let w2 = b.bind(&mut tape, &store, "w").unwrap();
        assert_eq!(w1, w2);
        // loss = sum(w * w) => grad = 2w
        let p = tape.mul(w1, w2).unwrap();
        let l = tape.reduce(p, ReduceSet::All, Reduction::Sum).unwrap();
        tape.backward(l).unwrap();
        b.collect_grads(&tape, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().tensor.grad.as_deref().unwrap(), &[4.0, 6.0]);
    }
}
