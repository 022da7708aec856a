use std::collections::{BTreeMap, HashMap};

use super::{Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether a named tensor is trained by the optimizer or carried as state
/// (BatchNorm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// A named model tensor. The gradient lives in `value.grad()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Name-to-tensor map exchanged between federated clients and the server.
pub type StateDict<T> = BTreeMap<String, Tensor<T>>;

/// Ordered set of uniquely named parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over leaves created elsewhere; must follow store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor and returns its index. Names must be unique.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        kind: ParamKind,
    ) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(Parameter {
            name,
            value: value.with_requires_grad(kind == ParamKind::Trainable),
            kind,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.entries[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    /// Number of trainable scalar coordinates.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Pushes every entry onto the tape as a leaf. Buffers enter as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let mut t =
                    Tensor::from_vec(p.value.shape(), p.value.data().to_vec()).expect("same shape");
                t.set_requires_grad(p.kind == ParamKind::Trainable);
                tape.leaf(t)
            })
            .collect();
        Binding { vars }
    }

    /// Copies the tape gradients of bound parameters into the store,
    /// replacing previous gradients. Unreached parameters get zero gradient.
    pub fn store_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        for (p, &v) in self.entries.iter_mut().zip(&binding.vars) {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let g = tape
                .grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.value.numel()]);
            p.value.set_grad(Some(g)).expect("gradient length matches");
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.value.set_grad(None).expect("clearing is always valid");
        }
    }

    pub fn state_dict(&self) -> StateDict<T> {
        self.entries
            .iter()
            .map(|p| {
                let t =
                    Tensor::from_vec(p.value.shape(), p.value.data().to_vec()).expect("same shape");
                (p.name.clone(), t)
            })
            .collect()
    }

    /// Overwrites every entry from `state`; names and shapes must match exactly.
    pub fn load_state_dict(&mut self, state: &StateDict<T>) -> Result<()> {
        if state.len() != self.entries.len() {
            return Err(Error::Aggregation(format!(
                "state has {} entries, model has {}",
                state.len(),
                self.entries.len()
            )));
        }
        for p in &self.entries {
            let t = state
                .get(&p.name)
                .ok_or_else(|| Error::Aggregation(format!("state is missing {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Aggregation(format!(
                    "{}: shape {} in state, {} in model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
        }
        for p in &mut self.entries {
            p.value.data_mut().copy_from_slice(state[&p.name].data());
        }
        Ok(())
    }

    /// Flat copy of all values (parameters and buffers) in store order.
    pub fn flat_values(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Stable 64-bit fingerprint of all values, for equality checks across replicas.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over names and raw bits
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.entries {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                v.as_f64()
                    .to_bits()
                    .to_le_bytes()
                    .into_iter()
                    .for_each(&mut eat);
            }
        }
        h
    }

    /// Shapes by name, used to derive configuration digests.
    pub fn layout(&self) -> Vec<(String, Shape, ParamKind)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.value.shape(), p.kind))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register(
            "a.weight",
            Tensor::ones(Shape::new(2, 1, 1, 1)),
            ParamKind::Trainable,
        )
        .unwrap();
        s.register(
            "a.running_mean",
            Tensor::zeros(Shape::channels(2)),
            ParamKind::Buffer,
        )
        .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s
            .register(
                "a.weight",
                Tensor::zeros(Shape::scalar()),
                ParamKind::Trainable
            )
            .is_err());
    }

    #[test]
    fn state_dict_round_trip_and_mismatch() {
        let mut s = store();
        let mut st = s.state_dict();
        st.get_mut("a.weight").unwrap().data_mut()[0] = 5.0;
        s.load_state_dict(&st).unwrap();
        assert_eq!(s.by_name("a.weight").unwrap().value.data()[0], 5.0);

        st.insert("a.weight".into(), Tensor::zeros(Shape::scalar()));
        assert!(matches!(s.load_state_dict(&st), Err(Error::Aggregation(_))));
        st.remove("a.weight");
        assert!(s.load_state_dict(&st).is_err());
    }

    #[test]
    fn buffers_are_not_trainable() {
        let s = store();
        assert_eq!(s.trainable_count(), 2);
        assert!(!s.by_name("a.running_mean").unwrap().value.requires_grad());
    }
}
