use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lwat::Bundle;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Model parameters keyed by dotted path, e.g. `encoder.stack0.depthwise`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_parameter", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        for p in self.params.values_mut() {
            f(&p.name, &mut p.value);
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Replaces every value from `bundle`, which must hold exactly the same
    /// names and shapes as `self`.
    pub fn load_bundle(&mut self, bundle: &Bundle) -> Result<()> {
        let missing: Vec<_> = self.names().filter(|n| !bundle.contains_key(*n)).map(String::from).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("weights missing parameters: {}", missing.join(", "))));
        }
        let extra: Vec<_> = bundle.keys().filter(|n| !self.contains(n)).cloned().collect();
        if !extra.is_empty() {
            return Err(Error::Config(format!("weights contain unknown parameters: {}", extra.join(", "))));
        }
        for (name, t) in bundle {
            let slot = self.get_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "weights: parameter {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape())))
                .collect(),
        )
    }
}

/// Gradient accumulator with the same keys as a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(BTreeMap<String, Tensor>);

impl Grads {
    pub fn accumulate(&mut self, name: &str, g: &Tensor) -> Result<()> {
        match self.0.get_mut(name) {
            Some(slot) => slot.add_assign(g),
            None => {
                self.0.insert(name.to_string(), g.clone());
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            *g = g.scale(s);
        }
    }

    pub fn is_finite(&self) -> Option<&str> {
        self.0
            .iter()
            .find(|(_, g)| !g.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// `Σ ⟨grad, direction⟩` over shared keys.
    pub fn dot_params(&self, direction: &ParamStore) -> f64 {
        self.0
            .iter()
            .filter_map(|(k, g)| direction.get(k).ok().map(|d| g.dot(d).unwrap_or(0.0)))
            .sum()
    }
}

/// Structured weights that can enumerate their tensors under dotted names.
///
/// Gradients use the same structs as the weights they belong to, so updates
/// and checks walk both trees in the same order.
pub trait ParamTree {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn to_store(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        self.for_each(prefix, &mut |name, t| {
            store.insert(name, t.clone(), true).expect("parameter names are unique");
        });
        store
    }

    /// Overwrites every tensor from `store`, which must match names and shapes.
    fn load_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        let mut expected = ParamStore::new();
        self.for_each(prefix, &mut |name, t| {
            expected.insert(name, t.clone(), true).expect("parameter names are unique");
        });
        expected.load_bundle(&store.to_bundle())?;
        self.for_each_mut(prefix, &mut |name, t| {
            *t = expected.get(&name).expect("checked above").clone();
        });
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`ParamTree`] from a list of tensor fields, optional tensor
/// fields and nested trees.
#[macro_export]
macro_rules! param_tree {
    ($ty:ty { $($field:ident),* $(,)? } $(opt { $($ofield:ident),* $(,)? })? $(nested { $($nfield:ident),* $(,)? })?) => {
        impl $crate::param::ParamTree for $ty {
            fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::tensor::Tensor)) {
                $( f($crate::param::join(prefix, stringify!($field)), &self.$field); )*
                $($( if let Some(t) = &self.$ofield { f($crate::param::join(prefix, stringify!($ofield)), t); } )*)?
                $($( $crate::param::ParamTree::for_each(&self.$nfield, &$crate::param::join(prefix, stringify!($nfield)), f); )*)?
            }
            fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor)) {
                $( f($crate::param::join(prefix, stringify!($field)), &mut self.$field); )*
                $($( if let Some(t) = &mut self.$ofield { f($crate::param::join(prefix, stringify!($ofield)), t); } )*)?
                $($( $crate::param::ParamTree::for_each_mut(&mut self.$nfield, &$crate::param::join(prefix, stringify!($nfield)), f); )*)?
            }
        }
    };
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.for_each(&join(prefix, &i.to_string()), f);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.for_each_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl ParamTree for Tensor {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(prefix.to_string(), self);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

param_tree!(crate::attention::HandProjections { w_q, w_k, w_v });
param_tree!(crate::attention::CrossHandWeights {} nested { left, right });
param_tree!(crate::attention::PointwiseMlp { w1, b1, w2, b2 });
param_tree!(crate::attention::SeparableWeights { w_i, w_k, w_v, w_o });
param_tree!(crate::mesh::FullMeshHead { feat, upsample, bias });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_names_and_reload() {
        let mut rng = crate::rng::SeededRng::new(3);
        let mlp = crate::attention::PointwiseMlp::random(2, crate::ops::Activation::Silu, &mut rng);
        let store = mlp.to_store("merge");
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, ["merge.b1", "merge.b2", "merge.w1", "merge.w2"]);
        let mut other = crate::attention::PointwiseMlp::random(2, crate::ops::Activation::Silu, &mut rng);
        assert_ne!(other, mlp);
        other.load_store("merge", &store).unwrap();
        assert_eq!(other, mlp);
        assert!(other.load_store("x", &store).is_err());
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("a.w", Tensor::zeros(&[3]), true).is_err());
    }

    #[test]
    fn bundle_load_checks_names_and_shapes() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), true).unwrap();
        let mut b = Bundle::new();
        b.insert("a".into(), Tensor::full(&[2], 1.0));
        s.load_bundle(&b).unwrap();
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 1.0]);

        b.insert("b".into(), Tensor::zeros(&[1]));
        assert!(s.load_bundle(&b).unwrap_err().to_string().contains("unknown"));
        b.remove("b");
        b.insert("a".into(), Tensor::zeros(&[3]));
        assert!(s.load_bundle(&b).unwrap_err().to_string().contains("shape"));
    }
}
