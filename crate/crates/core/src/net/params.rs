use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    FrozenBackbone,
    TrainableControl,
}

impl Partition {
    /// The partition a parameter belongs to, decided by its name prefix.
    pub fn for_name(name: &str) -> Partition {
        const CONTROL: [&str; 3] = ["projector.", "controlnet.", "connector."];
        if CONTROL.iter().any(|p| name.starts_with(p)) {
            Partition::TrainableControl
        } else {
            Partition::FrozenBackbone
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::FrozenBackbone => "frozen_backbone",
            Partition::TrainableControl => "trainable_control",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub partition: Partition,
}

/// Named parameter tensors, each tagged with exactly one [`Partition`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter, tagging it by name. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("param store", format!("duplicate parameter `{name}`")));
        }
        let partition = Partition::for_name(&name);
        self.params.insert(name, Param { tensor, partition });
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its shape and tag.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid("param store", format!("unknown parameter `{name}`")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::invalid(
                "param store",
                format!("`{name}` has shape {:?}, got {:?}", p.tensor.shape(), tensor.shape()),
            ));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self, partition: Partition) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.partition == partition).map(|(n, _)| n).collect()
    }

    pub fn remove_partition(&mut self, partition: Partition) {
        self.params.retain(|_, p| p.partition != partition);
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.tensor)?;
        }
        Ok(())
    }

    pub fn num_scalars(&self, partition: Partition) -> usize {
        self.iter().filter(|(_, p)| p.partition == partition).map(|(_, p)| p.tensor.numel()).sum()
    }

    /// SHA-256 over every (name, tensor) in the partition, in name order.
    pub fn partition_checksum(&self, partition: Partition) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter().filter(|(_, p)| p.partition == partition) {
            h.update(name.as_bytes());
            p.tensor.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter() {
            h.update(name.as_bytes());
            p.tensor.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Registers every parameter as a leaf of `graph`; `trainable` decides
    /// which ones record gradients.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: impl Fn(&str, Partition) -> bool) -> Result<Bound<'g>> {
        let mut vars = BTreeMap::new();
        for (name, p) in self.iter() {
            let v = graph.leaf(p.tensor.clone(), trainable(name, p.partition))?;
            vars.insert(name.to_string(), v);
        }
        Ok(Bound { vars })
    }
}

/// Parameters registered on one graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid("parameters", format!("missing parameter `{name}`")))
    }

    /// Substitutes the node used for `name`, e.g. to differentiate with
    /// respect to a single parameter.
    pub fn replace(&mut self, name: &str, var: Var<'g>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::invalid("parameters", format!("missing parameter `{name}`")))?;
        if slot.shape() != var.shape() {
            return Err(Error::invalid(
                "parameters",
                format!("`{name}` has shape {:?}, got {:?}", slot.shape(), var.shape()),
            ));
        }
        *slot = var;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Deterministic parameter initializer keyed by parameter name.
pub(crate) struct Init {
    seed: SeedStream,
}

impl Init {
    pub fn new(seed: SeedStream) -> Self {
        Self { seed }
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = self.seed.derive(name).normals(n).into_iter().map(|v| v * std).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// `N(0, 1 / fan_in)` for a `[fan_in, fan_out]` weight.
    pub fn linear(&self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = self.normal(&format!("{prefix}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt());
        store.insert(format!("{prefix}.w"), w)?;
        store.insert(format!("{prefix}.b"), Tensor::zeros([fan_out]))
    }

    pub fn zero_linear(&self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        store.insert(format!("{prefix}.w"), Tensor::zeros([fan_in, fan_out]))?;
        store.insert(format!("{prefix}.b"), Tensor::zeros([fan_out]))
    }

    pub fn layer_norm(&self, store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
        store.insert(format!("{prefix}.g"), Tensor::ones([dim]))?;
        store.insert(format!("{prefix}.b"), Tensor::zeros([dim]))
    }
}
