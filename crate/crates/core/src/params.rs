//! Named parameter tensors with trainable-or-frozen tags.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Tensor, Var};

/// What a tensor does in the network. Freezing policies are defined
/// over roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
    AdapterWeight,
    AdapterBias,
    LabelEmbedding,
    Prompt,
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    pub fn is_bias(self) -> bool {
        matches!(
            self,
            ParamRole::Bias | ParamRole::NormBias | ParamRole::AdapterBias | ParamRole::HeadBias
        )
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamRole::NormGain | ParamRole::NormBias)
    }

    /// Tensors added on top of the pretrained encoder for a task.
    pub fn is_task_specific(self) -> bool {
        matches!(
            self,
            ParamRole::AdapterWeight
                | ParamRole::AdapterBias
                | ParamRole::LabelEmbedding
                | ParamRole::Prompt
                | ParamRole::HeadWeight
                | ParamRole::HeadBias
        )
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, ParamRole::AdapterWeight | ParamRole::AdapterBias)
    }
}

/// Optimizer group, used to pick a learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    LabelEmbedding,
    Prompt,
}

impl ParamRole {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamRole::LabelEmbedding => ParamGroup::LabelEmbedding,
            ParamRole::Prompt => ParamGroup::Prompt,
            _ => ParamGroup::Backbone,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Name, shape and role of a tensor, without storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, role: ParamRole, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            role,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub role: ParamRole,
    pub trainable: bool,
}

/// Registry of named tensors. Iteration order is by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates every spec in order, drawing initial values from `rng`.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut Rng) -> Result<Self> {
        let mut store = Self::new();
        for s in specs {
            let tensor = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, 1.0),
                Init::Normal(std) => Tensor::randn(&s.shape, std, rng),
            };
            store.insert(&s.name, tensor, s.role)?;
        }
        Ok(store)
    }

    /// Allocates every spec from its own stream `Rng::derive(seed, name)`,
    /// so a tensor's initial value does not depend on which other tensors
    /// exist.
    pub fn from_specs_seeded(
        specs: &[ParamSpec],
        seed: impl Fn(&ParamSpec) -> u64,
    ) -> Result<Self> {
        let mut store = Self::new();
        for s in specs {
            let mut rng = Rng::derive(seed(s), &s.name);
            let tensor = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, 1.0),
                Init::Normal(std) => Tensor::randn(&s.shape, std, &mut rng),
            };
            store.insert(&s.name, tensor, s.role)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, role: ParamRole) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                tensor,
                role,
                trainable: false,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Marks exactly `names` trainable and everything else frozen.
    pub fn set_trainable(&mut self, names: &BTreeSet<String>) -> Result<()> {
        if let Some(missing) = names.iter().find(|n| !self.params.contains_key(*n)) {
            return Err(Error::Contract(format!("unknown parameter {missing}")));
        }
        for (name, p) in &mut self.params {
            p.trainable = names.contains(name);
        }
        Ok(())
    }

    /// Places every tensor on `g` as a leaf; only trainable tensors
    /// require gradients.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, true)
    }

    /// Places every tensor on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, track: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = g.leaf(p.tensor.clone(), track && p.trainable);
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for the tensors of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at another node, e.g. a perturbed copy.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(Error::Contract(format!("unbound parameter {name}"))),
        }
    }
}
