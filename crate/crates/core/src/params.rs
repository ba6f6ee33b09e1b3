//! Named parameter tensors with gradient slots and aliasing for tied weights.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::ArchSpec;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Attention,
    Ffb,
    Heads,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated Normal(0, 0.02).
    Normal,
    Ones,
    Zeros,
}

/// A tensor the architecture declares, before aliasing.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
    pub group: ParamGroup,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init, group: ParamGroup) -> Self {
        ParamDecl {
            name: name.into(),
            rows,
            cols,
            init,
            group,
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub value: Mat,
    pub grad: Mat,
}

impl Tensor {
    pub fn new(value: Mat) -> Self {
        let grad = Mat::zeros(value.rows(), value.cols());
        Tensor { value, grad }
    }
}

/// Gradients keyed by canonical parameter name.
pub type Gradients = BTreeMap<String, Mat>;

/// Learnable tensors keyed by name. Iteration is sorted by name. An alias is a
/// second name for a canonical tensor; reads, writes and gradient
/// accumulation through either name touch the same storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    aliases: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        if self.aliases.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("`{name}` is already an alias")));
        }
        self.tensors.insert(name, Tensor::new(value));
        Ok(())
    }

    /// Makes `alias` refer to `canonical` (which may itself be an alias).
    pub fn alias(&mut self, alias: impl Into<String>, canonical: &str) -> Result<()> {
        let alias = alias.into();
        let target = self.resolve(canonical)?.to_string();
        if self.tensors.contains_key(&alias) {
            return Err(Error::InvalidConfig(format!("`{alias}` is already a tensor")));
        }
        if alias == target {
            return Err(Error::InvalidConfig(format!("`{alias}` cannot alias itself")));
        }
        self.aliases.insert(alias, target);
        Ok(())
    }

    /// Canonical name behind `name`.
    pub fn resolve<'a>(&'a self, name: &'a str) -> Result<&'a str> {
        if self.tensors.contains_key(name) {
            return Ok(name);
        }
        match self.aliases.get(name) {
            Some(c) => Ok(c.as_str()),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.resolve(name).is_ok()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        let c = self.resolve(name)?;
        Ok(&self.tensors[c])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let c = self.resolve(name)?.to_string();
        Ok(self.tensors.get_mut(&c).expect("resolved name exists"))
    }

    pub fn value(&self, name: &str) -> Result<&Mat> {
        Ok(&self.tensor(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Mat> {
        Ok(&mut self.tensor_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Mat> {
        Ok(&self.tensor(name)?.grad)
    }

    /// Canonical tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    pub fn alias_count(&self) -> usize {
        self.aliases.len()
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Distinct scalars (aliases counted once).
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the gradient slots; names may be aliases.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            self.tensor_mut(name)?.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Gradient slots as a map, canonical names only.
    pub fn gradients(&self) -> Gradients {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.grad.clone()))
            .collect()
    }

    /// Flat (canonical name, index) addressing used by gradient probes.
    pub fn scalar_at(&self, mut flat: usize) -> Option<(&str, usize)> {
        for (name, t) in &self.tensors {
            if flat < t.value.len() {
                return Some((name.as_str(), flat));
            }
            flat -= t.value.len();
        }
        None
    }
}

/// Creates every tensor `spec` declares. Weights are drawn from a substream
/// named after the tensor, so adding a tensor never perturbs the others.
pub fn init_params(spec: &ArchSpec, seed: u64) -> ParamStore {
    let root = Rng::new(seed).substream("init");
    let mut store = ParamStore::new();
    for decl in spec.param_decls() {
        let value = match decl.init {
            Init::Ones => Mat::filled(decl.rows, decl.cols, 1.0),
            Init::Zeros => Mat::zeros(decl.rows, decl.cols),
            Init::Normal => {
                let mut rng = root.substream(&decl.name);
                Mat::from_fn(decl.rows, decl.cols, |_, _| rng.truncated_normal(INIT_STD))
            }
        };
        store
            .insert(decl.name.clone(), value)
            .expect("declared names are unique");
    }
    for (alias, canonical) in spec.param_aliases() {
        store
            .alias(alias, &canonical)
            .expect("aliases point at declared tensors");
    }
    store
}

/// Checks that `store` holds exactly the tensors and aliases `spec` declares,
/// with matching shapes.
pub fn check_store(spec: &ArchSpec, store: &ParamStore) -> Result<()> {
    let decls = spec.param_decls();
    for d in &decls {
        let v = store
            .tensors
            .get(&d.name)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks `{}`", d.name)))?;
        if v.value.shape() != (d.rows, d.cols) {
            return Err(Error::ShapeMismatch(format!(
                "`{}` is {}x{}, architecture expects {}x{}",
                d.name,
                v.value.rows(),
                v.value.cols(),
                d.rows,
                d.cols
            )));
        }
    }
    if store.tensors.len() != decls.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} tensors, architecture declares {}",
            store.tensors.len(),
            decls.len()
        )));
    }
    let want: BTreeMap<String, String> = spec.param_aliases().into_iter().collect();
    if want != store.aliases {
        return Err(Error::ShapeMismatch("checkpoint ties differ from the architecture".into()));
    }
    Ok(())
}
