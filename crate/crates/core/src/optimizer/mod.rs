//! Levenberg-Marquardt over poses, weight vectors and landmarks, with
//! variable fixing, Huber IRLS and Schur-complement marginalization.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factors::{Factor, FactorClass, ResidualBlock, Value, Values, VarId};
use crate::scalar::Real;

mod lm;
mod marginal;

pub use lm::{huber_cost, huber_weight, solve, HuberMode, SolveOptions, SolveReport, TraceRow};
pub use marginal::{marginalize, MarginalPrior};

/// Variables, factors and installed marginal priors.
#[derive(Debug, Clone, Default)]
pub struct FactorGraph<T: Real> {
    values: Values<T>,
    fixed: BTreeSet<VarId>,
    factors: Vec<Arc<dyn Factor<T>>>,
    priors: Vec<Arc<MarginalPrior<T>>>,
    /// Huber thresholds used by the last solve, reused when marginalizing.
    deltas: BTreeMap<FactorClass, T>,
}

impl<T: Real> FactorGraph<T> {
    pub fn new() -> Self {
        Self {
            values: Values::new(),
            fixed: BTreeSet::new(),
            factors: Vec::new(),
            priors: Vec::new(),
            deltas: BTreeMap::new(),
        }
    }

    pub fn add_variable(&mut self, id: VarId, value: Value<T>) {
        self.values.insert(id, value);
    }

    pub fn set_value(&mut self, id: VarId, value: Value<T>) -> Result<()> {
        match self.values.get(&id) {
            Some(v) if v.dim() == value.dim() => {
                self.values.insert(id, value);
                Ok(())
            }
            Some(_) => Err(Error::DimensionMismatch(format!("new value for {id}"))),
            None => Err(Error::UnknownVariable(id.to_string())),
        }
    }

    pub fn values(&self) -> &Values<T> {
        &self.values
    }

    pub fn value(&self, id: VarId) -> Option<&Value<T>> {
        self.values.get(&id)
    }

    /// Adds a factor; every key must already be a variable.
    pub fn add_factor(&mut self, factor: impl Factor<T> + 'static) -> Result<()> {
        self.add_shared_factor(Arc::new(factor))
    }

    pub fn add_shared_factor(&mut self, factor: Arc<dyn Factor<T>>) -> Result<()> {
        if let Some(k) = factor.keys().into_iter().find(|k| !self.values.contains(k)) {
            return Err(Error::UnknownVariable(k.to_string()));
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn factors(&self) -> &[Arc<dyn Factor<T>>] {
        &self.factors
    }

    /// Keeps only the factors for which `keep` returns true.
    pub fn retain_factors(&mut self, mut keep: impl FnMut(&dyn Factor<T>) -> bool) {
        self.factors.retain(|f| keep(f.as_ref()));
    }

    pub fn marginal_priors(&self) -> &[Arc<MarginalPrior<T>>] {
        &self.priors
    }

    /// Installs a prior produced by [`marginalize`]. Empty priors are ignored.
    pub fn install_prior(&mut self, prior: MarginalPrior<T>) -> Result<()> {
        if prior.retained_ids.is_empty() {
            return Ok(());
        }
        if let Some(k) = prior.retained_ids.iter().find(|k| !self.values.contains(k)) {
            return Err(Error::UnknownVariable(k.to_string()));
        }
        self.priors.push(Arc::new(prior));
        Ok(())
    }

    /// Toggles whether `ids` take part in the normal equations.
    pub fn fix_variables(&mut self, ids: &[VarId], fixed: bool) -> Result<()> {
        if let Some(k) = ids.iter().find(|k| !self.values.contains(k)) {
            return Err(Error::UnknownVariable(k.to_string()));
        }
        for id in ids {
            if fixed {
                self.fixed.insert(*id);
            } else {
                self.fixed.remove(id);
            }
        }
        Ok(())
    }

    /// Fixes or frees every variable matching `pred`.
    pub fn fix_where(&mut self, pred: impl Fn(&VarId) -> bool, fixed: bool) {
        let ids: Vec<VarId> = self.values.ids().filter(|id| pred(id)).copied().collect();
        for id in ids {
            if fixed {
                self.fixed.insert(id);
            } else {
                self.fixed.remove(&id);
            }
        }
    }

    pub fn is_fixed(&self, id: VarId) -> bool {
        self.fixed.contains(&id)
    }

    /// Removes a variable that no factor or prior references.
    pub fn remove_variable(&mut self, id: VarId) -> Result<Value<T>> {
        if self.all_factors().any(|f| f.keys().contains(&id)) {
            return Err(Error::InvalidConfig(format!("{id} is still referenced")));
        }
        self.fixed.remove(&id);
        self.values
            .remove(&id)
            .ok_or_else(|| Error::UnknownVariable(id.to_string()))
    }

    pub fn huber_deltas(&self) -> &BTreeMap<FactorClass, T> {
        &self.deltas
    }

    pub(crate) fn shared_factors(&self) -> Vec<Arc<dyn Factor<T>>> {
        self.factors
            .iter()
            .cloned()
            .chain(self.priors.iter().map(|p| p.clone() as Arc<dyn Factor<T>>))
            .collect()
    }

    pub(crate) fn all_factors(&self) -> impl Iterator<Item = &dyn Factor<T>> {
        self.factors
            .iter()
            .map(|f| f.as_ref())
            .chain(self.priors.iter().map(|p| p.as_ref() as &dyn Factor<T>))
    }
}

/// Toggles participation of `ids` in the normal equations.
pub fn fix_variables<T: Real>(graph: &mut FactorGraph<T>, ids: &[VarId], fixed: bool) -> Result<()> {
    graph.fix_variables(ids, fixed)
}

/// Linear residual `sum_k A_k x_k + c` over Euclidean variables.
#[derive(Debug, Clone)]
pub struct LinearFactor<T: Real> {
    keys: Vec<VarId>,
    blocks: Vec<DMatrix<T>>,
    offset: DVector<T>,
}

impl<T: Real> LinearFactor<T> {
    pub fn new(terms: Vec<(VarId, DMatrix<T>)>, offset: DVector<T>) -> Result<Self> {
        if terms.iter().any(|(_, a)| a.nrows() != offset.len()) {
            return Err(Error::DimensionMismatch("linear factor rows".into()));
        }
        let (keys, blocks) = terms.into_iter().unzip();
        Ok(Self { keys, blocks, offset })
    }
}

impl<T: Real> Factor<T> for LinearFactor<T> {
    fn keys(&self) -> Vec<VarId> {
        self.keys.clone()
    }

    fn class(&self) -> FactorClass {
        FactorClass::Linear
    }

    fn evaluate(&self, values: &Values<T>, need: &dyn Fn(VarId) -> bool) -> Result<ResidualBlock<T>> {
        let mut r = self.offset.clone();
        for (k, a) in self.keys.iter().zip(&self.blocks) {
            let x = values.vector(*k)?;
            if x.len() != a.ncols() {
                return Err(Error::DimensionMismatch(format!("linear factor on {k}")));
            }
            r += a * x;
        }
        let mut block = ResidualBlock::new(r);
        for (k, a) in self.keys.iter().zip(&self.blocks) {
            if need(*k) {
                block = block.with_jacobian(*k, a.clone());
            }
        }
        Ok(block)
    }
}
