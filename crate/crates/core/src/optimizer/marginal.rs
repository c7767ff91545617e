use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use super::lm::{assemble, delta_for, huber_weight};
use super::FactorGraph;
use crate::error::{Error, Result};
use crate::factors::{Factor, FactorClass, ResidualBlock, Value, Values, VarId};
use crate::scalar::Real;

/// Gaussian prior left behind by Schur-complement elimination.
///
/// Evaluated as the residual `J dx + r0`, where `dx` is the tangent offset of
/// the retained variables from their linearization point and
/// `J^T J = information`, `J^T r0 = info_vector`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior<T: Real> {
    pub retained_ids: Vec<VarId>,
    pub information: DMatrix<T>,
    pub info_vector: DVector<T>,
    pub linearization_point: Vec<Value<T>>,
    /// Set when `H_mm` needed damping to be inverted.
    pub regularized: bool,
    sqrt_information: DMatrix<T>,
    offset: DVector<T>,
}

impl<T: Real> MarginalPrior<T> {
    pub fn empty() -> Self {
        Self {
            retained_ids: Vec::new(),
            information: DMatrix::zeros(0, 0),
            info_vector: DVector::zeros(0),
            linearization_point: Vec::new(),
            regularized: false,
            sqrt_information: DMatrix::zeros(0, 0),
            offset: DVector::zeros(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.retained_ids.is_empty()
    }

    fn from_schur(
        retained_ids: Vec<VarId>,
        information: DMatrix<T>,
        info_vector: DVector<T>,
        linearization_point: Vec<Value<T>>,
        regularized: bool,
    ) -> Self {
        let eig = information.clone().symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > top * T::lit(1e-12))
            .collect();
        let n = information.nrows();
        let mut sqrt_information = DMatrix::zeros(keep.len(), n);
        let mut offset = DVector::zeros(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            let v = eig.eigenvectors.column(i);
            sqrt_information.row_mut(row).copy_from(&(v.transpose() * s));
            offset[row] = v.dot(&info_vector) / s;
        }
        Self {
            retained_ids,
            information,
            info_vector,
            linearization_point,
            regularized,
            sqrt_information,
            offset,
        }
    }
}

impl<T: Real> Factor<T> for MarginalPrior<T> {
    fn keys(&self) -> Vec<VarId> {
        self.retained_ids.clone()
    }

    fn class(&self) -> FactorClass {
        FactorClass::MarginalPrior
    }

    fn evaluate(&self, values: &Values<T>, need: &dyn Fn(VarId) -> bool) -> Result<ResidualBlock<T>> {
        let mut dx = Vec::with_capacity(self.information.nrows());
        for (id, lin) in self.retained_ids.iter().zip(&self.linearization_point) {
            let v = values.get(id).ok_or_else(|| Error::UnknownVariable(id.to_string()))?;
            dx.extend(lin.local(v)?.iter().copied());
        }
        let r = &self.sqrt_information * DVector::from_vec(dx) + &self.offset;
        let mut block = ResidualBlock::new(r);
        let mut col = 0;
        for (id, lin) in self.retained_ids.iter().zip(&self.linearization_point) {
            let d = lin.dim();
            if need(*id) {
                block = block.with_jacobian(*id, self.sqrt_information.columns(col, d).into_owned());
            }
            col += d;
        }
        Ok(block)
    }
}

/// Eliminates `drop_ids` by Schur complement.
///
/// Every factor and installed prior touching a dropped variable is
/// linearized at the current values, removed, and replaced by one prior on
/// the free variables it shared with the dropped ones. The dropped
/// variables are removed from the graph. Fixed neighbours are treated as
/// constants. Returns a copy of the installed prior (empty when nothing
/// touched the dropped variables).
pub fn marginalize<T: Real>(graph: &mut FactorGraph<T>, drop_ids: &[VarId]) -> Result<MarginalPrior<T>> {
    if let Some(k) = drop_ids.iter().find(|k| !graph.values.contains(k)) {
        return Err(Error::UnknownVariable(k.to_string()));
    }
    let drop: BTreeSet<VarId> = drop_ids.iter().copied().collect();
    let touches = |f: &dyn Factor<T>| f.keys().iter().any(|k| drop.contains(k));

    let affected: Vec<std::sync::Arc<dyn Factor<T>>> = graph
        .shared_factors()
        .into_iter()
        .filter(|f| touches(f.as_ref()))
        .collect();

    let mut retained = BTreeSet::new();
    for f in &affected {
        for k in f.keys() {
            if !drop.contains(&k) && !graph.fixed.contains(&k) {
                retained.insert(k);
            }
        }
    }
    let mut index = BTreeMap::new();
    let mut dim = 0;
    for id in drop.iter().filter(|id| !graph.fixed.contains(id)) {
        let d = graph.values.get(id).map_or(0, |v| v.dim());
        index.insert(*id, (dim, d));
        dim += d;
    }
    let m = dim;
    for id in &retained {
        let d = graph.values.get(id).map_or(0, |v| v.dim());
        index.insert(*id, (dim, d));
        dim += d;
    }

    let mut prior = MarginalPrior::empty();
    if !affected.is_empty() && m > 0 {
        let blocks: Vec<Option<ResidualBlock<T>>> = affected
            .iter()
            .map(|f| {
                f.evaluate(&graph.values, &|id| index.contains_key(&id)).ok().map(|mut b| {
                    if let Some(d) = delta_for(&graph.deltas, f.class()) {
                        b.robust_weight = huber_weight(b.residual.norm(), d);
                    }
                    b
                })
            })
            .collect();
        let (h, g) = assemble(&blocks, &index, dim);
        let r = dim - m;
        let hmm = h.view((0, 0), (m, m)).into_owned();
        let hmr = h.view((0, m), (m, r)).into_owned();
        let hrr = h.view((m, m), (r, r)).into_owned();
        let gm = g.rows(0, m).into_owned();
        let gr = g.rows(m, r).into_owned();
        let (inv, regularized) = match hmm.clone().cholesky() {
            Some(c) => (c.inverse(), false),
            None => {
                let mut damp = hmm.trace() * T::lit(1e-9);
                if !(damp > T::zero()) {
                    damp = T::lit(1e-9);
                }
                let mut a = hmm.clone();
                for i in 0..m {
                    a[(i, i)] += damp;
                }
                let inv = a
                    .clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .or_else(|| a.pseudo_inverse(T::lit(1e-12)).ok())
                    .ok_or_else(|| Error::SingularSystem("marginal block".into()))?;
                (inv, true)
            }
        };
        if r > 0 {
            let k = hmr.transpose() * &inv;
            let mut info = hrr - &k * &hmr;
            info = (&info + info.transpose()) * T::lit(0.5);
            let vec = gr - k * gm;
            let ids: Vec<VarId> = retained.iter().copied().collect();
            let lin = ids
                .iter()
                .map(|id| graph.values.get(id).cloned().ok_or_else(|| Error::UnknownVariable(id.to_string())))
                .collect::<Result<Vec<_>>>()?;
            prior = MarginalPrior::from_schur(ids, info, vec, lin, regularized);
        } else {
            prior.regularized = regularized;
        }
    }

    graph.factors.retain(|f| !touches(f.as_ref()));
    graph.priors.retain(|p| !touches(p.as_ref() as &dyn Factor<T>));
    for id in &drop {
        graph.values.remove(id);
        graph.fixed.remove(id);
    }
    graph.install_prior(prior.clone())?;
    Ok(prior)
}
