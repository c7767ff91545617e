use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use super::FactorGraph;
use crate::error::{Error, Result};
use crate::factors::{Factor, FactorClass, ResidualBlock, Values, VarId};
use crate::scalar::Real;

/// Huber threshold selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HuberMode<T> {
    /// `1.345 * 1.4826 * MAD` of the residual entries of each robust
    /// factor class, measured at the first iteration.
    Auto,
    Fixed(T),
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions<T> {
    pub max_iterations: usize,
    pub lm_initial_lambda: T,
    /// Stop when the relative cost decrease of an accepted step drops below
    /// this and the step itself is below the square root of machine epsilon.
    pub cost_tolerance: T,
    pub huber: HuberMode<T>,
    /// Worker threads for residual evaluation; `<= 1` evaluates inline.
    pub threads: usize,
}

impl<T: Real> Default for SolveOptions<T> {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            lm_initial_lambda: T::lit(1e-4),
            cost_tolerance: T::lit(1e-10),
            huber: HuberMode::Auto,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow<T> {
    pub iteration: usize,
    pub cost: T,
    pub lambda: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<T> {
    pub iterations: usize,
    pub initial_cost: T,
    pub final_cost: T,
    pub converged: bool,
    /// Non-finite cost or an unrecoverable linear solve.
    pub diverged: bool,
    /// Damped systems that failed to factorize.
    pub linear_failures: usize,
    /// Row 0 is the initial state; one row per accepted step after that.
    pub trace: Vec<TraceRow<T>>,
    pub huber_deltas: BTreeMap<FactorClass, T>,
}

/// IRLS weight `min(1, delta / |r|)`.
#[inline]
pub fn huber_weight<T: Real>(norm: T, delta: T) -> T {
    if norm <= delta {
        T::one()
    } else {
        delta / norm
    }
}

/// Huber cost of a block with squared norm `s2`.
#[inline]
pub fn huber_cost<T: Real>(s2: T, delta: T) -> T {
    let s = s2.sqrt();
    if s <= delta {
        s2
    } else {
        T::lit(2.0) * delta * s - delta * delta
    }
}

fn median<T: Real>(v: &mut [T]) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

pub(super) fn auto_deltas<T: Real>(
    factors: &[&dyn Factor<T>],
    blocks: &[Option<ResidualBlock<T>>],
) -> BTreeMap<FactorClass, T> {
    let mut by_class: BTreeMap<FactorClass, Vec<T>> = BTreeMap::new();
    for (f, b) in factors.iter().zip(blocks) {
        if let Some(b) = b {
            if f.class().is_robust() {
                by_class.entry(f.class()).or_default().extend(b.residual.iter().copied());
            }
        }
    }
    by_class
        .into_iter()
        .map(|(c, mut r)| {
            let med = median(&mut r);
            let mut dev: Vec<T> = r.iter().map(|x| (*x - med).abs()).collect();
            let mad = median(&mut dev);
            let delta = if mad > T::zero() {
                T::lit(1.345 * 1.4826) * mad
            } else {
                T::max_value().unwrap_or(T::lit(f64::MAX))
            };
            (c, delta)
        })
        .collect()
}

pub(super) fn delta_for<T: Real>(deltas: &BTreeMap<FactorClass, T>, class: FactorClass) -> Option<T> {
    if class.is_robust() {
        deltas.get(&class).copied()
    } else {
        None
    }
}

/// Evaluates every factor in order, optionally on a thread pool.
pub(super) fn evaluate_all<T: Real>(
    factors: &[&dyn Factor<T>],
    values: &Values<T>,
    need: &(dyn Fn(VarId) -> bool + Sync),
    pool: Option<&rayon::ThreadPool>,
) -> Vec<Option<ResidualBlock<T>>> {
    let eval = |f: &&dyn Factor<T>| f.evaluate(values, need).ok();
    match pool {
        Some(p) => p.install(|| factors.par_iter().map(eval).collect()),
        None => factors.iter().map(eval).collect(),
    }
}

fn total_cost<T: Real>(
    factors: &[&dyn Factor<T>],
    blocks: &mut [Option<ResidualBlock<T>>],
    deltas: &BTreeMap<FactorClass, T>,
) -> T {
    let mut cost = T::zero();
    for (f, b) in factors.iter().zip(blocks.iter_mut()) {
        if let Some(b) = b {
            let s2 = b.squared_norm();
            match delta_for(deltas, f.class()) {
                Some(d) => {
                    b.robust_weight = huber_weight(s2.sqrt(), d);
                    cost += huber_cost(s2, d);
                }
                None => {
                    b.robust_weight = T::one();
                    cost += s2;
                }
            }
        }
    }
    cost
}

/// Dense Gauss-Newton system `H = sum w J^T J`, `g = sum w J^T r`.
pub(super) fn assemble<T: Real>(
    blocks: &[Option<ResidualBlock<T>>],
    index: &BTreeMap<VarId, (usize, usize)>,
    dim: usize,
) -> (DMatrix<T>, DVector<T>) {
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    for b in blocks.iter().flatten() {
        let w = b.robust_weight;
        let js: Vec<(usize, &DMatrix<T>)> = b
            .jacobians
            .iter()
            .filter_map(|(id, j)| index.get(id).map(|(o, _)| (*o, j)))
            .collect();
        for (a, (oa, ja)) in js.iter().enumerate() {
            let jta = ja.transpose() * w;
            let mut gv = g.rows_mut(*oa, ja.ncols());
            gv += &jta * &b.residual;
            for (ob, jb) in js.iter().skip(a) {
                let blk = &jta * *jb;
                let mut hv = h.view_mut((*oa, *ob), (ja.ncols(), jb.ncols()));
                hv += &blk;
                if ob != oa {
                    let mut ht = h.view_mut((*ob, *oa), (jb.ncols(), ja.ncols()));
                    ht += blk.transpose();
                }
            }
        }
    }
    (h, g)
}

fn is_landmark(id: &VarId) -> bool {
    matches!(id, VarId::Landmark(_))
}

/// Landmark block of a [`SplitSystem`].
struct LandmarkBlock<T: Real> {
    offset: usize,
    h: Matrix3<T>,
    g: Vector3<T>,
    /// `H_rl` blocks keyed by the reduced-variable offset.
    coupling: BTreeMap<usize, DMatrix<T>>,
}

/// Gauss-Newton system with the free landmarks kept as 3x3 diagonal blocks
/// and eliminated by Schur complement when solving.
struct SplitSystem<T: Real> {
    h: DMatrix<T>,
    g: DVector<T>,
    landmarks: Vec<LandmarkBlock<T>>,
}

fn assemble_split<T: Real>(
    blocks: &[Option<ResidualBlock<T>>],
    index: &BTreeMap<VarId, (usize, usize)>,
    reduced_dim: usize,
) -> SplitSystem<T> {
    let mut h = DMatrix::zeros(reduced_dim, reduced_dim);
    let mut g = DVector::zeros(reduced_dim);
    let mut landmarks: BTreeMap<usize, LandmarkBlock<T>> = BTreeMap::new();
    for b in blocks.iter().flatten() {
        let w = b.robust_weight;
        let mut reduced = Vec::new();
        let mut lm = None;
        for (id, j) in &b.jacobians {
            if let Some((o, _)) = index.get(id) {
                if *o >= reduced_dim {
                    lm = Some((*o, j));
                } else {
                    reduced.push((*o, j));
                }
            }
        }
        for (a, (oa, ja)) in reduced.iter().enumerate() {
            let jta = ja.transpose() * w;
            let mut gv = g.rows_mut(*oa, ja.ncols());
            gv += &jta * &b.residual;
            for (ob, jb) in reduced.iter().skip(a) {
                let blk = &jta * *jb;
                let mut hv = h.view_mut((*oa, *ob), (ja.ncols(), jb.ncols()));
                hv += &blk;
                if ob != oa {
                    let mut ht = h.view_mut((*ob, *oa), (jb.ncols(), ja.ncols()));
                    ht += blk.transpose();
                }
            }
        }
        if let Some((ol, jl)) = lm {
            let e = landmarks.entry(ol).or_insert_with(|| LandmarkBlock {
                offset: ol,
                h: Matrix3::zeros(),
                g: Vector3::zeros(),
                coupling: BTreeMap::new(),
            });
            let jtl = jl.transpose() * w;
            let hl = &jtl * jl;
            let gl = &jtl * &b.residual;
            for r in 0..3 {
                e.g[r] += gl[r];
                for c in 0..3 {
                    e.h[(r, c)] += hl[(r, c)];
                }
            }
            for (oa, ja) in &reduced {
                let blk = ja.transpose() * jl * w;
                match e.coupling.get_mut(oa) {
                    Some(m) => *m += blk,
                    None => {
                        e.coupling.insert(*oa, blk);
                    }
                }
            }
        }
    }
    SplitSystem { h, g, landmarks: landmarks.into_values().collect() }
}

impl<T: Real> SplitSystem<T> {
    /// Solves `(H + lambda diag(H)) dx = -g`, diagonal entries floored at
    /// `floor`, eliminating the landmark blocks first.
    fn damped_step(&self, lambda: T, floor: T, dim: usize) -> Option<DVector<T>> {
        let n = self.h.nrows();
        let mut s = self.h.clone();
        for i in 0..n {
            s[(i, i)] += lambda * self.h[(i, i)].max(floor);
        }
        let mut rhs = -&self.g;
        let mut inverses = Vec::with_capacity(self.landmarks.len());
        for l in &self.landmarks {
            let mut hl = l.h;
            for i in 0..3 {
                hl[(i, i)] += lambda * l.h[(i, i)].max(floor);
            }
            let inv = hl.cholesky()?.inverse();
            for (oa, ca) in &l.coupling {
                let ca_inv = ca * inv;
                let mut rv = rhs.rows_mut(*oa, ca.nrows());
                rv += &ca_inv * l.g;
                for (ob, cb) in &l.coupling {
                    let mut sv = s.view_mut((*oa, *ob), (ca.nrows(), cb.nrows()));
                    sv -= &ca_inv * cb.transpose();
                }
            }
            inverses.push(inv);
        }
        let dxr = s.cholesky()?.solve(&rhs);
        let mut dx = DVector::zeros(dim);
        dx.rows_mut(0, n).copy_from(&dxr);
        for (l, inv) in self.landmarks.iter().zip(&inverses) {
            let mut r = -l.g;
            for (oa, ca) in &l.coupling {
                r -= ca.transpose() * dxr.rows(*oa, ca.nrows());
            }
            dx.fixed_rows_mut::<3>(l.offset).copy_from(&(inv * r));
        }
        Some(dx)
    }
}

fn retract_all<T: Real>(values: &Values<T>, index: &BTreeMap<VarId, (usize, usize)>, dx: &DVector<T>) -> Values<T> {
    let mut out = values.clone();
    for (id, (o, d)) in index {
        if let Some(v) = values.get(id) {
            out.insert(*id, v.retract(dx.rows(*o, *d).as_slice()));
        }
    }
    out
}

fn build_pool(threads: usize) -> Option<rayon::ThreadPool> {
    if threads <= 1 {
        return None;
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok()
}

/// Levenberg-Marquardt with Marquardt scaling `H + lambda diag(H)`.
///
/// Pose increments are applied on the right. A rejected step multiplies
/// `lambda` by 10, an accepted one divides it by 10; `lambda = 0` gives
/// plain Gauss-Newton steps. Output is independent of `threads`.
pub fn solve<T: Real>(graph: &mut FactorGraph<T>, options: &SolveOptions<T>) -> Result<SolveReport<T>> {
    if graph.values.is_empty() || graph.values.ids().all(|id| graph.fixed.contains(id)) {
        return Err(Error::AllFixed);
    }
    let owned = graph.shared_factors();
    let factors: Vec<&dyn Factor<T>> = owned.iter().map(|f| f.as_ref()).collect();
    let mut index = BTreeMap::new();
    let mut dim = 0;
    {
        let mut touched = std::collections::BTreeSet::new();
        for f in &factors {
            touched.extend(f.keys());
        }
        let free: Vec<(&VarId, &crate::factors::Value<T>)> = graph
            .values
            .iter()
            .filter(|(id, _)| !graph.fixed.contains(id) && touched.contains(id))
            .collect();
        // landmarks last so they can be eliminated as a trailing block
        for (id, v) in free.iter().filter(|(id, _)| !is_landmark(id)).chain(free.iter().filter(|(id, _)| is_landmark(id))) {
            index.insert(**id, (dim, v.dim()));
            dim += v.dim();
        }
    }
    let reduced_dim = index
        .iter()
        .filter(|(id, _)| !is_landmark(id))
        .map(|(_, (_, d))| *d)
        .sum::<usize>();
    let eliminate = reduced_dim < dim
        && factors
            .iter()
            .all(|f| f.keys().iter().filter(|k| is_landmark(k) && index.contains_key(k)).count() <= 1);
    let pool = build_pool(options.threads);
    let need = |id: VarId| index.contains_key(&id);
    let no_jac = |_: VarId| false;

    let mut values = graph.values.clone();
    let mut blocks = evaluate_all(&factors, &values, &need, pool.as_ref());
    let deltas = match options.huber {
        HuberMode::Auto => auto_deltas(&factors, &blocks),
        HuberMode::Fixed(d) => factors
            .iter()
            .map(|f| f.class())
            .filter(|c| c.is_robust())
            .map(|c| (c, d))
            .collect(),
        HuberMode::Disabled => BTreeMap::new(),
    };
    let mut cost = total_cost(&factors, &mut blocks, &deltas);
    let initial_cost = cost;
    let mut lambda = options.lm_initial_lambda;
    let mut report = SolveReport {
        iterations: 0,
        initial_cost,
        final_cost: cost,
        converged: false,
        diverged: !cost.is_finite(),
        linear_failures: 0,
        trace: vec![TraceRow { iteration: 0, cost, lambda }],
        huber_deltas: deltas.clone(),
    };
    if dim == 0 || cost == T::zero() || report.diverged {
        report.converged = !report.diverged;
        graph.deltas = deltas;
        return Ok(report);
    }
    let lambda_floor = T::lit(1e-4);
    let lambda_cap = T::lit(1e12);

    'outer: while report.iterations < options.max_iterations {
        let system = if eliminate {
            assemble_split(&blocks, &index, reduced_dim)
        } else {
            let (h, g) = assemble(&blocks, &index, dim);
            SplitSystem { h, g, landmarks: Vec::new() }
        };
        let gmax = system
            .landmarks
            .iter()
            .fold(system.g.amax(), |m, l| m.max(l.g.amax()));
        if gmax <= T::lit(1e-14) * (T::one() + cost) {
            report.converged = true;
            break;
        }
        let scale = system
            .landmarks
            .iter()
            .fold(system.h.diagonal().amax(), |m, l| m.max(l.h.diagonal().amax()))
            .max(T::one());
        loop {
            let step = system.damped_step(lambda, scale * T::lit(1e-12), dim);
            let Some(dx) = step.filter(|d| d.iter().all(|x| x.is_finite())) else {
                report.linear_failures += 1;
                lambda = (lambda * T::lit(10.0)).max(lambda_floor);
                if lambda > lambda_cap {
                    report.diverged = true;
                    break 'outer;
                }
                continue;
            };
            let candidate = retract_all(&values, &index, &dx);
            let mut trial = evaluate_all(&factors, &candidate, &no_jac, pool.as_ref());
            let new_cost = total_cost(&factors, &mut trial, &deltas);
            if new_cost.is_finite() && new_cost <= cost {
                let decrease = cost - new_cost;
                values = candidate;
                cost = new_cost;
                lambda /= T::lit(10.0);
                report.iterations += 1;
                report.trace.push(TraceRow { iteration: report.iterations, cost, lambda });
                let small_step = dx.amax() <= T::default_epsilon().sqrt();
                let flat = decrease <= options.cost_tolerance * (cost + decrease);
                if (flat && small_step) || decrease == T::zero() || cost == T::zero() {
                    report.converged = true;
                    break 'outer;
                }
                blocks = evaluate_all(&factors, &values, &need, pool.as_ref());
                total_cost(&factors, &mut blocks, &deltas);
                break;
            }
            lambda = (lambda * T::lit(10.0)).max(lambda_floor);
            if lambda > lambda_cap {
                // No descent direction left at this linearization.
                report.converged = true;
                break 'outer;
            }
        }
    }
    report.final_cost = cost;
    graph.values = values;
    graph.deltas = deltas;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::{LinearFactor, MarginalPrior};
    use super::*;
    use crate::factors::Value;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_linear_graph(rng: &mut ChaCha8Rng, vars: usize, dim: usize, factors: usize) -> FactorGraph<f64> {
        let mut g = FactorGraph::new();
        for v in 0..vars {
            g.add_variable(VarId::Generic(v), Value::Vector(DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))));
        }
        for k in 0..factors {
            let a = k % vars;
            let b = (k * 7 + 3) % vars;
            let mut terms = vec![(VarId::Generic(a), DMatrix::from_fn(3, dim, |_, _| rng.random_range(-1.0..1.0)))];
            if b != a {
                terms.push((VarId::Generic(b), DMatrix::from_fn(3, dim, |_, _| rng.random_range(-1.0..1.0))));
            }
            let c = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            g.add_factor(LinearFactor::new(terms, c).unwrap()).unwrap();
        }
        g
    }

    fn stacked(g: &FactorGraph<f64>, vars: usize) -> DVector<f64> {
        let mut out = Vec::new();
        for v in 0..vars {
            out.extend(g.values().vector(VarId::Generic(v)).unwrap().iter());
        }
        DVector::from_vec(out)
    }

    /// Dense closed-form least squares of a linear graph.
    fn closed_form(g: &FactorGraph<f64>, vars: usize, dim: usize) -> DVector<f64> {
        let mut zero = Values::new();
        for v in 0..vars {
            zero.insert(VarId::Generic(v), Value::Vector(DVector::zeros(dim)));
        }
        let mut rows: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        for f in g.factors() {
            let b = f.evaluate(&zero, &|_| true).unwrap();
            let mut a = DMatrix::zeros(b.residual.len(), vars * dim);
            for (id, j) in &b.jacobians {
                let VarId::Generic(i) = id else { unreachable!() };
                a.view_mut((0, i * dim), (j.nrows(), dim)).copy_from(j);
            }
            rows.push((a, b.residual));
        }
        let n: usize = rows.iter().map(|(a, _)| a.nrows()).sum();
        let mut a = DMatrix::zeros(n, vars * dim);
        let mut c = DVector::zeros(n);
        let mut r = 0;
        for (ai, ci) in rows {
            a.view_mut((r, 0), (ai.nrows(), vars * dim)).copy_from(&ai);
            c.rows_mut(r, ci.len()).copy_from(&ci);
            r += ai.nrows();
        }
        a.svd(true, true).solve(&(-c), 1e-14).unwrap()
    }

    #[test]
    fn gauss_newton_step_solves_linear_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut g = random_linear_graph(&mut rng, 4, 2, 12);
            let want = closed_form(&g, 4, 2);
            let opts = SolveOptions { max_iterations: 1, lm_initial_lambda: 0.0, huber: HuberMode::Disabled, ..Default::default() };
            let rep = solve(&mut g, &opts).unwrap();
            assert_eq!(rep.iterations, 1);
            assert!((stacked(&g, 4) - &want).amax() < 1e-10);
        }
    }

    #[test]
    fn landmark_elimination_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let (mut split, mut dense) = (FactorGraph::<f64>::new(), FactorGraph::<f64>::new());
            for v in 0..3 {
                let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                split.add_variable(VarId::Generic(v), Value::Vector(x.clone()));
                dense.add_variable(VarId::Generic(v), Value::Vector(x));
            }
            for l in 0..6 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                split.add_variable(VarId::Landmark(l), Value::Vector(x.clone()));
                dense.add_variable(VarId::Generic(10 + l), Value::Vector(x));
                for v in [l % 3, (l + 1) % 3] {
                    let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
                    let b = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
                    let c = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    let f = |lm: VarId| LinearFactor::new(vec![(VarId::Generic(v), a.clone()), (lm, b.clone())], c.clone()).unwrap();
                    split.add_factor(f(VarId::Landmark(l))).unwrap();
                    dense.add_factor(f(VarId::Generic(10 + l))).unwrap();
                }
            }
            let opts = SolveOptions { huber: HuberMode::Disabled, ..Default::default() };
            let (ra, rb) = (solve(&mut split, &opts).unwrap(), solve(&mut dense, &opts).unwrap());
            assert!((ra.final_cost - rb.final_cost).abs() < 1e-10);
            for l in 0..6 {
                let a = split.values().vector(VarId::Landmark(l)).unwrap();
                let b = dense.values().vector(VarId::Generic(10 + l)).unwrap();
                assert!((a - b).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_residual_graph_converges_immediately() {
        let mut g = FactorGraph::new();
        g.add_variable(VarId::Generic(0), Value::Vector(DVector::from_element(2, 1.0)));
        let f = LinearFactor::new(vec![(VarId::Generic(0), DMatrix::identity(2, 2))], DVector::from_element(2, -1.0)).unwrap();
        g.add_factor(f).unwrap();
        let rep = solve(&mut g, &SolveOptions::default()).unwrap();
        assert!(rep.converged && rep.iterations <= 1);
        assert_eq!(rep.final_cost, 0.0);
    }

    #[test]
    fn all_fixed_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = random_linear_graph(&mut rng, 3, 2, 5);
        g.fix_where(|_| true, true);
        assert_eq!(solve(&mut g, &SolveOptions::default()).unwrap_err(), Error::AllFixed);
    }

    #[test]
    fn fixed_variables_are_untouched_and_freeing_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_linear_graph(&mut rng, 4, 2, 10);
        let mut fixed = base.clone();
        fixed.fix_variables(&[VarId::Generic(1)], true).unwrap();
        let before = fixed.values().vector(VarId::Generic(1)).unwrap().clone();
        let opts = SolveOptions { huber: HuberMode::Disabled, ..Default::default() };
        let r_fixed = solve(&mut fixed, &opts).unwrap();
        assert_eq!(fixed.values().vector(VarId::Generic(1)).unwrap(), &before);
        let mut free = base.clone();
        let r_free = solve(&mut free, &opts).unwrap();
        assert!(r_free.final_cost <= r_fixed.final_cost + 1e-12);
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = random_linear_graph(&mut rng, 5, 3, 20);
        let rep = solve(&mut g, &SolveOptions::default()).unwrap();
        for w in rep.trace.windows(2) {
            assert!(w[1].cost <= w[0].cost);
        }
        assert!(rep.final_cost <= rep.initial_cost);
    }

    #[test]
    fn infinite_huber_matches_plain_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_linear_graph(&mut rng, 4, 2, 10);
        let mut a = g.clone();
        let mut b = g.clone();
        let ra = solve(&mut a, &SolveOptions { huber: HuberMode::Fixed(f64::INFINITY), ..Default::default() }).unwrap();
        let rb = solve(&mut b, &SolveOptions { huber: HuberMode::Disabled, ..Default::default() }).unwrap();
        assert_eq!(ra.initial_cost, rb.initial_cost);
        assert_eq!(ra.final_cost, rb.final_cost);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn huber_weight_never_inflates() {
        for (s, d) in [(0.1, 1.0), (1.0, 1.0), (5.0, 1.0), (1e9, 1e-3)] {
            let w: f64 = huber_weight(s, d);
            assert!(w <= 1.0 && w > 0.0);
            assert!(huber_cost(s * s, d) <= s * s);
        }
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_linear_graph(&mut rng, 6, 3, 40);
        let mut a = g.clone();
        let mut b = g.clone();
        let ra = solve(&mut a, &SolveOptions { threads: 1, ..Default::default() }).unwrap();
        let rb = solve(&mut b, &SolveOptions { threads: 4, ..Default::default() }).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn empty_prior_is_not_installed() {
        let mut g: FactorGraph<f64> = FactorGraph::new();
        g.add_variable(VarId::Generic(0), Value::Vector(DVector::zeros(1)));
        g.install_prior(MarginalPrior::empty()).unwrap();
        assert!(g.marginal_priors().is_empty());
    }
}
