//! Neuron permutations: assignment solver, weight and activation matching,
//! and the function-preserving permutation action.
//!
//! Convention: in `permute(params, P)`, unit `i` of hidden layer `l` in the
//! result is unit `P[l][i]` of the input network. Matching `b` onto `a`
//! returns the `P` for which `permute(b, P)` is closest to `a`.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{ActivationTrace, NetSpec, ParamSet};
use crate::rng::{SeedPlan, StreamTag};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

/// Optimal linear assignment (Hungarian method with potentials, O(n^3)).
///
/// Returns `assignment[row] = column`. Among equal reduced costs the lowest
/// column index wins, which makes the result deterministic.
pub fn lap_solve<T: Scalar>(cost: &Array2<T>, sense: Sense) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(LabError::Shape(format!("assignment cost must be square, got {n}x{m}")));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("assignment cost matrix".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = |i: usize, j: usize| match sense {
        Sense::Min => cost[[i, j]],
        Sense::Max => -cost[[i, j]],
    };
    let inf = T::infinity();
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Total cost of an assignment.
pub fn assignment_cost<T: Scalar>(cost: &Array2<T>, assignment: &[usize]) -> T {
    assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}

/// One permutation per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermSet {
    pub perms: Vec<Vec<usize>>,
}

impl PermSet {
    pub fn identity(spec: &NetSpec) -> Self {
        PermSet {
            perms: spec.hidden.iter().map(|&w| (0..w).collect()).collect(),
        }
    }

    /// Uniformly random permutations drawn from `seeds`.
    pub fn random(spec: &NetSpec, seeds: &SeedPlan, index: u64) -> Self {
        let mut s = seeds.stream(StreamTag::MatchOrder, index);
        let mut p = Self::identity(spec);
        for perm in &mut p.perms {
            perm.shuffle(&mut s);
        }
        p
    }

    pub fn validate(&self, spec: &NetSpec) -> Result<()> {
        if self.perms.len() != spec.hidden.len() {
            return Err(LabError::Shape(format!(
                "{} permutations for {} hidden layers",
                self.perms.len(),
                spec.hidden.len()
            )));
        }
        for (l, (perm, &w)) in self.perms.iter().zip(&spec.hidden).enumerate() {
            let mut seen = vec![false; w];
            if perm.len() != w {
                return Err(LabError::Shape(format!(
                    "layer {l}: permutation of length {} for width {w}",
                    perm.len()
                )));
            }
            for &p in perm {
                if p >= w || seen[p] {
                    return Err(LabError::Config(format!("layer {l}: not a permutation")));
                }
                seen[p] = true;
            }
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (i, &j) in p.iter().enumerate() {
                    inv[j] = i;
                }
                inv
            })
            .collect();
        PermSet { perms }
    }

    /// The permutation equivalent to applying `self` and then `then`:
    /// `permute(permute(x, self), then) == permute(x, self.compose(then))`.
    pub fn compose(&self, then: &PermSet) -> Self {
        let perms = self
            .perms
            .iter()
            .zip(&then.perms)
            .map(|(p, q)| q.iter().map(|&i| p[i]).collect())
            .collect();
        PermSet { perms }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.perms).expect("integer arrays serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let perms = serde_json::from_str(s).map_err(|e| LabError::Config(format!("bad permutation JSON: {e}")))?;
        Ok(PermSet { perms })
    }
}

/// Share of hidden units mapped to themselves.
pub fn fixed_fraction(p: &PermSet) -> f64 {
    let total: usize = p.perms.iter().map(Vec::len).sum();
    if total == 0 {
        return 1.0;
    }
    let fixed: usize = p
        .perms
        .iter()
        .map(|perm| perm.iter().enumerate().filter(|(i, &j)| *i == j).count())
        .sum();
    fixed as f64 / total as f64
}

/// Applies `p` to the hidden units; the network function is unchanged.
pub fn permute<T: Scalar>(params: &ParamSet<T>, p: &PermSet) -> Result<ParamSet<T>> {
    p.validate(&params.spec)?;
    let mut out = params.clone();
    let n_layers = params.layers.len();
    for l in 0..n_layers {
        let layer = &mut out.layers[l];
        if l < n_layers - 1 {
            let rows = &p.perms[l];
            layer.weight = layer.weight.select(Axis(0), rows);
            layer.bias = layer.bias.select(Axis(0), rows);
            if let Some(n) = &mut layer.norm {
                n.gain = n.gain.select(Axis(0), rows);
                n.shift = n.shift.select(Axis(0), rows);
            }
        }
        if l > 0 {
            layer.weight = layer
                .weight
                .select(Axis(1), &p.perms[l - 1])
                .as_standard_layout()
                .into_owned();
        }
    }
    Ok(out)
}

/// `<a, permute(b, p)>` over all parameters; weight matching ascends this.
pub fn alignment_objective<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>, p: &PermSet) -> Result<T> {
    let pb = permute(b, p)?;
    a.same_shape(&pb)?;
    Ok(a.values().zip(pb.values()).map(|(&x, &y)| x * y).sum())
}

/// Similarity between units of hidden layer `h` of `a` (rows) and `b`
/// (columns), given the current permutations of the neighbouring layers.
fn unit_similarity<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>, p: &PermSet, h: usize) -> Array2<T> {
    let (la, lb) = (&a.layers[h], &b.layers[h]);
    let b_in = if h > 0 {
        lb.weight.select(Axis(1), &p.perms[h - 1])
    } else {
        lb.weight.clone()
    };
    let mut c = la.weight.dot(&b_in.t());
    let (na, nb) = (&a.layers[h + 1], &b.layers[h + 1]);
    let b_out = if h + 1 < p.perms.len() {
        nb.weight.select(Axis(0), &p.perms[h + 1])
    } else {
        nb.weight.clone()
    };
    c += &na.weight.t().dot(&b_out);
    let mut rank_one = |x: &ndarray::Array1<T>, y: &ndarray::Array1<T>| {
        for (i, &xi) in x.iter().enumerate() {
            for (j, &yj) in y.iter().enumerate() {
                c[[i, j]] += xi * yj;
            }
        }
    };
    rank_one(&la.bias, &lb.bias);
    if let (Some(ga), Some(gb)) = (&la.norm, &lb.norm) {
        rank_one(&ga.gain, &gb.gain);
        rank_one(&ga.shift, &gb.shift);
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub perm: PermSet,
    pub passes: usize,
    /// Objective after each accepted layer update, starting from identity.
    pub objective_trace: Vec<f64>,
}

/// Weight matching by coordinate ascent over hidden layers.
///
/// Each pass visits the hidden layers in a seeded random order and replaces a
/// layer's permutation by the optimal assignment for its similarity matrix
/// when that strictly improves the objective. Stops after a pass without
/// changes or after `max_passes`.
pub fn weight_match<T: Scalar>(
    a: &ParamSet<T>,
    b: &ParamSet<T>,
    max_passes: usize,
    seeds: &SeedPlan,
) -> Result<MatchOutcome> {
    a.same_shape(b)?;
    let mut p = PermSet::identity(&a.spec);
    let mut trace = vec![alignment_objective(a, b, &p)?.as_f64()];
    let n_hidden = a.spec.hidden.len();
    let mut passes = 0;
    for pass in 0..max_passes {
        passes = pass + 1;
        let mut order: Vec<usize> = (0..n_hidden).collect();
        order.shuffle(&mut seeds.stream(StreamTag::MatchOrder, pass as u64));
        let mut changed = false;
        for h in order {
            let c = unit_similarity(a, b, &p, h);
            let proposal = lap_solve(&c, Sense::Max)?;
            let old = assignment_cost(&c, &p.perms[h]).as_f64();
            let new = assignment_cost(&c, &proposal).as_f64();
            if proposal != p.perms[h] && new > old + 1e-12 * (1.0 + old.abs()) {
                p.perms[h] = proposal;
                trace.push(alignment_objective(a, b, &p)?.as_f64());
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(MatchOutcome {
        perm: p,
        passes,
        objective_trace: trace,
    })
}

/// Correlation between columns of `xa` and columns of `xb`; zero-variance
/// columns correlate 0 with everything.
pub fn cross_correlation<T: Scalar>(xa: &Array2<T>, xb: &Array2<T>) -> Result<Array2<T>> {
    if xa.nrows() != xb.nrows() {
        return Err(LabError::Shape(format!(
            "activation traces over {} and {} probe examples",
            xa.nrows(),
            xb.nrows()
        )));
    }
    let m = T::of_usize(xa.nrows());
    let center = |x: &Array2<T>| {
        let mean = x.mean_axis(Axis(0)).expect("non-empty probe");
        let c = x - &mean;
        let std = c.map_axis(Axis(0), |col| (col.iter().map(|&v| v * v).sum::<T>() / m).sqrt());
        (c, std)
    };
    let (ca, sa) = center(xa);
    let (cb, sb) = center(xb);
    let mut corr = ca.t().dot(&cb);
    for ((i, j), v) in corr.indexed_iter_mut() {
        let d = sa[i] * sb[j] * m;
        *v = if d > T::zero() { *v / d } else { T::zero() };
    }
    Ok(corr)
}

/// Activation matching: per hidden layer, the assignment maximizing the
/// summed correlation between matched units.
pub fn activation_match<T: Scalar>(a: &ActivationTrace<T>, b: &ActivationTrace<T>) -> Result<PermSet> {
    if a.hidden.len() != b.hidden.len() {
        return Err(LabError::Shape("traces have different depths".into()));
    }
    let perms = a
        .hidden
        .iter()
        .zip(&b.hidden)
        .map(|(xa, xb)| {
            if xa.ncols() != xb.ncols() {
                return Err(LabError::Shape("hidden widths differ".into()));
            }
            lap_solve(&cross_correlation(xa, xb)?, Sense::Max)
        })
        .collect::<Result<_>>()?;
    Ok(PermSet { perms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_by_two_min() {
        let c = array![[1.0, 2.0], [2.0, 1.0]];
        let a = lap_solve(&c, Sense::Min).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(assignment_cost(&c, &a), 2.0);
        assert_eq!(lap_solve(&c, Sense::Max).unwrap(), vec![1, 0]);
    }

    #[test]
    fn zero_diagonal_is_identity() {
        let mut c = Array2::from_elem((6, 6), 1.0);
        c.diag_mut().fill(0.0);
        assert_eq!(lap_solve(&c, Sense::Min).unwrap(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_costs() {
        let c = Array2::<f64>::zeros((2, 3));
        assert!(lap_solve(&c, Sense::Min).is_err());
        let c = array![[0.0, f64::NAN], [1.0, 1.0]];
        assert!(lap_solve(&c, Sense::Min).is_err());
    }

    #[test]
    fn ties_resolve_deterministically() {
        let c = Array2::<f64>::zeros((4, 4));
        let a = lap_solve(&c, Sense::Max).unwrap();
        assert_eq!(a, lap_solve(&c, Sense::Max).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fixed_fraction_counts() {
        let spec = NetSpec::mlp(2, &[8], 2);
        let mut p = PermSet::identity(&spec);
        assert_eq!(fixed_fraction(&p), 1.0);
        p.perms[0].swap(2, 5);
        assert_eq!(fixed_fraction(&p), 0.75);
        p.perms[0] = vec![1, 2, 3, 4, 5, 6, 7, 0];
        assert_eq!(fixed_fraction(&p), 0.0);
    }

    #[test]
    fn compose_and_inverse() {
        let spec = NetSpec::mlp(3, &[5, 4], 2);
        let seeds = SeedPlan::new(1);
        let p = PermSet::random(&spec, &seeds, 0);
        let q = PermSet::random(&spec, &seeds, 1);
        let params = ParamSet::<f64>::init(&spec, &seeds).unwrap();
        let two_step = permute(&permute(&params, &p).unwrap(), &q).unwrap();
        assert_eq!(two_step, permute(&params, &p.compose(&q)).unwrap());
        assert_eq!(p.compose(&p.inverse()), PermSet::identity(&spec));
    }

    #[test]
    fn invalid_permutation_rejected() {
        let spec = NetSpec::mlp(2, &[3], 2);
        let params = ParamSet::<f64>::zeros(&spec);
        let bad = PermSet {
            perms: vec![vec![0, 0, 1]],
        };
        assert!(permute(&params, &bad).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let spec = NetSpec::mlp(2, &[3, 2], 2);
        let p = PermSet::random(&spec, &SeedPlan::new(3), 0);
        assert_eq!(PermSet::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn constant_units_do_not_break_activation_match() {
        let xa = array![[1.0, 0.0, 2.0], [1.0, 1.0, 3.0], [1.0, 0.5, 1.0]];
        let xb = array![[0.0, 5.0, 2.0], [0.0, 5.0, 3.0], [0.0, 5.0, 1.0]];
        let c = cross_correlation(&xa, &xb).unwrap();
        assert_eq!(c.row(0).to_vec(), vec![0.0, 0.0, 0.0]);
        let trace = |x: Array2<f64>| ActivationTrace {
            hidden: vec![x],
            logits: Array2::zeros((3, 1)),
        };
        let p1 = activation_match(&trace(xa.clone()), &trace(xb.clone())).unwrap();
        let p2 = activation_match(&trace(xa), &trace(xb)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.perms[0][2], 2);
    }
}
