//! Subcarrier partitioning: the first step of the two-step method.

use thiserror::Error;

use crate::channel::BetaMatrix;
use crate::utility::UtilityModel;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("need at least one user and one subcarrier")]
    Empty,
    #[error("subcarrier {sub} assigned to user {owner}, but only {n_users} users exist")]
    OwnerOutOfRange {
        sub: usize,
        owner: usize,
        n_users: usize,
    },
    #[error("owner and per-user sets disagree at subcarrier {0}")]
    Inconsistent(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// FDMA assignment: `owner[k]` is the user of subcarrier `k`; `sets[i]` lists
/// the subcarriers of user `i` in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    owner: Vec<usize>,
    sets: Vec<Vec<usize>>,
}

impl Partition {
    pub fn from_owner(owner: Vec<usize>, n_users: usize) -> Result<Self, SchedError> {
        if n_users == 0 || owner.is_empty() {
            return Err(SchedError::Empty);
        }
        let mut sets = vec![Vec::new(); n_users];
        for (sub, &o) in owner.iter().enumerate() {
            if o >= n_users {
                return Err(SchedError::OwnerOutOfRange {
                    sub,
                    owner: o,
                    n_users,
                });
            }
            sets[o].push(sub);
        }
        Ok(Self { owner, sets })
    }

    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn n_users(&self) -> usize {
        self.sets.len()
    }

    pub fn n_subcarriers(&self) -> usize {
        self.owner.len()
    }

    /// Checks that the sets are disjoint, cover every subcarrier and agree with `owner`.
    pub fn validate(&self) -> Result<(), SchedError> {
        let mut seen = vec![false; self.owner.len()];
        for (i, set) in self.sets.iter().enumerate() {
            for &k in set {
                if k >= self.owner.len() || seen[k] || self.owner[k] != i {
                    return Err(SchedError::Inconsistent(
                        k.min(self.owner.len().saturating_sub(1)),
                    ));
                }
                seen[k] = true;
            }
        }
        match seen.iter().position(|s| !s) {
            Some(k) => Err(SchedError::Inconsistent(k)),
            None => Ok(()),
        }
    }
}

fn check_dims(beta: &BetaMatrix<'_>) -> Result<(), SchedError> {
    if beta.n_users() == 0 || beta.n_subcarriers() == 0 {
        Err(SchedError::Empty)
    } else {
        Ok(())
    }
}

fn best_user(beta: &BetaMatrix<'_>, k: usize, eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in (0..beta.n_users()).filter(|&i| eligible(i)) {
        let b = beta.get(i, k);
        if best.is_none_or(|(_, v)| b > v) {
            best = Some((i, b));
        }
    }
    best.map(|(i, _)| i)
}

/// `owner(k) = argmax_i beta_ik`, ties to the lowest user index.
pub fn assign_best_channel(beta: &BetaMatrix<'_>) -> Result<Partition, SchedError> {
    check_dims(beta)?;
    let owner = (0..beta.n_subcarriers())
        .map(|k| best_user(beta, k, |_| true).unwrap_or(0))
        .collect();
    Partition::from_owner(owner, beta.n_users())
}

#[derive(Debug, Clone, Copy)]
pub struct GreedyOptions<'a> {
    /// Gains are the best average increment over `1..=lookahead` further
    /// carriers of the same rate, which lets a user climb the convex part of a
    /// sigmoid. `1` is the plain one-step increment.
    pub lookahead: usize,
    /// Users marked `false` only receive carriers through the max-beta fallback.
    pub active: Option<&'a [bool]>,
}

impl Default for GreedyOptions<'_> {
    fn default() -> Self {
        Self {
            lookahead: 1,
            active: None,
        }
    }
}

#[derive(Default)]
struct GainCache {
    entries: Vec<(u64, f64)>,
    last: Option<(u64, f64)>,
}

impl GainCache {
    const CAP: usize = 32;

    fn clear(&mut self) {
        self.entries.clear();
        self.last = None;
    }

    #[inline]
    fn gain(&mut self, u: &UtilityModel, total: f64, base: f64, c: f64, lookahead: usize) -> f64 {
        let key = c.to_bits();
        match self.last {
            Some((k, g)) if k == key => return g,
            _ => {}
        }
        let g = self.lookup(u, total, base, c, key, lookahead);
        self.last = Some((key, g));
        g
    }

    fn lookup(
        &mut self,
        u: &UtilityModel,
        total: f64,
        base: f64,
        c: f64,
        key: u64,
        lookahead: usize,
    ) -> f64 {
        if let Some(&(_, g)) = self.entries.iter().find(|(k, _)| *k == key) {
            return g;
        }
        let mut g = f64::NEG_INFINITY;
        for m in 1..=lookahead {
            let mf = m as f64;
            g = g.max((u.value(total + mf * c) - base) / mf);
        }
        if self.entries.len() >= Self::CAP {
            self.entries.clear();
        }
        self.entries.push((key, g));
        g
    }
}

/// Greedy assignment by utility increment.
///
/// Subcarriers are visited in descending order of their best `beta`. Each goes
/// to the eligible user whose utility of accumulated rate grows the most,
/// ties to the lowest index. `rates[i * K + k]` is the rate user `i` would get
/// on carrier `k`, in the units the utilities expect. When no eligible user
/// gains, the carrier goes to the eligible user with the largest `beta`, or to
/// the overall best user when nobody is eligible.
pub fn assign_greedy(
    beta: &BetaMatrix<'_>,
    rates: &[f64],
    utilities: &[&UtilityModel],
    opts: &GreedyOptions<'_>,
) -> Result<Partition, SchedError> {
    check_dims(beta)?;
    let (n, k_total) = (beta.n_users(), beta.n_subcarriers());
    if rates.len() != n * k_total {
        return Err(SchedError::DimensionMismatch(format!(
            "rates has {} entries, expected {}",
            rates.len(),
            n * k_total
        )));
    }
    if utilities.len() != n {
        return Err(SchedError::DimensionMismatch(format!(
            "{} utilities for {n} users",
            utilities.len()
        )));
    }
    if let Some(a) = opts.active {
        if a.len() != n {
            return Err(SchedError::DimensionMismatch(format!(
                "active mask has {} entries",
                a.len()
            )));
        }
    }
    let lookahead = opts.lookahead.max(1);
    let eligible = |i: usize| opts.active.is_none_or(|a| a[i]);

    let peak: Vec<f64> = (0..k_total)
        .map(|k| {
            (0..n)
                .map(|i| beta.get(i, k))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..k_total).collect();
    order.sort_by(|&a, &b| peak[b].total_cmp(&peak[a]).then(a.cmp(&b)));

    let mut total = vec![0.0; n];
    let mut base: Vec<f64> = utilities.iter().map(|u| u.value(0.0)).collect();
    let mut caches: Vec<GainCache> = (0..n).map(|_| GainCache::default()).collect();
    let mut owner = vec![0usize; k_total];
    let users: Vec<usize> = (0..n).filter(|&i| eligible(i)).collect();
    let any_eligible = !users.is_empty();
    // Carrier-major copy of the eligible users' rates.
    let mut by_carrier = vec![0.0; users.len() * k_total];
    for (j, &i) in users.iter().enumerate() {
        for (k, &r) in rates[i * k_total..(i + 1) * k_total].iter().enumerate() {
            by_carrier[k * users.len() + j] = r;
        }
    }

    for &k in &order {
        let mut best: Option<(usize, f64)> = None;
        let row = &by_carrier[k * users.len()..(k + 1) * users.len()];
        for (&i, &c) in users.iter().zip(row) {
            let g = caches[i].gain(utilities[i], total[i], base[i], c, lookahead);
            if best.is_none_or(|(_, v)| g > v) {
                best = Some((i, g));
            }
        }
        let winner = match best {
            Some((i, g)) if g > 0.0 => i,
            _ if any_eligible => best_user(beta, k, eligible).unwrap_or(0),
            _ => best_user(beta, k, |_| true).unwrap_or(0),
        };
        owner[k] = winner;
        total[winner] += rates[winner * k_total + k];
        base[winner] = utilities[winner].value(total[winner]);
        caches[winner].clear();
    }
    Partition::from_owner(owner, n)
}

/// Greedy assignment with rates from an equal power split,
/// `ln(1 + beta_ik budget / K)` nats, and a one-step increment.
pub fn assign_utility_aware(
    beta: &BetaMatrix<'_>,
    utilities: &[&UtilityModel],
    budget: f64,
) -> Result<Partition, SchedError> {
    check_dims(beta)?;
    let (n, k_total) = (beta.n_users(), beta.n_subcarriers());
    let share = budget / k_total as f64;
    let rates: Vec<f64> = (0..n)
        .flat_map(|i| (0..k_total).map(move |k| (i, k)))
        .map(|(i, k)| (beta.get(i, k) * share).ln_1p())
        .collect();
    assign_greedy(beta, &rates, utilities, &GreedyOptions::default())
}
