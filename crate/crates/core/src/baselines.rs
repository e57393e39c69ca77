//! Classical reference solvers used for gaps and as test oracles.

use rand::Rng;

use crate::env::EnvState;
use crate::error::{CoreError, Result};
use crate::instance::Instance;
use crate::solution::{route_length, Route};

/// Largest customer count accepted by [`exact_small`].
pub const EXACT_MAX_CUSTOMERS: usize = 10;

/// Greedy construction: go to the nearest unserved customer that fits, else refill.
///
/// Distance ties go to the lowest node index.
pub fn nearest_neighbor(instance: &Instance) -> Route {
    let mut state = EnvState::reset(instance);
    loop {
        let mask = state.feasible_mask().expect("non-terminal state has a mask");
        let here = state.current_node();
        let next = (1..mask.len())
            .filter(|&i| mask[i])
            .map(|i| (i, instance.distance(here, i)))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            })
            .map_or(0, |(i, _)| i);
        if state.step_in_place(next).expect("mask-admitted action") {
            return state.route().expect("terminal state has a route");
        }
    }
}

/// Uniformly random feasible rollout.
pub fn random_policy<R: Rng + ?Sized>(instance: &Instance, rng: &mut R) -> Route {
    let mut state = EnvState::reset(instance);
    let mut allowed = Vec::with_capacity(instance.num_nodes());
    loop {
        let mask = state.feasible_mask().expect("non-terminal state has a mask");
        allowed.clear();
        allowed.extend((0..mask.len()).filter(|&i| mask[i]));
        let a = allowed[rng.gen_range(0..allowed.len())];
        if state.step_in_place(a).expect("mask-admitted action") {
            return state.route().expect("terminal state has a route");
        }
    }
}

/// Provably optimal solution for instances with at most [`EXACT_MAX_CUSTOMERS`] customers.
///
/// Two dynamic programs over customer subsets: Held–Karp gives the cheapest single
/// trip serving each capacity-feasible subset, then a set-partitioning recursion
/// picks the cheapest split of all customers into such trips.
pub fn exact_small(instance: &Instance) -> Result<(Route, f64)> {
    let m = instance.num_customers();
    if m > EXACT_MAX_CUSTOMERS {
        return Err(CoreError::TooLarge { customers: m, max: EXACT_MAX_CUSTOMERS });
    }
    let full = (1usize << m) - 1;
    let demand = |set: usize| -> u64 {
        (0..m)
            .filter(|b| set >> b & 1 == 1)
            .map(|b| instance.demands()[b + 1] as u64)
            .sum()
    };
    let cap = instance.capacity() as u64;

    // path[set][last]: shortest depot -> ... -> last covering exactly `set`.
    let mut path = vec![f64::INFINITY; (full + 1) * m];
    let mut path_pred = vec![usize::MAX; (full + 1) * m];
    for b in 0..m {
        path[(1 << b) * m + b] = instance.distance(0, b + 1);
    }
    let mut load = vec![0u64; full + 1];
    for set in 1..=full {
        load[set] = demand(set);
        if load[set] > cap {
            continue;
        }
        for last in 0..m {
            let cur = path[set * m + last];
            if set >> last & 1 == 0 || !cur.is_finite() {
                continue;
            }
            for next in 0..m {
                if set >> next & 1 == 1 {
                    continue;
                }
                let nset = set | 1 << next;
                let cand = cur + instance.distance(last + 1, next + 1);
                if cand < path[nset * m + next] {
                    path[nset * m + next] = cand;
                    path_pred[nset * m + next] = last;
                }
            }
        }
    }

    // trip[set]: cheapest closed trip serving `set`, with its final customer.
    let mut trip = vec![(f64::INFINITY, usize::MAX); full + 1];
    for set in 1..=full {
        if load[set] > cap {
            continue;
        }
        for last in 0..m {
            let p = path[set * m + last];
            if p.is_finite() {
                let c = p + instance.distance(last + 1, 0);
                if c < trip[set].0 {
                    trip[set] = (c, last);
                }
            }
        }
    }

    // best[set]: cheapest partition of `set` into trips; the trip containing the
    // lowest customer of `set` is enumerated to avoid counting orderings twice.
    let mut best = vec![f64::INFINITY; full + 1];
    let mut choice = vec![0usize; full + 1];
    best[0] = 0.0;
    for set in 1..=full {
        let low = set & set.wrapping_neg();
        let rest = set ^ low;
        let mut sub = rest;
        loop {
            let t = sub | low;
            if trip[t].0.is_finite() {
                let c = trip[t].0 + best[set ^ t];
                if c < best[set] {
                    best[set] = c;
                    choice[set] = t;
                }
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    if !best[full].is_finite() {
        return Err(CoreError::Internal("no feasible partition found".into()));
    }

    let mut seq = vec![0];
    let mut remaining = full;
    while remaining != 0 {
        let t = choice[remaining];
        let mut order = Vec::new();
        let (mut set, mut last) = (t, trip[t].1);
        while set != 0 {
            order.push(last + 1);
            let prev = path_pred[set * m + last];
            set ^= 1 << last;
            last = prev;
        }
        order.reverse();
        seq.extend(order);
        seq.push(0);
        remaining ^= t;
    }
    let route = Route::new(seq)?;
    let length = route_length(instance, &route)?;
    Ok((route, length))
}
