//! CVRP instances: a depot, customers with integer demands and a vehicle capacity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Largest demand produced by [`generate_instance`].
pub const MAX_GENERATED_DEMAND: u32 = 9;

/// A capacitated vehicle routing instance.
///
/// Node 0 is the depot; nodes `1..=m` are customers. Coordinates live in the
/// unit square for generated instances, but any finite coordinates are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance", into = "RawInstance")]
pub struct Instance {
    coords: Vec<[f64; 2]>,
    demands: Vec<u32>,
    capacity: u32,
}

#[derive(Serialize, Deserialize)]
struct RawInstance {
    coords: Vec<[f64; 2]>,
    demands: Vec<u32>,
    capacity: u32,
}

impl TryFrom<RawInstance> for Instance {
    type Error = CoreError;

    fn try_from(raw: RawInstance) -> Result<Self> {
        Instance::new(raw.coords, raw.demands, raw.capacity)
    }
}

impl From<Instance> for RawInstance {
    fn from(inst: Instance) -> Self {
        RawInstance {
            coords: inst.coords,
            demands: inst.demands,
            capacity: inst.capacity,
        }
    }
}

impl Instance {
    pub fn new(coords: Vec<[f64; 2]>, demands: Vec<u32>, capacity: u32) -> Result<Self> {
        if coords.len() != demands.len() {
            return Err(CoreError::InvalidInstance(format!(
                "{} coordinates but {} demands",
                coords.len(),
                demands.len()
            )));
        }
        if coords.len() < 2 {
            return Err(CoreError::InvalidInstance(
                "an instance needs a depot and at least one customer".into(),
            ));
        }
        if capacity == 0 {
            return Err(CoreError::InvalidInstance("capacity must be positive".into()));
        }
        if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(CoreError::InvalidInstance(format!("node {i} has a non-finite coordinate")));
        }
        if demands[0] != 0 {
            return Err(CoreError::InvalidInstance(format!(
                "depot demand must be 0, got {}",
                demands[0]
            )));
        }
        for (i, &d) in demands.iter().enumerate().skip(1) {
            if d == 0 {
                return Err(CoreError::InvalidInstance(format!("customer {i} has demand 0")));
            }
            if d > capacity {
                return Err(CoreError::InvalidInstance(format!(
                    "customer {i} demand {d} exceeds capacity {capacity}"
                )));
            }
        }
        Ok(Self { coords, demands, capacity })
    }

    /// Number of customers `m`.
    pub fn num_customers(&self) -> usize {
        self.coords.len() - 1
    }

    /// Number of nodes `m + 1`, depot included.
    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn demands(&self) -> &[u32] {
        &self.demands
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    /// Euclidean distance between two nodes. Panics on out-of-range indices.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    /// Returns a copy with customers reordered: new customer `k` is old customer `perm[k-1]`.
    ///
    /// `perm` must be a permutation of `1..=m`; the depot stays at index 0.
    pub fn permute_customers(&self, perm: &[usize]) -> Result<Self> {
        let m = self.num_customers();
        let mut seen = vec![false; m + 1];
        if perm.len() != m || perm.iter().any(|&p| p == 0 || p > m || std::mem::replace(&mut seen[p], true)) {
            return Err(CoreError::Domain("not a permutation of the customers".into()));
        }
        let mut coords = vec![self.coords[0]];
        let mut demands = vec![0];
        for &p in perm {
            coords.push(self.coords[p]);
            demands.push(self.demands[p]);
        }
        Self::new(coords, demands, self.capacity)
    }
}

/// Samples an instance with `m` customers uniformly in the unit square and demands
/// uniform on `1..=9`.
pub fn generate_instance<R: Rng + ?Sized>(m: usize, capacity: u32, rng: &mut R) -> Result<Instance> {
    if m == 0 {
        return Err(CoreError::Config("customer count must be at least 1".into()));
    }
    if capacity < MAX_GENERATED_DEMAND {
        return Err(CoreError::Config(format!(
            "capacity {capacity} is below the largest generated demand {MAX_GENERATED_DEMAND}"
        )));
    }
    let coords = (0..=m).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
    let demands = std::iter::once(0)
        .chain((0..m).map(|_| rng.gen_range(1..=MAX_GENERATED_DEMAND)))
        .collect();
    Instance::new(coords, demands, capacity)
}

/// Generates `count` instances from a single stream.
pub fn generate_instances<R: Rng + ?Sized>(
    count: usize,
    m: usize,
    capacity: u32,
    rng: &mut R,
) -> Result<Vec<Instance>> {
    (0..count).map(|_| generate_instance(m, capacity, rng)).collect()
}
