//! The routing decision process: one vehicle builds a giant tour node by node.
//!
//! A customer is selectable only when it is still unserved and its whole demand
//! fits in the remaining load; demands are never split. The depot is selectable
//! whenever the vehicle is away from it, and is masked while the vehicle sits at
//! the depot with work remaining so the policy cannot loop in place.

use crate::error::{CoreError, Result};
use crate::instance::Instance;
use crate::solution::{route_length, validate_solution, Route};

/// Dynamic state of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState<'a> {
    instance: &'a Instance,
    remaining_demands: Vec<u32>,
    remaining_load: u32,
    current_node: usize,
    actions: Vec<usize>,
    step_count: usize,
}

impl<'a> EnvState<'a> {
    /// Start of an episode: vehicle full, at the depot, nothing served.
    pub fn reset(instance: &'a Instance) -> Self {
        Self {
            instance,
            remaining_demands: instance.demands().to_vec(),
            remaining_load: instance.capacity(),
            current_node: 0,
            actions: Vec::with_capacity(2 * instance.num_customers() + 2),
            step_count: 0,
        }
    }

    pub fn instance(&self) -> &'a Instance {
        self.instance
    }

    pub fn remaining_demands(&self) -> &[u32] {
        &self.remaining_demands
    }

    pub fn remaining_load(&self) -> u32 {
        self.remaining_load
    }

    pub fn current_node(&self) -> usize {
        self.current_node
    }

    /// Actions taken so far (the partial sequence without the leading depot).
    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Upper bound on episode length: every customer visit can be followed by a refill.
    pub fn step_cap(&self) -> usize {
        2 * self.instance.num_customers() + 2
    }

    fn all_served(&self) -> bool {
        self.remaining_demands.iter().all(|&d| d == 0)
    }

    pub fn is_terminal(&self) -> bool {
        self.current_node == 0 && self.all_served()
    }

    /// Which nodes may be chosen next.
    pub fn feasible_mask(&self) -> Result<Vec<bool>> {
        if self.is_terminal() {
            return Err(CoreError::TerminalState);
        }
        let mut mask: Vec<bool> = self
            .remaining_demands
            .iter()
            .map(|&d| d > 0 && d <= self.remaining_load)
            .collect();
        mask[0] = self.current_node != 0 || self.all_served();
        Ok(mask)
    }

    /// Applies `action` and returns the successor with its terminal flag.
    pub fn step(&self, action: usize) -> Result<(EnvState<'a>, bool)> {
        let mut next = self.clone();
        let done = next.step_in_place(action)?;
        Ok((next, done))
    }

    /// In-place variant of [`EnvState::step`].
    pub fn step_in_place(&mut self, action: usize) -> Result<bool> {
        let mask = self.feasible_mask()?;
        if !mask.get(action).copied().unwrap_or(false) {
            return Err(CoreError::IllegalAction { action });
        }
        if self.step_count >= self.step_cap() {
            return Err(CoreError::Internal(format!(
                "episode exceeded {} steps; the feasibility mask admitted a cycle",
                self.step_cap()
            )));
        }
        if action == 0 {
            self.remaining_load = self.instance.capacity();
        } else {
            self.remaining_load -= self.remaining_demands[action];
            self.remaining_demands[action] = 0;
        }
        self.current_node = action;
        self.actions.push(action);
        self.step_count += 1;
        Ok(self.is_terminal())
    }

    /// The route built so far, closed at the depot only if the episode is terminal.
    pub fn route(&self) -> Result<Route> {
        if !self.is_terminal() {
            return Err(CoreError::IncompleteEpisode);
        }
        let seq = std::iter::once(0).chain(self.actions.iter().copied()).collect();
        Route::new(seq)
    }
}

/// Replays an action list from the reset state.
pub fn replay<'a>(instance: &'a Instance, actions: &[usize]) -> Result<EnvState<'a>> {
    let mut state = EnvState::reset(instance);
    for &a in actions {
        state.step_in_place(a)?;
    }
    Ok(state)
}

/// Negative route length of a finished, feasible episode.
pub fn episode_reward(instance: &Instance, route: &Route) -> Result<f64> {
    let report = validate_solution(instance, route);
    if !report.feasible {
        return Err(CoreError::IncompleteEpisode);
    }
    Ok(-route_length(instance, route)?)
}
