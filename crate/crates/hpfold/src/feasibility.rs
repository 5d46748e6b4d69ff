//! Exact search utilities: the DFS completability check behind the action
//! mask, and an exhaustive enumeration oracle that certifies optimal
//! energies for short sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    contact_energy, Action, ConformationRecord, EnvState, Sequence, Vec3, ALL_ACTIONS,
    AXIS_DIRECTIONS,
};

/// Longest sequence `enumerate_optimal` accepts by default. SAW counts
/// grow roughly as 4.68^n, so exhaustive certification is a short-chain
/// tool.
pub const DEFAULT_ENUMERATION_LIMIT: usize = 14;

#[derive(Debug, Error)]
pub enum FeasibilityError {
    #[error("sequence length {len} exceeds the enumeration limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },
}

/// Node budget for the completability DFS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchBudget {
    max_nodes: Option<u64>,
}

impl SearchBudget {
    pub fn unlimited() -> Self {
        SearchBudget { max_nodes: None }
    }

    pub fn limited(max_nodes: u64) -> Self {
        SearchBudget {
            max_nodes: Some(max_nodes),
        }
    }

    pub fn max_nodes(&self) -> Option<u64> {
        self.max_nodes
    }
}

/// Outcome of a completability search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completability {
    Completable,
    NotCompletable,
    /// Only possible with a finite budget.
    BudgetExceeded,
}

/// Reusable flood-fill scratch. Visited marks use a generation counter so
/// repeated fills never have to clear the buffer.
pub(crate) struct FloodScratch {
    stamp: Vec<u32>,
    generation: u32,
    stack: Vec<Vec3>,
}

impl FloodScratch {
    pub(crate) fn new(cells: usize) -> Self {
        FloodScratch {
            stamp: vec![0; cells],
            generation: 0,
            stack: Vec::new(),
        }
    }

    fn for_state(state: &EnvState) -> Self {
        Self::new(state.grid.cell_count())
    }
}

/// Flood scratch sized for a state's bounding box.
pub(crate) fn flood_scratch_for(state: &EnvState) -> FloodScratch {
    FloodScratch::for_state(state)
}

impl FloodScratch {

    fn next_generation(&mut self) -> u32 {
        if self.generation == u32::MAX {
            self.stamp.fill(0);
            self.generation = 0;
        }
        self.generation += 1;
        self.generation
    }
}

/// Count free cells of the component containing `start`, split by lattice
/// parity relative to `head_parity`. Stops early once both requested
/// counts are met; returns (same, opposite, satisfied_early).
fn flood_component(
    state: &EnvState,
    scratch: &mut FloodScratch,
    generation: u32,
    start: Vec3,
    head_parity: u8,
    need_same: usize,
    need_opp: usize,
) -> (usize, usize, bool) {
    let grid = &state.grid;
    let mut same = 0usize;
    let mut opp = 0usize;
    scratch.stack.clear();
    scratch.stamp[grid.index(start)] = generation;
    scratch.stack.push(start);
    while let Some(c) = scratch.stack.pop() {
        if c.parity() == head_parity {
            same += 1;
        } else {
            opp += 1;
        }
        if same >= need_same && opp >= need_opp {
            return (same, opp, true);
        }
        for d in AXIS_DIRECTIONS {
            let n = c + d;
            if !grid.in_bounds(n) || grid.is_occupied(n) {
                continue;
            }
            let idx = grid.index(n);
            if scratch.stamp[idx] != generation {
                scratch.stamp[idx] = generation;
                scratch.stack.push(n);
            }
        }
    }
    (same, opp, false)
}

/// Can the remaining residues still fit, by free-cell counting? Checks
/// each free component adjacent to the head for enough cells of each
/// lattice parity (the walk alternates parities strictly). Never rejects
/// a completable state.
fn region_admits(state: &EnvState, scratch: &mut FloodScratch) -> bool {
    let k = state.remaining();
    if k == 0 {
        return true;
    }
    let head = state.head();
    let head_parity = head.parity();
    let need_opp = k.div_ceil(2);
    let need_same = k / 2;
    let generation = scratch.next_generation();
    for d in AXIS_DIRECTIONS {
        let n = head + d;
        if !state.grid.in_bounds(n) || state.grid.is_occupied(n) {
            continue;
        }
        if scratch.stamp[state.grid.index(n)] == generation {
            // Component already flooded from an earlier neighbor and found
            // insufficient.
            continue;
        }
        let (same, opp, early) =
            flood_component(state, scratch, generation, n, head_parity, need_same, need_opp);
        if early || (same >= need_same && opp >= need_opp) {
            return true;
        }
    }
    false
}

/// Fast negative pre-check: true means the connected free region adjacent
/// to the head holds fewer cells than the residues still to place, so the
/// state is definitely not completable. False means "unknown, search".
pub fn free_region_reject(state: &EnvState) -> bool {
    debug_assert!(!state.done());
    let k = state.remaining();
    if k == 0 {
        return false;
    }
    let head = state.head();
    let mut scratch = FloodScratch::for_state(state);
    let generation = scratch.next_generation();
    let mut total = 0usize;
    for d in AXIS_DIRECTIONS {
        let n = head + d;
        if !state.grid.in_bounds(n) || state.grid.is_occupied(n) {
            continue;
        }
        if scratch.stamp[state.grid.index(n)] == generation {
            continue;
        }
        // Parity thresholds set to "everything" turn the component count
        // into a plain cell count capped at k.
        let (same, opp, early) =
            flood_component(state, &mut scratch, generation, n, head.parity(), k, k);
        total += same + opp;
        if early || total >= k {
            return false;
        }
    }
    total < k
}

/// Exact completability: is there any sequence of in-bounds, self-avoiding,
/// symmetry-respecting moves that places all remaining residues? DFS with
/// the fixed child order Forward, Left, Right, Up, Down; returns on the
/// first completion found.
pub fn can_complete(state: &EnvState, budget: SearchBudget) -> Completability {
    debug_assert!(!state.done());
    let mut scratch_state = state.clone();
    let mut flood = FloodScratch::for_state(state);
    let mut nodes = 0u64;
    dfs_complete(&mut scratch_state, &mut flood, &mut nodes, budget.max_nodes)
}

/// Same search, reusing the caller's mutable state and flood scratch.
/// The state is restored before returning.
pub(crate) fn can_complete_scratch(
    state: &mut EnvState,
    flood: &mut FloodScratch,
    budget: SearchBudget,
) -> Completability {
    let mut nodes = 0u64;
    dfs_complete(state, flood, &mut nodes, budget.max_nodes)
}

fn dfs_complete(
    state: &mut EnvState,
    flood: &mut FloodScratch,
    nodes: &mut u64,
    max_nodes: Option<u64>,
) -> Completability {
    if state.remaining() == 0 {
        return Completability::Completable;
    }
    if !region_admits(state, flood) {
        return Completability::NotCompletable;
    }
    for action in ALL_ACTIONS {
        if !state.base_valid(action) {
            continue;
        }
        *nodes += 1;
        if let Some(max) = max_nodes {
            if *nodes > max {
                return Completability::BudgetExceeded;
            }
        }
        let frame = state.frame();
        let deviated = state.deviated();
        let vertical = state.deviated_vertically();
        state.place(action);
        let result = dfs_complete(state, flood, nodes, max_nodes);
        state.unplace(frame, deviated, vertical);
        match result {
            Completability::NotCompletable => {}
            done => return done,
        }
    }
    Completability::NotCompletable
}

/// Proof object for an exhaustively certified optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimumCertificate {
    pub sequence: Sequence,
    pub optimal_energy: i32,
    /// Action trace reaching the optimum (lexicographically smallest).
    pub witness: Vec<Action>,
    pub states_explored: u64,
}

impl OptimumCertificate {
    /// Replay the witness into coordinates and serialize together with the
    /// exploration count.
    pub fn to_record(&self) -> CertificateRecord {
        let state = EnvState::from_actions(self.sequence.clone(), &self.witness)
            .expect("certificate witness must replay");
        debug_assert_eq!(
            contact_energy(state.placed(), &self.sequence),
            self.optimal_energy
        );
        CertificateRecord {
            conformation: ConformationRecord::new(
                &self.sequence,
                &self.witness,
                state.placed(),
                self.optimal_energy,
            ),
            states_explored: self.states_explored,
        }
    }
}

/// Serialized form of an [`OptimumCertificate`]: the standard conformation
/// record plus the exploration count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    #[serde(flatten)]
    pub conformation: ConformationRecord,
    pub states_explored: u64,
}

struct EnumState {
    suffix_h: Vec<i32>,
    prune: bool,
    nodes: u64,
    best_contacts: Option<i32>,
    best_witness: Vec<Action>,
    trace: Vec<Action>,
}

/// Exhaustively enumerate all symmetry-canonical complete conformations
/// and certify the optimal energy. With `prune` an admissible bound
/// (each unplaced H can gain at most 5 contacts) cuts branches that
/// cannot beat the incumbent; the result is identical either way.
pub fn enumerate_optimal(
    sequence: &Sequence,
    prune: bool,
) -> Result<OptimumCertificate, FeasibilityError> {
    enumerate_optimal_with_limit(sequence, prune, DEFAULT_ENUMERATION_LIMIT)
}

pub fn enumerate_optimal_with_limit(
    sequence: &Sequence,
    prune: bool,
    limit: usize,
) -> Result<OptimumCertificate, FeasibilityError> {
    check_limit(sequence, limit)?;
    let mut state = EnvState::reset(sequence.clone());
    let mut flood = FloodScratch::for_state(&state);
    let mut ctx = EnumState {
        suffix_h: suffix_h_counts(sequence),
        prune,
        nodes: 0,
        best_contacts: None,
        best_witness: Vec::new(),
        trace: Vec::new(),
    };
    enum_dfs(&mut state, &mut flood, &mut ctx, 0);
    let best = ctx
        .best_contacts
        .expect("every sequence admits at least one complete conformation");
    Ok(OptimumCertificate {
        sequence: sequence.clone(),
        optimal_energy: -best,
        witness: ctx.best_witness,
        states_explored: ctx.nodes,
    })
}

/// Parallel enumeration: the top-level branch set is partitioned into
/// deterministic action prefixes, partitions run independently, and the
/// results merge by minimum energy with the lexicographically smallest
/// witness breaking ties. Agrees exactly with the sequential search.
pub fn enumerate_optimal_parallel(
    sequence: &Sequence,
    prune: bool,
    limit: usize,
) -> Result<OptimumCertificate, FeasibilityError> {
    check_limit(sequence, limit)?;
    let prefix_depth = (sequence.len() - 2).min(3);
    let prefixes = enumeration_prefixes(sequence, prefix_depth);
    let prefix_nodes = prefixes.iter().map(|p| p.len() as u64).sum::<u64>();

    let results: Vec<(Option<i32>, Vec<Action>, u64)> = prefixes
        .par_iter()
        .map(|prefix| {
            let mut state = EnvState::from_actions(sequence.clone(), prefix)
                .expect("prefixes are valid by construction");
            let contacts = -contact_energy(state.placed(), sequence);
            let mut flood = FloodScratch::for_state(&state);
            let mut ctx = EnumState {
                suffix_h: suffix_h_counts(sequence),
                prune,
                nodes: 0,
                best_contacts: None,
                best_witness: Vec::new(),
                trace: prefix.clone(),
            };
            enum_dfs(&mut state, &mut flood, &mut ctx, contacts);
            (ctx.best_contacts, ctx.best_witness, ctx.nodes)
        })
        .collect();

    let mut best: Option<(i32, Vec<Action>)> = None;
    let mut nodes = prefix_nodes;
    for (contacts, witness, n) in results {
        nodes += n;
        let Some(c) = contacts else { continue };
        let better = match &best {
            None => true,
            Some((bc, bw)) => c > *bc || (c == *bc && witness_key(&witness) < witness_key(bw)),
        };
        if better {
            best = Some((c, witness));
        }
    }
    let (contacts, witness) =
        best.expect("every sequence admits at least one complete conformation");
    Ok(OptimumCertificate {
        sequence: sequence.clone(),
        optimal_energy: -contacts,
        witness,
        states_explored: nodes,
    })
}

fn witness_key(actions: &[Action]) -> Vec<u8> {
    actions.iter().map(|a| a.code()).collect()
}

fn check_limit(sequence: &Sequence, limit: usize) -> Result<(), FeasibilityError> {
    if sequence.len() > limit {
        return Err(FeasibilityError::SequenceTooLong {
            len: sequence.len(),
            limit,
        });
    }
    Ok(())
}

/// All base-valid action prefixes of exactly `depth` actions, in
/// lexicographic order. Prefixes that already dead-end are dropped by the
/// per-partition search finding nothing.
fn enumeration_prefixes(sequence: &Sequence, depth: usize) -> Vec<Vec<Action>> {
    fn expand(state: &mut EnvState, depth: usize, trace: &mut Vec<Action>, out: &mut Vec<Vec<Action>>) {
        if depth == 0 {
            out.push(trace.clone());
            return;
        }
        for action in ALL_ACTIONS {
            if !state.base_valid(action) {
                continue;
            }
            let frame = state.frame();
            let deviated = state.deviated();
            let vertical = state.deviated_vertically();
            state.place(action);
            trace.push(action);
            expand(state, depth - 1, trace, out);
            trace.pop();
            state.unplace(frame, deviated, vertical);
        }
    }
    let mut state = EnvState::reset(sequence.clone());
    let mut out = Vec::new();
    expand(&mut state, depth, &mut Vec::new(), &mut out);
    out
}

fn suffix_h_counts(sequence: &Sequence) -> Vec<i32> {
    let l = sequence.len();
    let mut suffix = vec![0i32; l + 1];
    for i in (0..l).rev() {
        suffix[i] = suffix[i + 1] + i32::from(sequence.is_h(i));
    }
    suffix
}

/// Contacts gained by placing the next residue via `action`: hydrophobic
/// neighbors of the target cell, excluding the chain predecessor.
fn contacts_gained(state: &EnvState, action: Action) -> i32 {
    let idx = state.placed().len();
    if !state.sequence().is_h(idx) {
        return 0;
    }
    let (dir, _) = state.frame().apply(action);
    let target = state.head() + dir;
    let mut gained = 0;
    for d in AXIS_DIRECTIONS {
        let n = target + d;
        if state.grid.in_bounds(n) && state.grid.get(n) == crate::env::CELL_H {
            gained += 1;
        }
    }
    if state.sequence().is_h(idx - 1) {
        gained -= 1; // the predecessor is adjacent but sequential
    }
    gained
}

fn enum_dfs(state: &mut EnvState, flood: &mut FloodScratch, ctx: &mut EnumState, contacts: i32) {
    if state.remaining() == 0 {
        if ctx.best_contacts.is_none_or(|b| contacts > b) {
            ctx.best_contacts = Some(contacts);
            ctx.best_witness = ctx.trace.clone();
        }
        return;
    }
    if ctx.prune {
        if let Some(best) = ctx.best_contacts {
            let bound = contacts + 5 * ctx.suffix_h[state.placed().len()];
            if bound <= best {
                return;
            }
        }
    }
    // Dead branches (remaining residues cannot fit) are cut in both prune
    // modes; this never removes a complete conformation.
    if !region_admits(state, flood) {
        return;
    }
    for action in ALL_ACTIONS {
        if !state.base_valid(action) {
            continue;
        }
        ctx.nodes += 1;
        let gained = contacts_gained(state, action);
        let frame = state.frame();
        let deviated = state.deviated();
        let vertical = state.deviated_vertically();
        state.place(action);
        ctx.trace.push(action);
        enum_dfs(state, flood, ctx, contacts + gained);
        ctx.trace.pop();
        state.unplace(frame, deviated, vertical);
    }
}
