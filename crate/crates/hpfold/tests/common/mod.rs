//! Shared test oracles: independent brute-force implementations used to
//! verify the environment, the mask, and the enumerator. Everything here
//! works on plain coordinate sets and deliberately avoids the crate's
//! grid, flood-fill, and search machinery.

use std::collections::{BTreeSet, HashSet};

use hpfold::env::{
    half_bound, Action, Frame, Sequence, Vec3, ALL_ACTIONS,
};

/// Contact count via a neighbor lookup set (the implementation uses an
/// all-pairs scan, so the two routes are independent).
pub fn oracle_contacts(path: &[Vec3], sequence: &Sequence) -> i32 {
    let occ: std::collections::HashMap<[i32; 3], usize> = path
        .iter()
        .enumerate()
        .map(|(i, c)| (c.to_array(), i))
        .collect();
    let mut contacts = 0;
    for (i, c) in path.iter().enumerate() {
        if !sequence.is_h(i) {
            continue;
        }
        for d in [
            [1, 0, 0],
            [-1, 0, 0],
            [0, 1, 0],
            [0, -1, 0],
            [0, 0, 1],
            [0, 0, -1],
        ] {
            let n = [c.x + d[0], c.y + d[1], c.z + d[2]];
            if let Some(&j) = occ.get(&n) {
                if j > i + 1 && sequence.is_h(j) {
                    contacts += 1;
                }
            }
        }
    }
    -contacts
}

/// Minimal standalone walker state for the brute-force oracles.
#[derive(Clone)]
pub struct OracleState {
    pub occupied: HashSet<[i32; 3]>,
    pub head: Vec3,
    pub frame: Frame,
    pub deviated: bool,
    pub vertical: bool,
    pub remaining: usize,
    pub half: i32,
}

impl OracleState {
    pub fn from_trace(len: usize, trace: &[Action]) -> OracleState {
        let mut state = OracleState {
            occupied: HashSet::from([[0, 0, 0], [1, 0, 0]]),
            head: Vec3::new(1, 0, 0),
            frame: Frame::initial(),
            deviated: false,
            vertical: false,
            remaining: len - 2,
            half: half_bound(len),
        };
        for &a in trace {
            assert!(state.apply(a), "oracle trace must be valid");
        }
        state
    }

    fn symmetry_allows(&self, action: Action) -> bool {
        if !self.deviated {
            matches!(action, Action::Forward | Action::Right)
        } else if !self.vertical {
            action != Action::Down
        } else {
            true
        }
    }

    pub fn valid(&self, action: Action) -> Option<Vec3> {
        if !self.symmetry_allows(action) {
            return None;
        }
        let (dir, _) = self.frame.apply(action);
        let target = self.head + dir;
        let inside = target.x.abs() <= self.half
            && target.y.abs() <= self.half
            && target.z.abs() <= self.half;
        (inside && !self.occupied.contains(&target.to_array())).then_some(target)
    }

    pub fn apply(&mut self, action: Action) -> bool {
        let Some(target) = self.valid(action) else {
            return false;
        };
        let (_, frame) = self.frame.apply(action);
        self.occupied.insert(target.to_array());
        self.head = target;
        self.frame = frame;
        self.deviated |= action != Action::Forward;
        self.vertical |= action.is_vertical();
        self.remaining -= 1;
        true
    }

    fn undo(&mut self, previous: &OracleSnapshot) {
        self.occupied.remove(&self.head.to_array());
        self.head = previous.head;
        self.frame = previous.frame;
        self.deviated = previous.deviated;
        self.vertical = previous.vertical;
        self.remaining += 1;
    }

    fn snapshot(&self) -> OracleSnapshot {
        OracleSnapshot {
            head: self.head,
            frame: self.frame,
            deviated: self.deviated,
            vertical: self.vertical,
        }
    }
}

pub struct OracleSnapshot {
    head: Vec3,
    frame: Frame,
    deviated: bool,
    vertical: bool,
}

/// Plain exhaustive completability: does any valid extension place all
/// remaining residues? No pruning, no budgets.
pub fn oracle_can_complete(state: &mut OracleState) -> bool {
    if state.remaining == 0 {
        return true;
    }
    for action in ALL_ACTIONS {
        if state.valid(action).is_none() {
            continue;
        }
        let snap = state.snapshot();
        state.apply(action);
        let ok = oracle_can_complete(state);
        state.undo(&snap);
        if ok {
            return true;
        }
    }
    false
}

/// Brute-force mask: action passes the base rules and leads to a state
/// from which the chain can still be completed.
pub fn oracle_mask(state: &mut OracleState) -> [bool; 5] {
    let mut mask = [false; 5];
    for (i, action) in ALL_ACTIONS.into_iter().enumerate() {
        if state.valid(action).is_none() {
            continue;
        }
        let snap = state.snapshot();
        state.apply(action);
        mask[i] = oracle_can_complete(state);
        state.undo(&snap);
    }
    mask
}

/// The 48 orthogonal lattice symmetries: signed axis permutations.
pub fn lattice_symmetries() -> Vec<[[i32; 3]; 3]> {
    let mut out = Vec::with_capacity(48);
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for perm in perms {
        for signs in 0..8 {
            let mut m = [[0i32; 3]; 3];
            for (row, &axis) in perm.iter().enumerate() {
                let sign = if (signs >> row) & 1 == 1 { -1 } else { 1 };
                m[row][axis] = sign;
            }
            out.push(m);
        }
    }
    assert_eq!(out.len(), 48);
    out
}

pub fn transform(m: &[[i32; 3]; 3], c: Vec3) -> Vec3 {
    Vec3::new(
        m[0][0] * c.x + m[0][1] * c.y + m[0][2] * c.z,
        m[1][0] * c.x + m[1][1] * c.y + m[1][2] * c.z,
        m[2][0] * c.x + m[2][1] * c.y + m[2][2] * c.z,
    )
}

pub fn transform_path(m: &[[i32; 3]; 3], path: &[Vec3]) -> Vec<Vec3> {
    path.iter().map(|&c| transform(m, c)).collect()
}

pub fn path_key(path: &[Vec3]) -> Vec<[i32; 3]> {
    path.iter().map(|c| c.to_array()).collect()
}

/// All self-avoiding walks with `vertices` vertices starting at the
/// origin, first step unconstrained.
pub fn enumerate_free_saws(vertices: usize) -> Vec<Vec<Vec3>> {
    fn extend(path: &mut Vec<Vec3>, seen: &mut BTreeSet<[i32; 3]>, left: usize, out: &mut Vec<Vec<Vec3>>) {
        if left == 0 {
            out.push(path.clone());
            return;
        }
        let head = *path.last().unwrap();
        for d in hpfold::env::AXIS_DIRECTIONS {
            let n = head + d;
            if seen.insert(n.to_array()) {
                path.push(n);
                extend(path, seen, left - 1, out);
                path.pop();
                seen.remove(&n.to_array());
            }
        }
    }
    let mut out = Vec::new();
    let origin = Vec3::new(0, 0, 0);
    let mut path = vec![origin];
    let mut seen = BTreeSet::from([origin.to_array()]);
    extend(&mut path, &mut seen, vertices - 1, &mut out);
    out
}
