//! 3D cubic-lattice HP folding environment.
//!
//! A fold is grown as a self-avoiding walk: residues are placed one at a
//! time on integer lattice coordinates, each one lattice unit from its
//! predecessor. The first two residues form a fixed stem at (0,0,0) and
//! (1,0,0); every later placement is steered by one of five relative
//! actions interpreted in the walker's current orientation frame. The
//! environment masks actions that would overlap the chain, leave the
//! bounding box, break the symmetry canonicalization rules, or (depending
//! on the feasibility mode) make the remaining chain impossible to place.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::feasibility::{self, Completability, SearchBudget};

/// Number of observation fields per residue: x, y, z, type, index.
pub const OBS_FIELDS: usize = 5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("sequence must contain at least 3 residues, got {0}")]
    SequenceTooShort(usize),
    #[error("invalid residue character {found:?} at position {pos} (expected 'H' or 'P')")]
    BadResidue { pos: usize, found: char },
    #[error("cannot step a finished episode")]
    EpisodeFinished,
    #[error("coordinate path is not a connected self-avoiding lattice walk")]
    BadPath,
}

/// Residue kind in the HP alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Residue {
    H,
    P,
}

impl Residue {
    pub fn is_hydrophobic(self) -> bool {
        matches!(self, Residue::H)
    }

    /// Numeric encoding used by the observation: H = 1, P = 0.
    pub fn code(self) -> u8 {
        match self {
            Residue::H => 1,
            Residue::P => 0,
        }
    }
}

/// An HP sequence of length >= 3.
///
/// Two residues are pre-placed on reset, so anything shorter leaves no
/// action to take.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Sequence {
    residues: Vec<Residue>,
}

impl Sequence {
    pub fn new(residues: Vec<Residue>) -> Result<Self, EnvError> {
        if residues.len() < 3 {
            return Err(EnvError::SequenceTooShort(residues.len()));
        }
        Ok(Self { residues })
    }

    pub fn parse(s: &str) -> Result<Self, EnvError> {
        let mut residues = Vec::with_capacity(s.len());
        for (pos, ch) in s.chars().enumerate() {
            match ch {
                'H' | 'h' => residues.push(Residue::H),
                'P' | 'p' => residues.push(Residue::P),
                found => return Err(EnvError::BadResidue { pos, found }),
            }
        }
        Self::new(residues)
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees len >= 3
    }

    pub fn residue(&self, i: usize) -> Residue {
        self.residues[i]
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }

    pub fn is_h(&self, i: usize) -> bool {
        self.residues[i].is_hydrophobic()
    }

    /// Count of hydrophobic residues.
    pub fn h_count(&self) -> usize {
        self.residues.iter().filter(|r| r.is_hydrophobic()).count()
    }
}

impl FromStr for Sequence {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl TryFrom<String> for Sequence {
    type Error = EnvError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<Sequence> for String {
    fn from(s: Sequence) -> String {
        s.to_string()
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.residues {
            f.write_str(match r {
                Residue::H => "H",
                Residue::P => "P",
            })?;
        }
        Ok(())
    }
}

/// Integer lattice point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Vec3 {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn dot(self, o: Vec3) -> i32 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// True for the six axis-aligned unit vectors.
    pub fn is_unit_axis(self) -> bool {
        self.x.abs() + self.y.abs() + self.z.abs() == 1
    }

    /// Lattice parity (checkerboard color) of the point.
    pub fn parity(self) -> u8 {
        ((self.x + self.y + self.z).rem_euclid(2)) as u8
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[i32; 3]> for Vec3 {
    fn from(a: [i32; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

/// The six axis directions, used by neighborhood scans.
pub const AXIS_DIRECTIONS: [Vec3; 6] = [
    Vec3::new(1, 0, 0),
    Vec3::new(-1, 0, 0),
    Vec3::new(0, 1, 0),
    Vec3::new(0, -1, 0),
    Vec3::new(0, 0, 1),
    Vec3::new(0, 0, -1),
];

/// Relative placement action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Forward = 0,
    Left = 1,
    Right = 2,
    Up = 3,
    Down = 4,
}

/// Number of actions.
pub const ACTION_COUNT: usize = 5;

/// All actions in canonical code order.
pub const ALL_ACTIONS: [Action; ACTION_COUNT] = [
    Action::Forward,
    Action::Left,
    Action::Right,
    Action::Up,
    Action::Down,
];

impl Action {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Action, String> {
        ALL_ACTIONS
            .get(code as usize)
            .copied()
            .ok_or_else(|| format!("invalid action code {code} (expected 0..=4)"))
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Action::Up | Action::Down)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Forward => "F",
            Action::Left => "L",
            Action::Right => "R",
            Action::Up => "U",
            Action::Down => "D",
        })
    }
}

/// Orientation frame of the walker: the direction it is heading and which
/// way is "up". `right` is derived as `forward x up`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub forward: Vec3,
    pub up: Vec3,
}

impl Frame {
    /// Frame after the fixed two-residue stem: heading +x, up +z.
    pub fn initial() -> Frame {
        Frame {
            forward: Vec3::new(1, 0, 0),
            up: Vec3::new(0, 0, 1),
        }
    }

    pub fn right(&self) -> Vec3 {
        self.forward.cross(self.up)
    }

    pub fn is_valid(&self) -> bool {
        self.forward.is_unit_axis() && self.up.is_unit_axis() && self.forward.dot(self.up) == 0
    }

    /// Resolve an action to an absolute step direction and the frame the
    /// walker carries afterwards. Planar turns keep `up` unchanged;
    /// vertical moves roll the frame so the old heading becomes the new
    /// vertical reference.
    pub fn apply(&self, action: Action) -> (Vec3, Frame) {
        debug_assert!(self.is_valid());
        let r = self.right();
        match action {
            Action::Forward => (self.forward, *self),
            Action::Right => (
                r,
                Frame {
                    forward: r,
                    up: self.up,
                },
            ),
            Action::Left => (
                -r,
                Frame {
                    forward: -r,
                    up: self.up,
                },
            ),
            Action::Up => (
                self.up,
                Frame {
                    forward: self.up,
                    up: -self.forward,
                },
            ),
            Action::Down => (
                -self.up,
                Frame {
                    forward: -self.up,
                    up: self.forward,
                },
            ),
        }
    }

    /// Inverse of `apply` on the direction component: which action moves
    /// the walker in absolute direction `dir`? `None` for the reverse
    /// direction (stepping back onto the predecessor).
    pub fn action_for(&self, dir: Vec3) -> Option<Action> {
        let r = self.right();
        if dir == self.forward {
            Some(Action::Forward)
        } else if dir == r {
            Some(Action::Right)
        } else if dir == -r {
            Some(Action::Left)
        } else if dir == self.up {
            Some(Action::Up)
        } else if dir == -self.up {
            Some(Action::Down)
        } else {
            None
        }
    }
}

/// Alias for `Frame::apply`, the standalone form.
pub fn apply_frame(frame: Frame, action: Action) -> (Vec3, Frame) {
    frame.apply(action)
}

/// Per-action validity flags (true = permitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask(pub [bool; ACTION_COUNT]);

impl ActionMask {
    pub fn none() -> Self {
        ActionMask([false; ACTION_COUNT])
    }

    pub fn allows(&self, action: Action) -> bool {
        self.0[action.code() as usize]
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn allowed_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn allowed(&self) -> impl Iterator<Item = Action> + '_ {
        ALL_ACTIONS.into_iter().filter(|a| self.allows(*a))
    }
}

/// Flat observation of the (partial) conformation: per residue
/// (x, y, z, type, index) with sentinel coordinates for unplaced residues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    values: Vec<f32>,
}

impl Observation {
    /// Number of residues described by this observation.
    pub fn residue_count(&self) -> usize {
        self.values.len() / OBS_FIELDS
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn from_values(values: Vec<f32>) -> Self {
        Self { values }
    }

    /// The (x, y, z, type, index) tuple for residue `i`.
    pub fn residue_fields(&self, i: usize) -> &[f32] {
        &self.values[i * OBS_FIELDS..(i + 1) * OBS_FIELDS]
    }
}

/// How thoroughly the action mask looks ahead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeasibilityMode {
    /// Mask moves from which the remaining residues cannot all be placed
    /// (exact DFS check). Default.
    Full,
    /// Mask only moves that leave no legal move at the very next step.
    Local,
    /// Geometry and symmetry checks only.
    Off,
}

impl FromStr for FeasibilityMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(FeasibilityMode::Full),
            "local" => Ok(FeasibilityMode::Local),
            "off" => Ok(FeasibilityMode::Off),
            other => Err(format!(
                "unknown feasibility mode {other:?} (expected full, local or off)"
            )),
        }
    }
}

impl fmt::Display for FeasibilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeasibilityMode::Full => "full",
            FeasibilityMode::Local => "local",
            FeasibilityMode::Off => "off",
        })
    }
}

/// Occupancy grid over the bounding box. Cells store the residue kind so
/// contact counting can read neighbors directly.
#[derive(Debug, Clone)]
pub(crate) struct Grid {
    cells: Vec<u8>,
    half: i32,
    side: i32,
}

pub(crate) const CELL_EMPTY: u8 = 0;
pub(crate) const CELL_H: u8 = 1;
pub(crate) const CELL_P: u8 = 2;

impl Grid {
    pub(crate) fn new(len: usize) -> Self {
        let half = half_bound(len);
        let side = 2 * half + 1;
        Grid {
            cells: vec![CELL_EMPTY; (side * side * side) as usize],
            half,
            side,
        }
    }

    #[inline]
    pub(crate) fn in_bounds(&self, c: Vec3) -> bool {
        c.x.abs() <= self.half && c.y.abs() <= self.half && c.z.abs() <= self.half
    }

    #[inline]
    pub(crate) fn index(&self, c: Vec3) -> usize {
        debug_assert!(self.in_bounds(c));
        let s = self.side;
        (((c.x + self.half) * s + (c.y + self.half)) * s + (c.z + self.half)) as usize
    }

    #[inline]
    pub(crate) fn get(&self, c: Vec3) -> u8 {
        self.cells[self.index(c)]
    }

    #[inline]
    pub(crate) fn is_occupied(&self, c: Vec3) -> bool {
        self.get(c) != CELL_EMPTY
    }

    #[inline]
    pub(crate) fn set(&mut self, c: Vec3, v: u8) {
        let i = self.index(c);
        self.cells[i] = v;
    }

    pub(crate) fn cell_count(&self) -> usize {
        self.cells.len()
    }
}

/// Half side of the bounding box: every coordinate must satisfy
/// |c| <= len/2. For integer coordinates the real-valued comparison is
/// equivalent to |c| <= floor(len/2).
pub fn half_bound(len: usize) -> i32 {
    (len / 2) as i32
}

/// Partial conformation of the chain.
#[derive(Debug, Clone)]
pub struct EnvState {
    sequence: Sequence,
    placed: Vec<Vec3>,
    frame: Frame,
    deviated: bool,
    deviated_vertically: bool,
    done: bool,
    pub(crate) grid: Grid,
}

impl EnvState {
    /// Fresh state with the two-residue stem placed.
    pub fn reset(sequence: Sequence) -> EnvState {
        let mut grid = Grid::new(sequence.len());
        let a = Vec3::new(0, 0, 0);
        let b = Vec3::new(1, 0, 0);
        grid.set(a, residue_cell(sequence.residue(0)));
        grid.set(b, residue_cell(sequence.residue(1)));
        EnvState {
            placed: vec![a, b],
            frame: Frame::initial(),
            deviated: false,
            deviated_vertically: false,
            done: false,
            grid,
            sequence,
        }
    }

    pub fn sequence(&self) -> &Sequence {
        &self.sequence
    }

    pub fn placed(&self) -> &[Vec3] {
        &self.placed
    }

    pub fn head(&self) -> Vec3 {
        *self.placed.last().expect("stem is always placed")
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn deviated(&self) -> bool {
        self.deviated
    }

    pub fn deviated_vertically(&self) -> bool {
        self.deviated_vertically
    }

    pub fn done(&self) -> bool {
        self.done
    }

    /// Residues still to place.
    pub fn remaining(&self) -> usize {
        self.sequence.len() - self.placed.len()
    }

    /// Does the symmetry canonicalization permit `action` right now?
    /// The first non-forward move must be Right; the first vertical move
    /// must be Up. Both restrictions lift permanently once triggered.
    pub fn symmetry_allows(&self, action: Action) -> bool {
        symmetry_allows(self.deviated, self.deviated_vertically, action)
    }

    /// Geometry-and-symmetry validity of one action: target cell free, in
    /// bounds, symmetry-permitted. No lookahead.
    pub fn base_valid(&self, action: Action) -> bool {
        if !self.symmetry_allows(action) {
            return false;
        }
        let (dir, _) = self.frame.apply(action);
        let target = self.head() + dir;
        self.grid.in_bounds(target) && !self.grid.is_occupied(target)
    }

    /// Apply a base-valid action. Caller is responsible for validity.
    pub(crate) fn place(&mut self, action: Action) {
        let (dir, frame) = self.frame.apply(action);
        let target = self.head() + dir;
        debug_assert!(!self.grid.is_occupied(target));
        let kind = self.sequence.residue(self.placed.len());
        self.grid.set(target, residue_cell(kind));
        self.placed.push(target);
        self.frame = frame;
        self.deviated |= action != Action::Forward;
        self.deviated_vertically |= action.is_vertical();
        if self.placed.len() == self.sequence.len() {
            self.done = true;
        }
    }

    /// Undo the most recent placement (used by search).
    pub(crate) fn unplace(&mut self, prev_frame: Frame, prev_deviated: bool, prev_vertical: bool) {
        let last = self.placed.pop().expect("nothing to unplace");
        self.grid.set(last, CELL_EMPTY);
        self.frame = prev_frame;
        self.deviated = prev_deviated;
        self.deviated_vertically = prev_vertical;
        self.done = false;
    }

    /// Rebuild a state by applying a trace of base-valid actions to a
    /// fresh stem. Rejects traces that violate geometry or symmetry.
    pub fn from_actions(sequence: Sequence, actions: &[Action]) -> Result<EnvState, EnvError> {
        let mut state = EnvState::reset(sequence);
        for &a in actions {
            if state.done || !state.base_valid(a) {
                return Err(EnvError::BadPath);
            }
            state.place(a);
        }
        Ok(state)
    }

    /// Observation vector for the current partial conformation. Unplaced
    /// residues carry the sentinel coordinate `len` (outside the legal
    /// bound) with type and normalized index filled normally.
    pub fn observation(&self) -> Observation {
        let l = self.sequence.len();
        let sentinel = l as f32;
        let denom = (l - 1) as f32;
        let mut values = Vec::with_capacity(l * OBS_FIELDS);
        for i in 0..l {
            if i < self.placed.len() {
                let c = self.placed[i];
                values.extend_from_slice(&[c.x as f32, c.y as f32, c.z as f32]);
            } else {
                values.extend_from_slice(&[sentinel, sentinel, sentinel]);
            }
            values.push(self.sequence.residue(i).code() as f32);
            values.push(i as f32 / denom);
        }
        Observation { values }
    }
}

fn residue_cell(r: Residue) -> u8 {
    match r {
        Residue::H => CELL_H,
        Residue::P => CELL_P,
    }
}

pub(crate) fn symmetry_allows(deviated: bool, deviated_vertically: bool, action: Action) -> bool {
    if !deviated {
        matches!(action, Action::Forward | Action::Right)
    } else if !deviated_vertically {
        action != Action::Down
    } else {
        true
    }
}

/// Extra step outcome details.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Negative H-H contact count of the completed fold; 0 otherwise.
    pub energy: i32,
    /// True when the episode ended because the chosen action failed a
    /// validity rule.
    pub invalid: bool,
    /// True when the episode ended because no permitted action remained
    /// after a valid placement (only possible outside full mode).
    pub trapped: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// H-H contact energy of a conformation: -(number of unordered pairs
/// (i, j) with |i - j| >= 2, both hydrophobic, at unit distance).
pub fn contact_energy(placed: &[Vec3], sequence: &Sequence) -> i32 {
    let mut contacts = 0;
    for i in 0..placed.len() {
        if !sequence.is_h(i) {
            continue;
        }
        for j in (i + 2)..placed.len() {
            if !sequence.is_h(j) {
                continue;
            }
            let d = placed[i] - placed[j];
            if d.x.abs() + d.y.abs() + d.z.abs() == 1 {
                contacts += 1;
            }
        }
    }
    -contacts
}

/// Validity mask for every action in the given mode.
///
/// An action is permitted iff the target cell is free and in bounds, the
/// symmetry rules allow it, and (depending on mode) the resulting state
/// is not an immediate trap / still admits a full completion.
pub fn action_mask(state: &EnvState, mode: FeasibilityMode) -> ActionMask {
    debug_assert!(!state.done);
    let mut scratch = state.clone();
    let mut flood = feasibility::flood_scratch_for(state);
    let mut mask = [false; ACTION_COUNT];
    for action in ALL_ACTIONS {
        mask[action.code() as usize] = action_valid_scratch(&mut scratch, &mut flood, action, mode);
    }
    ActionMask(mask)
}

/// Validity of a single action, sharing the semantics of `action_mask`.
pub fn action_valid(state: &EnvState, action: Action, mode: FeasibilityMode) -> bool {
    debug_assert!(!state.done);
    let mut scratch = state.clone();
    let mut flood = feasibility::flood_scratch_for(state);
    action_valid_scratch(&mut scratch, &mut flood, action, mode)
}

fn action_valid_scratch(
    scratch: &mut EnvState,
    flood: &mut feasibility::FloodScratch,
    action: Action,
    mode: FeasibilityMode,
) -> bool {
    if !scratch.base_valid(action) {
        return false;
    }
    if scratch.remaining() == 1 {
        // Final placement: nothing left that could be trapped.
        return true;
    }
    let prev_frame = scratch.frame;
    let prev_dev = scratch.deviated;
    let prev_vert = scratch.deviated_vertically;
    scratch.place(action);
    let ok = match mode {
        FeasibilityMode::Off => true,
        FeasibilityMode::Local => ALL_ACTIONS.iter().any(|&a| scratch.base_valid(a)),
        FeasibilityMode::Full => {
            feasibility::can_complete_scratch(scratch, flood, SearchBudget::unlimited())
                == Completability::Completable
        }
    };
    scratch.unplace(prev_frame, prev_dev, prev_vert);
    ok
}

/// Stateful wrapper bundling an [`EnvState`] with a feasibility mode and a
/// cached action mask.
#[derive(Debug, Clone)]
pub struct HpEnv {
    state: EnvState,
    mode: FeasibilityMode,
    cached_mask: Option<ActionMask>,
}

impl HpEnv {
    pub fn new(sequence: Sequence, mode: FeasibilityMode) -> HpEnv {
        HpEnv {
            state: EnvState::reset(sequence),
            mode,
            cached_mask: None,
        }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn mode(&self) -> FeasibilityMode {
        self.mode
    }

    /// Restart the episode. Returns the initial observation and mask.
    pub fn reset(&mut self) -> (Observation, ActionMask) {
        self.state = EnvState::reset(self.state.sequence.clone());
        self.cached_mask = None;
        (self.state.observation(), self.mask())
    }

    /// Action mask of the current state (cached until the next step).
    pub fn mask(&mut self) -> ActionMask {
        if let Some(m) = self.cached_mask {
            return m;
        }
        let m = action_mask(&self.state, self.mode);
        self.cached_mask = Some(m);
        m
    }

    /// Take one action. Invalid actions terminate the episode with zero
    /// reward and no placement; the final placement pays the contact
    /// reward. Stepping a finished episode is an error.
    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeFinished);
        }
        let valid = match self.cached_mask {
            Some(m) => m.allows(action),
            None => action_valid(&self.state, action, self.mode),
        };
        self.cached_mask = None;
        if !valid {
            self.state.done = true;
            return Ok(StepResult {
                observation: self.state.observation(),
                reward: 0.0,
                done: true,
                info: StepInfo {
                    energy: 0,
                    invalid: true,
                    trapped: false,
                },
            });
        }
        self.state.place(action);
        if self.state.done {
            let energy = contact_energy(&self.state.placed, &self.state.sequence);
            return Ok(StepResult {
                observation: self.state.observation(),
                reward: -energy as f64,
                done: true,
                info: StepInfo {
                    energy,
                    invalid: false,
                    trapped: false,
                },
            });
        }
        // Outside full mode a valid placement can still leave the walker
        // with no permitted follow-up; the episode ends there with zero
        // reward. Full mode guarantees a continuation by construction.
        if self.mode != FeasibilityMode::Full {
            let next = self.mask();
            if !next.any() {
                self.state.done = true;
                self.cached_mask = None;
                return Ok(StepResult {
                    observation: self.state.observation(),
                    reward: 0.0,
                    done: true,
                    info: StepInfo {
                        energy: 0,
                        invalid: false,
                        trapped: true,
                    },
                });
            }
        }
        Ok(StepResult {
            observation: self.state.observation(),
            reward: 0.0,
            done: false,
            info: StepInfo {
                energy: 0,
                invalid: false,
                trapped: false,
            },
        })
    }
}

/// Reconstruct the action trace of a coordinate path under the frame
/// convention, ignoring symmetry rules. Fails if the path is not a
/// connected self-avoiding walk starting with the fixed stem.
pub fn actions_from_path(path: &[Vec3]) -> Result<Vec<Action>, EnvError> {
    if path.len() < 3
        || path[0] != Vec3::new(0, 0, 0)
        || path[1] != Vec3::new(1, 0, 0)
    {
        return Err(EnvError::BadPath);
    }
    for (i, a) in path.iter().enumerate() {
        if path[i + 1..].contains(a) {
            return Err(EnvError::BadPath);
        }
    }
    let mut frame = Frame::initial();
    let mut actions = Vec::with_capacity(path.len() - 2);
    for w in path.windows(2).skip(1) {
        let dir = w[1] - w[0];
        if !dir.is_unit_axis() {
            return Err(EnvError::BadPath);
        }
        let action = frame.action_for(dir).ok_or(EnvError::BadPath)?;
        actions.push(action);
        frame = frame.apply(action).1;
    }
    Ok(actions)
}

/// Does the coordinate path satisfy the symmetry canonicalization rules
/// (fixed stem, first deviation Right, first vertical deviation Up)?
/// Bounding box and chain length play no part here.
pub fn is_symmetry_canonical(path: &[Vec3]) -> bool {
    let actions = match actions_from_path(path) {
        Ok(a) => a,
        Err(_) => return false,
    };
    let mut deviated = false;
    let mut vertical = false;
    for action in actions {
        if !symmetry_allows(deviated, vertical, action) {
            return false;
        }
        deviated |= action != Action::Forward;
        vertical |= action.is_vertical();
    }
    true
}

/// Self-contained conformation record: enough to replay and re-score a
/// fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformationRecord {
    pub sequence: String,
    pub actions: Vec<u8>,
    pub coordinates: Vec<[i32; 3]>,
    pub energy: i32,
}

impl ConformationRecord {
    pub fn new(sequence: &Sequence, actions: &[Action], coordinates: &[Vec3], energy: i32) -> Self {
        ConformationRecord {
            sequence: sequence.to_string(),
            actions: actions.iter().map(|a| a.code()).collect(),
            coordinates: coordinates.iter().map(|c| c.to_array()).collect(),
            energy,
        }
    }

    /// Replay the action codes through a fresh environment and check that
    /// the stored coordinates and energy match. Returns the replayed
    /// reward.
    pub fn validate_replay(&self, mode: FeasibilityMode) -> Result<f64, String> {
        let sequence = Sequence::parse(&self.sequence).map_err(|e| e.to_string())?;
        let mut env = HpEnv::new(sequence, mode);
        let mut last_reward = 0.0;
        for (i, &code) in self.actions.iter().enumerate() {
            let action = Action::from_code(code)?;
            if env.state().done() {
                return Err(format!("action {i} after the episode finished"));
            }
            let res = env.step(action).map_err(|e| e.to_string())?;
            last_reward = res.reward;
        }
        let coords: Vec<[i32; 3]> = env.state().placed().iter().map(|c| c.to_array()).collect();
        if coords != self.coordinates {
            return Err("replayed coordinates do not match the record".into());
        }
        if env.state().done() && -last_reward as i32 != self.energy {
            return Err(format!(
                "replayed energy {} does not match recorded {}",
                -last_reward as i32, self.energy
            ));
        }
        Ok(last_reward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> Sequence {
        Sequence::parse(s).unwrap()
    }

    #[test]
    fn sequence_rejects_short_and_bad_chars() {
        assert!(matches!(
            Sequence::parse("HH"),
            Err(EnvError::SequenceTooShort(2))
        ));
        assert!(matches!(
            Sequence::parse("HPX"),
            Err(EnvError::BadResidue { pos: 2, found: 'X' })
        ));
        assert_eq!(seq("hphp").to_string(), "HPHP");
    }

    #[test]
    fn frame_apply_matches_convention() {
        let f0 = Frame::initial();
        let (d, f) = f0.apply(Action::Forward);
        assert_eq!(d, Vec3::new(1, 0, 0));
        assert_eq!(f, f0);

        let (d, f) = f0.apply(Action::Right);
        assert_eq!(d, Vec3::new(0, -1, 0));
        assert_eq!(f.forward, Vec3::new(0, -1, 0));
        assert_eq!(f.up, Vec3::new(0, 0, 1));

        let (d, f) = f0.apply(Action::Up);
        assert_eq!(d, Vec3::new(0, 0, 1));
        assert_eq!(f.forward, Vec3::new(0, 0, 1));
        assert_eq!(f.up, Vec3::new(-1, 0, 0));
    }

    #[test]
    fn frame_invariants_hold_under_any_action_sequence() {
        // Every reachable frame stays an orthogonal pair of unit axes.
        let mut frames = vec![Frame::initial()];
        for _ in 0..4 {
            let mut next = Vec::new();
            for f in &frames {
                for a in ALL_ACTIONS {
                    let (dir, nf) = f.apply(a);
                    assert!(dir.is_unit_axis());
                    assert!(nf.is_valid(), "invalid frame {nf:?} after {a:?}");
                    next.push(nf);
                }
            }
            frames = next;
        }
    }

    #[test]
    fn frame_action_for_inverts_apply() {
        let mut frame = Frame::initial();
        for codes in [[0u8, 2, 3], [2, 1, 4], [3, 3, 0]] {
            for c in codes {
                let a = Action::from_code(c).unwrap();
                let (dir, nf) = frame.apply(a);
                assert_eq!(frame.action_for(dir), Some(a));
                assert_eq!(frame.action_for(-frame.forward), None);
                frame = nf;
            }
        }
    }

    #[test]
    fn reset_places_stem_and_masks_symmetry() {
        let mut env = HpEnv::new(seq("HPPH"), FeasibilityMode::Full);
        let (obs, mask) = env.reset();
        assert_eq!(obs.residue_fields(0), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(obs.residue_fields(1)[..3], [1.0, 0.0, 0.0]);
        // Residues 2 and 3 carry the sentinel coordinate l = 4.
        assert_eq!(obs.residue_fields(2)[..3], [4.0, 4.0, 4.0]);
        assert_eq!(obs.residue_fields(3)[..3], [4.0, 4.0, 4.0]);
        // Index field increases monotonically over [0, 1].
        assert_eq!(obs.residue_fields(3)[4], 1.0);
        assert_eq!(
            mask,
            ActionMask([true, false, true, false, false]),
            "only Forward and Right before the first deviation"
        );
    }

    #[test]
    fn observation_index_monotone() {
        let env = HpEnv::new(seq("HHPPHH"), FeasibilityMode::Off);
        let obs = env.state().observation();
        let mut prev = -1.0;
        for i in 0..6 {
            let idx = obs.residue_fields(i)[4];
            assert!(idx > prev && (0.0..=1.0).contains(&idx));
            prev = idx;
        }
    }

    #[test]
    fn square_fold_pays_one_contact() {
        let mut env = HpEnv::new(seq("HHHH"), FeasibilityMode::Full);
        env.reset();
        let r1 = env.step(Action::Right).unwrap();
        assert!(!r1.done);
        assert_eq!(r1.reward, 0.0);
        let r2 = env.step(Action::Right).unwrap();
        assert!(r2.done);
        assert_eq!(r2.reward, 1.0);
        assert_eq!(r2.info.energy, -1);
        assert_eq!(
            env.state().placed(),
            &[
                Vec3::new(0, 0, 0),
                Vec3::new(1, 0, 0),
                Vec3::new(1, -1, 0),
                Vec3::new(0, -1, 0)
            ]
        );
    }

    #[test]
    fn overlap_terminates_with_zero() {
        let mut env = HpEnv::new(seq("HHHHH"), FeasibilityMode::Off);
        env.reset();
        env.step(Action::Right).unwrap();
        env.step(Action::Right).unwrap();
        // Third Right targets (0,0,0), already occupied by residue 0.
        let r = env.step(Action::Right).unwrap();
        assert!(r.done);
        assert_eq!(r.reward, 0.0);
        assert!(r.info.invalid);
        assert_eq!(env.state().placed().len(), 4, "no residue placed");
    }

    #[test]
    fn first_left_is_a_symmetry_violation() {
        for s in ["HHHH", "HPPHP", "PPPPPP"] {
            let mut env = HpEnv::new(seq(s), FeasibilityMode::Full);
            env.reset();
            let r = env.step(Action::Left).unwrap();
            assert!(r.done && r.reward == 0.0 && r.info.invalid);
        }
    }

    #[test]
    fn stepping_finished_episode_is_rejected() {
        let mut env = HpEnv::new(seq("HHH"), FeasibilityMode::Full);
        env.reset();
        env.step(Action::Right).unwrap();
        assert!(env.state().done());
        assert!(matches!(
            env.step(Action::Forward),
            Err(EnvError::EpisodeFinished)
        ));
    }

    #[test]
    fn bounds_clip_the_straight_walk() {
        // l = 4 bounds coordinates to |c| <= 2, so F,F would reach (3,0,0).
        let mut env = HpEnv::new(seq("PPPP"), FeasibilityMode::Off);
        env.reset();
        env.step(Action::Forward).unwrap();
        let r = env.step(Action::Forward).unwrap();
        assert!(r.done && r.info.invalid);
    }

    #[test]
    fn l3_reset_masks_forward_by_bounds() {
        // Half bound for l = 3 is 1, so Forward to (2,0,0) is out of bounds
        // already at the first decision.
        let mut env = HpEnv::new(seq("HHH"), FeasibilityMode::Full);
        let (_, mask) = env.reset();
        assert_eq!(mask, ActionMask([false, false, true, false, false]));
    }

    #[test]
    fn mask_after_first_deviation_unlocks_left_and_up() {
        let mut env = HpEnv::new(seq("HPHPHPHP"), FeasibilityMode::Off);
        env.reset();
        env.step(Action::Right).unwrap();
        let mask = env.mask();
        assert!(mask.allows(Action::Forward));
        assert!(mask.allows(Action::Left));
        assert!(mask.allows(Action::Right));
        assert!(mask.allows(Action::Up));
        assert!(!mask.allows(Action::Down), "Down stays locked until a vertical move");
        env.step(Action::Up).unwrap();
        assert!(env.mask().allows(Action::Down));
    }

    #[test]
    fn contact_energy_examples() {
        let s = seq("HHH");
        let line = [Vec3::new(0, 0, 0), Vec3::new(1, 0, 0), Vec3::new(2, 0, 0)];
        assert_eq!(contact_energy(&line, &s), 0, "sequential pairs never count");

        let square = [
            Vec3::new(0, 0, 0),
            Vec3::new(1, 0, 0),
            Vec3::new(1, -1, 0),
            Vec3::new(0, -1, 0),
        ];
        assert_eq!(contact_energy(&square, &seq("HHHH")), -1);
        assert_eq!(contact_energy(&square, &seq("HPPH")), -1);
        assert_eq!(contact_energy(&square, &seq("HPPP")), 0);
    }

    #[test]
    fn step_reward_equals_negated_contact_energy() {
        let mut env = HpEnv::new(seq("HHHHHH"), FeasibilityMode::Full);
        env.reset();
        for a in [Action::Right, Action::Right, Action::Up] {
            env.step(a).unwrap();
        }
        let r = env.step(Action::Right).unwrap();
        assert!(r.done);
        let e = contact_energy(env.state().placed(), env.state().sequence());
        assert_eq!(r.reward, -e as f64);
        assert_eq!(r.info.energy, e);
    }

    #[test]
    fn actions_from_path_roundtrip() {
        let mut env = HpEnv::new(seq("HPHPHPHP"), FeasibilityMode::Full);
        env.reset();
        let trace = [Action::Right, Action::Forward, Action::Up, Action::Left, Action::Down, Action::Right];
        let mut taken = Vec::new();
        for a in trace {
            if env.state().done() {
                break;
            }
            let res = env.step(a).unwrap();
            assert!(!res.info.invalid, "trace step {a} should be valid");
            taken.push(a);
        }
        let path = env.state().placed().to_vec();
        assert_eq!(actions_from_path(&path).unwrap(), taken);
    }

    #[test]
    fn conformation_record_replays() {
        let mut env = HpEnv::new(seq("HHHH"), FeasibilityMode::Full);
        env.reset();
        env.step(Action::Right).unwrap();
        env.step(Action::Right).unwrap();
        let rec = ConformationRecord::new(
            env.state().sequence(),
            &[Action::Right, Action::Right],
            env.state().placed(),
            -1,
        );
        assert_eq!(rec.validate_replay(FeasibilityMode::Full).unwrap(), 1.0);

        let mut broken = rec.clone();
        broken.energy = -2;
        assert!(broken.validate_replay(FeasibilityMode::Full).is_err());
    }

    proptest::proptest! {
        /// Whatever actions are thrown at it, the environment never
        /// accepts an overlapping or out-of-bounds placement, keeps the
        /// chain connected, and pays a reward only for a completed fold.
        #[test]
        fn arbitrary_traces_preserve_invariants(
            codes in proptest::collection::vec(0u8..5, 1..24),
            pattern in 0u32..1 << 12,
        ) {
            let residues: Vec<Residue> = (0..12)
                .map(|i| if (pattern >> i) & 1 == 1 { Residue::H } else { Residue::P })
                .collect();
            let mut env = HpEnv::new(Sequence::new(residues).unwrap(), FeasibilityMode::Off);
            env.reset();
            let half = half_bound(12);
            for code in codes {
                if env.state().done() {
                    break;
                }
                let result = env.step(Action::from_code(code).unwrap()).unwrap();
                let placed = env.state().placed();
                let mut seen = std::collections::HashSet::new();
                for c in placed {
                    proptest::prop_assert!(seen.insert(c.to_array()));
                    proptest::prop_assert!(
                        c.x.abs() <= half && c.y.abs() <= half && c.z.abs() <= half
                    );
                }
                for w in placed.windows(2) {
                    let d = w[1] - w[0];
                    proptest::prop_assert_eq!(d.x.abs() + d.y.abs() + d.z.abs(), 1);
                }
                if result.reward != 0.0 {
                    proptest::prop_assert!(result.done);
                    proptest::prop_assert_eq!(placed.len(), 12);
                    proptest::prop_assert_eq!(
                        result.reward,
                        -contact_energy(placed, env.state().sequence()) as f64
                    );
                }
            }
        }
    }

    #[test]
    fn determinism_same_state_same_result() {
        let run = || {
            let mut env = HpEnv::new(seq("HPHPPH"), FeasibilityMode::Full);
            env.reset();
            let mut out = Vec::new();
            for a in [Action::Right, Action::Forward, Action::Up, Action::Left] {
                let r = env.step(a).unwrap();
                out.push((r.observation.clone(), r.reward.to_bits(), r.done, r.info));
                if r.done {
                    break;
                }
            }
            out
        };
        assert_eq!(run(), run());
    }
}
