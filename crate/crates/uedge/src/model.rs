//! Domain types shared across the orchestrator, simulator and analysis code.
//!
//! Everything here is plain data with construction-time validation; the only
//! mutable structure is [`TaskCountMatrix`], which the single control thread
//! updates on dispatch and completion.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a registered edge device.
///
/// Ids are dense integers handed out at first registration; a device that
/// exits and later rejoins keeps its original id, so archived profile rows
/// stay addressable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

/// One task type of an application profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskType {
    /// 1-based position within the profile's dispatch order.
    pub index: usize,
    pub name: String,
    /// Tasks sharing an input group require the same input data.
    pub input_group: u32,
    /// Unloaded service time on a reference device, seconds.
    pub base_service_time: f64,
}

/// An application: an ordered list of task types plus their input grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationProfile {
    pub name: String,
    pub tasks: Vec<TaskType>,
}

/// Errors from [`ApplicationProfile::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProfileError {
    EmptyProfile,
    DuplicateTaskIndex(usize),
    /// Task indices must be exactly 1..=N in order.
    NonContiguousIndex(usize),
    NonPositiveServiceTime(usize),
}

impl fmt::Display for ProfileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyProfile => write!(f, "profile has no tasks"),
            Self::DuplicateTaskIndex(i) => write!(f, "duplicate task index {i}"),
            Self::NonContiguousIndex(i) => write!(f, "task index {i} out of order"),
            Self::NonPositiveServiceTime(i) => {
                write!(f, "task {i} has non-positive base service time")
            }
        }
    }
}

impl Error for ProfileError {}

impl ApplicationProfile {
    /// Number of task types N.
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Checks the profile invariants: non-empty, indices exactly 1..=N,
    /// positive base service times.
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.tasks.is_empty() {
            return Err(ProfileError::EmptyProfile);
        }
        for (pos, task) in self.tasks.iter().enumerate() {
            if task.index != pos + 1 {
                if self.tasks.iter().filter(|t| t.index == task.index).count() > 1 {
                    return Err(ProfileError::DuplicateTaskIndex(task.index));
                }
                return Err(ProfileError::NonContiguousIndex(task.index));
            }
            if task.base_service_time <= 0.0 || task.base_service_time.is_nan() {
                return Err(ProfileError::NonPositiveServiceTime(task.index));
            }
        }
        Ok(())
    }

    /// Input groups in profile order: each group lists the 1-based task
    /// indices that share input data, ordered by first occurrence.
    pub fn input_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
        for task in &self.tasks {
            match groups.iter_mut().find(|(g, _)| *g == task.input_group) {
                Some((_, members)) => members.push(task.index),
                None => groups.push((task.input_group, vec![task.index])),
            }
        }
        groups.into_iter().map(|(_, m)| m).collect()
    }

    /// Three-task lightweight workload (color detection, image segmentation,
    /// edge detection). Each task has its own input.
    pub fn light() -> Self {
        Self::from_rows("light", &[
            ("color_detection", 1, 0.06),
            ("image_segmentation", 2, 0.12),
            ("edge_detection", 3, 0.17),
        ])
    }

    /// Three-task medium workload (kernel filtering, contour detection,
    /// feature transformation).
    pub fn medium() -> Self {
        Self::from_rows("medium", &[
            ("kernel_filtering", 1, 0.22),
            ("contour_detection", 2, 0.25),
            ("feature_transformation", 3, 0.35),
        ])
    }

    /// Six-task heavy workload modeled on a driving-assistance pipeline.
    /// Tasks 4-6 (pedestrian detection, obstacle detection, traffic sign
    /// analysis) all consume the forward camera feed and share input group 4.
    pub fn heavy() -> Self {
        Self::from_rows("heavy", &[
            ("driver_state_detection", 1, 0.39),
            ("driver_body_position", 2, 0.45),
            ("vehicle_state_analysis", 3, 0.43),
            ("pedestrian_detection", 4, 0.57),
            ("obstacle_detection", 4, 0.60),
            ("traffic_sign_analysis", 4, 0.41),
        ])
    }

    /// Looks up a built-in preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "light" => Some(Self::light()),
            "medium" => Some(Self::medium()),
            "heavy" => Some(Self::heavy()),
            _ => None,
        }
    }

    fn from_rows(name: &str, rows: &[(&str, u32, f64)]) -> Self {
        let tasks = rows
            .iter()
            .enumerate()
            .map(|(i, (task_name, group, base))| TaskType {
                index: i + 1,
                name: (*task_name).to_string(),
                input_group: *group,
                base_service_time: *base,
            })
            .collect();
        Self { name: name.to_string(), tasks }
    }
}

/// Validates an application profile (thin wrapper kept for call-site
/// symmetry with the other free-function operations).
pub fn validate_profile(profile: &ApplicationProfile) -> Result<(), ProfileError> {
    profile.validate()
}

/// One arrival: an application instance whose N tasks get scheduled together.
#[derive(Debug, Clone)]
pub struct ApplicationInstance {
    pub id: u64,
    pub arrival_time: f64,
    /// Completion time per task (1-based task index - 1), filled by the
    /// simulator as results return.
    pub completion_time: Vec<Option<f64>>,
}

impl ApplicationInstance {
    pub fn new(id: u64, arrival_time: f64, n_tasks: usize) -> Self {
        Self { id, arrival_time, completion_time: vec![None; n_tasks] }
    }
}

/// Slope/intercept of one pairwise incremental service-time line:
/// the service time of a task of type i with k co-located tasks of type j
/// is `slope * k + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferencePair {
    /// Seconds added per co-located task; never negative (interference
    /// cannot speed a task up).
    pub slope: f64,
    /// Seconds at zero co-location; always positive.
    pub intercept: f64,
}

impl InterferencePair {
    pub fn new(slope: f64, intercept: f64) -> Result<Self, PairError> {
        if slope < 0.0 || !slope.is_finite() {
            return Err(PairError::NegativeSlope(slope));
        }
        if intercept <= 0.0 || !intercept.is_finite() {
            return Err(PairError::NonPositiveIntercept(intercept));
        }
        Ok(Self { slope, intercept })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairError {
    NegativeSlope(f64),
    NonPositiveIntercept(f64),
}

impl fmt::Display for PairError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NegativeSlope(m) => write!(f, "negative interference slope {m}"),
            Self::NonPositiveIntercept(c) => write!(f, "non-positive intercept {c}"),
        }
    }
}

impl Error for PairError {}

/// Provenance of a profile-row entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryMask {
    /// Fitted from two probe points on the device itself.
    Measured,
    /// Filled in by low-rank completion.
    Reconstructed,
    /// Not yet available; a row with missing entries must not be scheduled on.
    Missing,
}

/// One device's N*N pairwise entries, stored row-major by (task i, co-located
/// type j), together with the provenance mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    n: usize,
    entries: Vec<InterferencePair>,
    mask: Vec<EntryMask>,
}

impl ProfileRow {
    /// A row with every entry missing, as a canvas for profiling.
    pub fn empty(n: usize) -> Self {
        let filler = InterferencePair { slope: 0.0, intercept: f64::NAN };
        Self { n, entries: vec![filler; n * n], mask: vec![EntryMask::Missing; n * n] }
    }

    /// Builds a fully measured row from `n*n` pairs in row-major (i, j) order.
    pub fn from_pairs(n: usize, pairs: Vec<InterferencePair>) -> Self {
        assert_eq!(pairs.len(), n * n, "profile row must hold n^2 pairs");
        let mask = vec![EntryMask::Measured; n * n];
        Self { n, entries: pairs, mask }
    }

    pub fn task_count(&self) -> usize {
        self.n
    }

    fn idx(&self, task: usize, other: usize) -> usize {
        debug_assert!((1..=self.n).contains(&task) && (1..=self.n).contains(&other));
        (task - 1) * self.n + (other - 1)
    }

    /// Entry for task `task` interfered by co-located type `other` (1-based).
    pub fn pair(&self, task: usize, other: usize) -> &InterferencePair {
        &self.entries[self.idx(task, other)]
    }

    pub fn mask_at(&self, task: usize, other: usize) -> EntryMask {
        self.mask[self.idx(task, other)]
    }

    pub fn set(&mut self, task: usize, other: usize, pair: InterferencePair, mask: EntryMask) {
        let k = self.idx(task, other);
        self.entries[k] = pair;
        self.mask[k] = mask;
    }

    /// The N entries governing task `task`, in co-located-type order.
    pub fn task_block(&self, task: usize) -> &[InterferencePair] {
        let start = (task - 1) * self.n;
        &self.entries[start..start + self.n]
    }

    pub fn task_block_mask(&self, task: usize) -> &[EntryMask] {
        let start = (task - 1) * self.n;
        &self.mask[start..start + self.n]
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|m| *m != EntryMask::Missing)
    }

    pub fn measured_count(&self) -> usize {
        self.mask.iter().filter(|m| **m == EntryMask::Measured).count()
    }

    /// Flat scalar view `[m_11, c_11, m_12, c_12, ...]` used by completion
    /// and the snapshot format.
    pub fn to_scalars(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.entries.len());
        for pair in &self.entries {
            out.push(pair.slope);
            out.push(pair.intercept);
        }
        out
    }

    pub fn entries(&self) -> &[InterferencePair] {
        &self.entries
    }

    pub fn masks(&self) -> &[EntryMask] {
        &self.mask
    }
}

/// The orchestrator's believed table of pairwise entries: one [`ProfileRow`]
/// per registered device.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileMatrix {
    rows: BTreeMap<DeviceId, ProfileRow>,
}

impl ProfileMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_row(&mut self, device: DeviceId, row: ProfileRow) {
        self.rows.insert(device, row);
    }

    pub fn remove_row(&mut self, device: DeviceId) -> Option<ProfileRow> {
        self.rows.remove(&device)
    }

    pub fn row(&self, device: DeviceId) -> Option<&ProfileRow> {
        self.rows.get(&device)
    }

    pub fn row_mut(&mut self, device: DeviceId) -> Option<&mut ProfileRow> {
        self.rows.get_mut(&device)
    }

    pub fn devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.rows.keys().copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (DeviceId, &ProfileRow)> {
        self.rows.iter().map(|(d, r)| (*d, r))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows that are fully measured (no reconstructed or missing entries);
    /// these anchor the low-rank completion of partially probed devices.
    pub fn fully_measured_rows(&self) -> Vec<&ProfileRow> {
        self.rows
            .values()
            .filter(|r| r.masks().iter().all(|m| *m == EntryMask::Measured))
            .collect()
    }
}

/// Live count of tasks of each type per device (the orchestrator's Z).
///
/// Incremented exactly once per dispatch, decremented exactly once per
/// returned result.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskCountMatrix {
    counts: BTreeMap<DeviceId, Vec<u32>>,
}

impl TaskCountMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_device(&mut self, device: DeviceId, n_tasks: usize) {
        self.counts.insert(device, vec![0; n_tasks]);
    }

    pub fn remove_device(&mut self, device: DeviceId) -> Option<Vec<u32>> {
        self.counts.remove(&device)
    }

    pub fn row(&self, device: DeviceId) -> Option<&[u32]> {
        self.counts.get(&device).map(|v| v.as_slice())
    }

    pub fn increment(&mut self, device: DeviceId, task: usize) {
        let row = self.counts.get_mut(&device).expect("unknown device in count matrix");
        row[task - 1] += 1;
    }

    pub fn decrement(&mut self, device: DeviceId, task: usize) {
        let row = self.counts.get_mut(&device).expect("unknown device in count matrix");
        assert!(row[task - 1] > 0, "count underflow for task {task} on {device}");
        row[task - 1] -= 1;
    }

    pub fn total(&self, device: DeviceId) -> u32 {
        self.counts.get(&device).map(|r| r.iter().sum()).unwrap_or(0)
    }

    /// Sum over all devices and task types; equals dispatched minus returned.
    pub fn grand_total(&self) -> u64 {
        self.counts.values().flat_map(|r| r.iter()).map(|&c| c as u64).sum()
    }

    pub fn devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.counts.keys().copied()
    }
}

/// Up/down state of a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Availability {
    Up,
    Down,
}

/// One completed interval of an availability history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilitySegment {
    pub state: Availability,
    pub duration: f64,
}

/// Per-day alternating up/down history of a device.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AvailabilityTrace {
    pub days: Vec<Vec<AvailabilitySegment>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceError {
    NonPositiveDuration,
    StatesDoNotAlternate,
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonPositiveDuration => write!(f, "trace segment with non-positive duration"),
            Self::StatesDoNotAlternate => write!(f, "trace states must alternate up/down"),
        }
    }
}

impl Error for TraceError {}

impl AvailabilityTrace {
    pub fn validate(&self) -> Result<(), TraceError> {
        for day in &self.days {
            let mut prev: Option<Availability> = None;
            for seg in day {
                if seg.duration <= 0.0 || seg.duration.is_nan() {
                    return Err(TraceError::NonPositiveDuration);
                }
                if prev == Some(seg.state) {
                    return Err(TraceError::StatesDoNotAlternate);
                }
                prev = Some(seg.state);
            }
        }
        Ok(())
    }
}

/// A scheduled change of a device's effective compute capacity: from `time`
/// on, all true slopes and intercepts are multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityEvent {
    pub time: f64,
    pub scale: f64,
}

/// Simulator-side ground truth for one device. The orchestrator never sees
/// this; it must infer everything through probes and feedback.
#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub id: DeviceId,
    /// Mean network delay to the orchestrator, seconds.
    pub network_delay: f64,
    /// The device's true pairwise table.
    pub true_row: ProfileRow,
    /// Strictly time-ordered capacity changes; scales compose by product.
    pub capacity_events: Vec<CapacityEvent>,
    /// Multi-day up/down history used to fit the availability model.
    pub availability: AvailabilityTrace,
    /// Advertised processor speed; consumed only by the two-choice baseline.
    pub nominal_speed: f64,
}

impl DeviceSpec {
    /// Product of capacity scales in effect at `time`.
    pub fn capacity_scale_at(&self, time: f64) -> f64 {
        self.capacity_events
            .iter()
            .take_while(|e| e.time <= time)
            .map(|e| e.scale)
            .product()
    }
}

/// The orchestration knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Instance arrival rate, 1/s.
    pub lambda: f64,
    /// Relative service-time error above which a feedback event triggers a
    /// gradient-descent readjustment of the believed row.
    pub delta: f64,
    /// Tolerated relative service-time increase when co-locating tasks that
    /// share input data.
    pub beta: f64,
    /// Minimum predicted availability for a device to receive tasks.
    pub gamma: f64,
    /// Probing time budget for a newly joined device, seconds.
    pub profiling_budget: f64,
    /// Window (in instances) of the running-average service time.
    pub running_avg_window: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            delta: 0.10,
            beta: 0.15,
            gamma: 0.85,
            profiling_budget: 60.0,
            running_avg_window: 50,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), HyperParamError> {
        if self.lambda < 0.0 || self.delta < 0.0 || self.beta < 0.0 || self.profiling_budget < 0.0
        {
            return Err(HyperParamError::Negative);
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(HyperParamError::GammaOutOfRange(self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperParamError {
    Negative,
    GammaOutOfRange(f64),
}

impl fmt::Display for HyperParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Negative => write!(f, "hyperparameters must be non-negative"),
            Self::GammaOutOfRange(g) => write!(f, "gamma {g} outside [0, 1]"),
        }
    }
}

impl Error for HyperParamError {}

/// Where one task of an instance goes and what service time the scheduler
/// expected there. Baselines that do not estimate service times leave the
/// expectation empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskAssignment {
    pub device: DeviceId,
    pub expected_st: Option<f64>,
}

/// Many-to-one mapping of an instance's tasks to devices, indexed by task
/// position (task index - 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub tasks: Vec<TaskAssignment>,
}

impl Assignment {
    pub fn task(&self, index: usize) -> &TaskAssignment {
        &self.tasks[index - 1]
    }
}
