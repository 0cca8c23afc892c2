//! The orchestration engine: availability filtering, minimum-service-time
//! scheduling, bandwidth-overhead reduction, online gradient-descent
//! readjustment, and device exit/rejoin bookkeeping.
//!
//! Scheduling one instance runs exactly four phases in order:
//!
//! 1. drop devices unlikely to stay up for the duration of the heaviest task,
//! 2. per task, pick the device with the lowest expected service time,
//! 3. pull tasks that share input data onto one device when the relative
//!    service-time increase stays within the bandwidth knob,
//! 4. after results return, correct the believed row wherever the predicted
//!    service time missed the observed one by more than the error knob.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt;

use crate::availability::{self, reliability, AvailabilityError, SmpModel};
use crate::interference::{
    expected_service_time, CompositionMode, InterferenceError, INTERCEPT_FLOOR,
};
use crate::model::{
    ApplicationProfile, Assignment, Availability, DeviceId, HyperParams, InterferencePair,
    ProfileMatrix, ProfileRow, TaskAssignment, TaskCountMatrix,
};

/// Default gradient step size for online readjustment; one step per feedback
/// event avoids over-fitting a single noisy observation.
pub const DEFAULT_LEARN_RATE: f64 = 0.01;

/// Which task counts the per-task argmin of one instance sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountSemantics {
    /// All N argmins read the counts as of instance arrival; increments
    /// happen at dispatch. Literal reading of the scheduling loop; can herd
    /// an instance's tasks onto one device.
    #[default]
    ArrivalSnapshot,
    /// Each task's assignment is visible to the next task's argmin.
    IncrementPerTask,
}

/// Everything the orchestrator believes about the fleet.
#[derive(Debug, Clone)]
pub struct OrchestratorState {
    n: usize,
    mode: CompositionMode,
    pub params: HyperParams,
    pub matrix: ProfileMatrix,
    pub counts: TaskCountMatrix,
    pub smp: BTreeMap<DeviceId, SmpModel>,
    /// Believed mean network delay per device, measured at profiling time.
    pub delays: BTreeMap<DeviceId, f64>,
    /// Rows of devices that exited gracefully, restored verbatim on rejoin.
    pub saved: BTreeMap<DeviceId, ArchivedDevice>,
    pub count_semantics: CountSemantics,
    pub learn_rate: f64,
}

/// Profile knowledge archived when a device exits.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedDevice {
    pub row: ProfileRow,
    pub delay: f64,
    pub smp: SmpModel,
}

/// One completed task's feedback, as needed by the readjustment step.
#[derive(Debug, Clone)]
pub struct Feedback {
    pub task: usize,
    pub device: DeviceId,
    /// Expected service time recorded at scheduling (delay included).
    pub st_expected: f64,
    /// Observed service time (delay included).
    pub st_actual: f64,
    /// The device's task-count row at dispatch time.
    pub counts_at_dispatch: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OrchestratorError {
    /// No device passed the availability filter; the caller queues the
    /// instance until the next device event.
    NoEligibleDevice,
    UnknownDevice(DeviceId),
    Interference(InterferenceError),
    Availability(AvailabilityError),
}

impl fmt::Display for OrchestratorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoEligibleDevice => write!(f, "no eligible device"),
            Self::UnknownDevice(d) => write!(f, "unknown device {d}"),
            Self::Interference(e) => write!(f, "{e}"),
            Self::Availability(e) => write!(f, "{e}"),
        }
    }
}

impl Error for OrchestratorError {}

impl From<InterferenceError> for OrchestratorError {
    fn from(e: InterferenceError) -> Self {
        Self::Interference(e)
    }
}

impl From<AvailabilityError> for OrchestratorError {
    fn from(e: AvailabilityError) -> Self {
        Self::Availability(e)
    }
}

impl OrchestratorState {
    pub fn new(n: usize, mode: CompositionMode, params: HyperParams) -> Self {
        Self {
            n,
            mode,
            params,
            matrix: ProfileMatrix::new(),
            counts: TaskCountMatrix::new(),
            smp: BTreeMap::new(),
            delays: BTreeMap::new(),
            saved: BTreeMap::new(),
            count_semantics: CountSemantics::default(),
            learn_rate: DEFAULT_LEARN_RATE,
        }
    }

    pub fn task_count(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> CompositionMode {
        self.mode
    }

    /// Adds a freshly profiled device.
    pub fn register_device(&mut self, id: DeviceId, row: ProfileRow, delay: f64, smp: SmpModel) {
        assert!(row.is_complete(), "rows used for scheduling must have no missing entries");
        self.matrix.insert_row(id, row);
        self.counts.add_device(id, self.n);
        self.smp.insert(id, smp);
        self.delays.insert(id, delay);
    }

    pub fn is_registered(&self, id: DeviceId) -> bool {
        self.matrix.row(id).is_some()
    }

    pub fn has_archived(&self, id: DeviceId) -> bool {
        self.saved.contains_key(&id)
    }

    /// Archives the device's knowledge and removes it from the live fleet.
    /// The caller re-dispatches whatever was in flight there.
    pub fn device_exit(&mut self, id: DeviceId) -> Result<(), OrchestratorError> {
        let row = self.matrix.remove_row(id).ok_or(OrchestratorError::UnknownDevice(id))?;
        self.counts.remove_device(id);
        let mut smp = self.smp.remove(&id).expect("smp row in sync with matrix");
        smp.note_transition(Availability::Down);
        let delay = self.delays.remove(&id).expect("delay row in sync with matrix");
        self.saved.insert(id, ArchivedDevice { row, delay, smp });
        Ok(())
    }

    /// Restores an archived device verbatim, skipping profiling.
    pub fn device_rejoin(&mut self, id: DeviceId) -> Result<(), OrchestratorError> {
        let archived = self.saved.remove(&id).ok_or(OrchestratorError::UnknownDevice(id))?;
        let mut smp = archived.smp;
        smp.note_transition(Availability::Up);
        self.register_device(id, archived.row, archived.delay, smp);
        Ok(())
    }

    /// Updates the live availability state of a device's model.
    pub fn note_device_transition(&mut self, id: DeviceId, state: Availability) {
        if let Some(smp) = self.smp.get_mut(&id) {
            smp.note_transition(state);
        }
    }

    pub fn set_smp_age(&mut self, id: DeviceId, age: f64) {
        if let Some(smp) = self.smp.get_mut(&id) {
            smp.set_age(age);
        }
    }

    /// Horizon for the availability filter: heaviest zero-load task across
    /// the registered rows.
    pub fn t_max(&self) -> Result<f64, AvailabilityError> {
        availability::t_max(self.matrix.rows().map(|(_, r)| r), self.mode)
    }

    /// Keeps devices whose predicted probability of staying up through
    /// `t_max` strictly exceeds gamma.
    pub fn filter_available(&self, t_max: f64) -> Result<Vec<DeviceId>, OrchestratorError> {
        let gamma = self.params.gamma;
        let eligible: Vec<DeviceId> = self
            .matrix
            .devices()
            .filter(|id| reliability(&self.smp[id], t_max) > gamma)
            .collect();
        if eligible.is_empty() {
            return Err(OrchestratorError::NoEligibleDevice);
        }
        Ok(eligible)
    }

    /// Expected service time of `task` on `device` under the given counts,
    /// believed network delay included.
    fn expected_with_delay(
        &self,
        task: usize,
        device: DeviceId,
        counts: &[u32],
    ) -> Result<f64, OrchestratorError> {
        let row = self.matrix.row(device).ok_or(OrchestratorError::UnknownDevice(device))?;
        let st = expected_service_time(task, row, counts, self.mode)?;
        Ok(st + self.delays[&device])
    }

    /// Phase 2: per task in profile order, the eligible device with the
    /// lowest expected service time; ties go to the lowest device id.
    ///
    /// Device rows, counts and delays are gathered once up front so the
    /// task-by-device scan stays linear in N times Q.
    pub fn min_service_time_schedule(
        &self,
        profile: &ApplicationProfile,
        eligible: &[DeviceId],
    ) -> Result<Assignment, OrchestratorError> {
        assert!(!eligible.is_empty());
        let mut sorted = eligible.to_vec();
        sorted.sort_unstable();
        let mut views = Vec::with_capacity(sorted.len());
        for &dev in &sorted {
            let row = self.matrix.row(dev).ok_or(OrchestratorError::UnknownDevice(dev))?;
            let counts = self.counts.row(dev).expect("counts row in sync");
            views.push((dev, row, counts.to_vec(), self.delays[&dev]));
        }
        let mut tasks = Vec::with_capacity(profile.task_count());
        for task in &profile.tasks {
            let mut best: Option<(f64, usize)> = None;
            for (k, (_, row, counts, delay)) in views.iter().enumerate() {
                let st = expected_service_time(task.index, row, counts, self.mode)? + delay;
                if best.is_none_or(|(b, _)| st < b) {
                    best = Some((st, k));
                }
            }
            let (st, k) = best.expect("eligible set non-empty");
            if self.count_semantics == CountSemantics::IncrementPerTask {
                views[k].2[task.index - 1] += 1;
            }
            tasks.push(TaskAssignment { device: views[k].0, expected_st: Some(st) });
        }
        Ok(Assignment { tasks })
    }

    /// Phase 3: for each input group, try to move members onto the first
    /// member's device; a move happens iff the relative service-time increase
    /// stays within beta. Evaluations use the arrival-time counts.
    pub fn reduce_bandwidth(
        &self,
        profile: &ApplicationProfile,
        mut assignment: Assignment,
    ) -> Result<Assignment, OrchestratorError> {
        let beta = self.params.beta;
        for group in profile.input_groups() {
            if group.len() < 2 {
                continue;
            }
            let anchor = assignment.task(group[0]).device;
            for &member in &group[1..] {
                let current = assignment.task(member);
                if current.device == anchor {
                    continue;
                }
                let st_min = current.expected_st.expect("phase 2 records expectations");
                let st_anchor = self.expected_with_delay(
                    member,
                    anchor,
                    self.counts.row(anchor).expect("counts row"),
                )?;
                if (st_anchor - st_min) / st_min <= beta {
                    assignment.tasks[member - 1] =
                        TaskAssignment { device: anchor, expected_st: Some(st_anchor) };
                }
            }
        }
        Ok(assignment)
    }

    /// Phases 1-3 composed in order. The caller times this call to charge
    /// orchestration overhead, dispatches the assignment, and later feeds
    /// results back through [`Self::online_readjust`].
    pub fn schedule_instance(
        &self,
        profile: &ApplicationProfile,
    ) -> Result<Assignment, OrchestratorError> {
        // an empty fleet behaves like an empty eligible set: queue and retry
        let t_max = self.t_max().map_err(|_| OrchestratorError::NoEligibleDevice)?;
        let eligible = self.filter_available(t_max)?;
        let assignment = self.min_service_time_schedule(profile, &eligible)?;
        self.reduce_bandwidth(profile, assignment)
    }

    /// Re-dispatch path for a single orphaned task: availability filter plus
    /// per-task argmin, no bandwidth phase.
    pub fn schedule_single_task(&self, task: usize) -> Result<TaskAssignment, OrchestratorError> {
        let t_max = self.t_max().map_err(|_| OrchestratorError::NoEligibleDevice)?;
        let eligible = self.filter_available(t_max)?;
        let mut best: Option<(f64, DeviceId)> = None;
        for &dev in &eligible {
            let st =
                self.expected_with_delay(task, dev, self.counts.row(dev).expect("counts row"))?;
            if best.is_none_or(|(b, _)| st < b) {
                best = Some((st, dev));
            }
        }
        let (st, dev) = best.expect("eligible set non-empty");
        Ok(TaskAssignment { device: dev, expected_st: Some(st) })
    }

    pub fn note_dispatch(&mut self, device: DeviceId, task: usize) {
        self.counts.increment(device, task);
    }

    pub fn note_completion(&mut self, device: DeviceId, task: usize) {
        self.counts.decrement(device, task);
    }

    /// Phase 4: one gradient step on the device's row when the relative
    /// prediction error exceeds delta. Returns whether an update fired.
    ///
    /// The loss is the squared error of the composed estimate against the
    /// observed compute time (believed delay subtracted), with the count row
    /// at dispatch time as the regressor. Slopes stay non-negative and
    /// intercepts strictly positive.
    pub fn online_readjust(&mut self, fb: &Feedback) -> bool {
        assert!(fb.st_actual > 0.0, "actual service time must be positive");
        if (fb.st_expected - fb.st_actual).abs() / fb.st_actual <= self.params.delta {
            return false;
        }
        let Some(delay) = self.delays.get(&fb.device).copied() else {
            log::debug!("feedback for unregistered device {}; dropped", fb.device);
            return false;
        };
        let row = self.matrix.row_mut(fb.device).expect("delay row in sync with matrix");
        let predicted = expected_service_time(fb.task, row, &fb.counts_at_dispatch, self.mode)
            .expect("registered rows are complete");
        let err = predicted - (fb.st_actual - delay);
        let step = self.learn_rate * 2.0 * err;
        let n = self.n;
        for j in 1..=n {
            let x_j = fb.counts_at_dispatch[j - 1] as f64;
            let old = *row.pair(fb.task, j);
            let slope = (old.slope - step * x_j).max(0.0);
            let update_intercept = match self.mode {
                CompositionMode::Additive => true,
                CompositionMode::Marginal => j == fb.task,
            };
            let intercept = if update_intercept {
                (old.intercept - step).max(INTERCEPT_FLOOR)
            } else {
                old.intercept
            };
            let mask = row.mask_at(fb.task, j);
            row.set(fb.task, j, InterferencePair { slope, intercept }, mask);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EntryMask;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_row(n: usize, slope: f64, intercept: f64) -> ProfileRow {
        ProfileRow::from_pairs(n, vec![InterferencePair { slope, intercept }; n * n])
    }

    fn random_row(n: usize, rng: &mut impl Rng) -> ProfileRow {
        let pairs = (0..n * n)
            .map(|_| InterferencePair {
                slope: rng.random_range(0.0..0.1),
                intercept: rng.random_range(0.1..0.6),
            })
            .collect();
        ProfileRow::from_pairs(n, pairs)
    }

    /// SMP whose reliability at any positive horizon below 1.0 equals
    /// `above / total` (age 0).
    fn smp_with_survival(above: usize, total: usize) -> SmpModel {
        let mut samples = vec![1000.0; above];
        samples.extend(vec![0.5; total - above]);
        SmpModel::from_samples(samples, vec![], Availability::Up, 0.0)
    }

    fn two_task_profile() -> ApplicationProfile {
        ApplicationProfile {
            name: "pair".into(),
            tasks: vec![
                crate::model::TaskType {
                    index: 1,
                    name: "a".into(),
                    input_group: 1,
                    base_service_time: 0.3,
                },
                crate::model::TaskType {
                    index: 2,
                    name: "b".into(),
                    input_group: 1,
                    base_service_time: 0.4,
                },
            ],
        }
    }

    #[test]
    fn filter_keeps_strictly_above_gamma() {
        let mut state = OrchestratorState::new(1, CompositionMode::Marginal, HyperParams::default());
        state.register_device(DeviceId(1), uniform_row(1, 0.0, 0.5), 0.0, smp_with_survival(18, 20));
        state.register_device(DeviceId(2), uniform_row(1, 0.0, 0.5), 0.0, smp_with_survival(17, 20));
        state.register_device(DeviceId(3), uniform_row(1, 0.0, 0.5), 0.0, smp_with_survival(4, 20));
        // R values 0.90, 0.85, 0.20 against gamma 0.85: boundary excluded
        let eligible = state.filter_available(1.0).unwrap();
        assert_eq!(eligible, vec![DeviceId(1)]);
    }

    #[test]
    fn gamma_zero_keeps_all_up_devices() {
        let params = HyperParams { gamma: 0.0, ..HyperParams::default() };
        let mut state = OrchestratorState::new(1, CompositionMode::Marginal, params);
        for id in 1..=3 {
            state.register_device(
                DeviceId(id),
                uniform_row(1, 0.0, 0.5),
                0.0,
                smp_with_survival(1, 20),
            );
        }
        assert_eq!(state.filter_available(1.0).unwrap().len(), 3);
    }

    #[test]
    fn all_down_yields_no_eligible_device() {
        let mut state = OrchestratorState::new(1, CompositionMode::Marginal, HyperParams::default());
        state.register_device(DeviceId(1), uniform_row(1, 0.0, 0.5), 0.0, smp_with_survival(20, 20));
        state.note_device_transition(DeviceId(1), Availability::Down);
        assert_eq!(
            state.filter_available(1.0),
            Err(OrchestratorError::NoEligibleDevice)
        );
    }

    #[test]
    fn argmin_includes_network_delay() {
        let mut state = OrchestratorState::new(1, CompositionMode::Marginal, HyperParams::default());
        // zero-load times incl. delay: dev1 0.4, dev2 0.3
        state.register_device(DeviceId(1), uniform_row(1, 0.0, 0.35), 0.05, smp_with_survival(9, 9));
        state.register_device(DeviceId(2), uniform_row(1, 0.0, 0.20), 0.10, smp_with_survival(9, 9));
        let profile = ApplicationProfile {
            name: "one".into(),
            tasks: vec![crate::model::TaskType {
                index: 1,
                name: "t".into(),
                input_group: 1,
                base_service_time: 0.3,
            }],
        };
        let a = state
            .min_service_time_schedule(&profile, &[DeviceId(1), DeviceId(2)])
            .unwrap();
        assert_eq!(a.task(1).device, DeviceId(2));
        assert!((a.task(1).expected_st.unwrap() - 0.30).abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        let mut state = OrchestratorState::new(2, CompositionMode::Additive, HyperParams::default());
        for id in [3u32, 1, 2] {
            state.register_device(DeviceId(id), uniform_row(2, 0.01, 0.2), 0.01, smp_with_survival(9, 9));
        }
        let a = state
            .min_service_time_schedule(&two_task_profile(), &[DeviceId(3), DeviceId(1), DeviceId(2)])
            .unwrap();
        assert_eq!(a.task(1).device, DeviceId(1));
        assert_eq!(a.task(2).device, DeviceId(1));
    }

    #[test]
    fn greedy_argmin_matches_exhaustive_oracle() {
        // Q=3, N=2, enumerable count states: the per-task greedy argmin must
        // equal brute-force enumeration of per-task options.
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for trial in 0..200 {
            let mut state =
                OrchestratorState::new(2, CompositionMode::Additive, HyperParams::default());
            let mut rows = Vec::new();
            for id in 1..=3u32 {
                let row = random_row(2, &mut rng);
                rows.push(row.clone());
                state.register_device(DeviceId(id), row, rng.random_range(0.0..0.05), smp_with_survival(9, 9));
            }
            for id in 1..=3u32 {
                for task in 1..=2usize {
                    for _ in 0..rng.random_range(0..3u32) {
                        state.note_dispatch(DeviceId(id), task);
                    }
                }
            }
            let eligible = vec![DeviceId(1), DeviceId(2), DeviceId(3)];
            let got = state.min_service_time_schedule(&two_task_profile(), &eligible).unwrap();
            // oracle: for each task, scan all devices in id order
            for task in 1..=2usize {
                let mut best = f64::INFINITY;
                let mut best_dev = DeviceId(0);
                for (k, id) in eligible.iter().enumerate() {
                    let st = expected_service_time(
                        task,
                        &rows[k],
                        state.counts.row(*id).unwrap(),
                        CompositionMode::Additive,
                    )
                    .unwrap()
                        + state.delays[id];
                    if st < best {
                        best = st;
                        best_dev = *id;
                    }
                }
                assert_eq!(got.task(task).device, best_dev, "trial {trial} task {task}");
                assert_eq!(got.task(task).expected_st, Some(best));
            }
        }
    }

    #[test]
    fn snapshot_semantics_ignores_own_instance() {
        // With identical devices the snapshot semantics herds both tasks to
        // device 1; per-task increments push the second task elsewhere.
        let mut state = OrchestratorState::new(2, CompositionMode::Additive, HyperParams::default());
        for id in 1..=2u32 {
            state.register_device(DeviceId(id), uniform_row(2, 0.05, 0.2), 0.0, smp_with_survival(9, 9));
        }
        let eligible = vec![DeviceId(1), DeviceId(2)];
        let snap = state.min_service_time_schedule(&two_task_profile(), &eligible).unwrap();
        assert_eq!(snap.task(1).device, DeviceId(1));
        assert_eq!(snap.task(2).device, DeviceId(1));
        state.count_semantics = CountSemantics::IncrementPerTask;
        let inc = state.min_service_time_schedule(&two_task_profile(), &eligible).unwrap();
        assert_eq!(inc.task(1).device, DeviceId(1));
        assert_eq!(inc.task(2).device, DeviceId(2));
    }

    fn bw_state(beta: f64) -> OrchestratorState {
        let params = HyperParams { beta, ..HyperParams::default() };
        let mut state = OrchestratorState::new(2, CompositionMode::Additive, params);
        // dev1 fast for task 1, dev2 fast for task 2
        let r1 = ProfileRow::from_pairs(2, vec![
            InterferencePair { slope: 0.0, intercept: 0.5 },
            InterferencePair { slope: 0.0, intercept: 0.5 },
            InterferencePair { slope: 0.0, intercept: 0.55 },
            InterferencePair { slope: 0.0, intercept: 0.55 },
        ]);
        let r2 = ProfileRow::from_pairs(2, vec![
            InterferencePair { slope: 0.0, intercept: 0.75 },
            InterferencePair { slope: 0.0, intercept: 0.75 },
            InterferencePair { slope: 0.0, intercept: 0.5 },
            InterferencePair { slope: 0.0, intercept: 0.5 },
        ]);
        state.register_device(DeviceId(1), r1, 0.0, smp_with_survival(9, 9));
        state.register_device(DeviceId(2), r2, 0.0, smp_with_survival(9, 9));
        state
    }

    #[test]
    fn bandwidth_move_within_beta() {
        // ST_min = 1.0 on dev2, ST on anchor = 1.10: relative increase 0.10
        // <= beta 0.15, so the member moves and carries the anchor estimate.
        let state = bw_state(0.15);
        let profile = two_task_profile();
        let a = state.min_service_time_schedule(&profile, &[DeviceId(1), DeviceId(2)]).unwrap();
        assert_eq!(a.task(1).device, DeviceId(1));
        assert_eq!(a.task(2).device, DeviceId(2));
        let reduced = state.reduce_bandwidth(&profile, a).unwrap();
        assert_eq!(reduced.task(2).device, DeviceId(1));
        assert!((reduced.task(2).expected_st.unwrap() - 1.10).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_never_moves_costlier_tasks() {
        let state = bw_state(0.0);
        let profile = two_task_profile();
        let a = state.min_service_time_schedule(&profile, &[DeviceId(1), DeviceId(2)]).unwrap();
        let reduced = state.reduce_bandwidth(&profile, a.clone()).unwrap();
        assert_eq!(reduced, a);
    }

    #[test]
    fn co_located_group_is_a_noop() {
        let state = bw_state(0.15);
        let profile = two_task_profile();
        let a = Assignment {
            tasks: vec![
                TaskAssignment { device: DeviceId(1), expected_st: Some(1.0) },
                TaskAssignment { device: DeviceId(1), expected_st: Some(1.1) },
            ],
        };
        let reduced = state.reduce_bandwidth(&profile, a.clone()).unwrap();
        assert_eq!(reduced, a);
    }

    fn feedback_state(n: usize, truth: &ProfileRow, factor: f64) -> OrchestratorState {
        let mut state = OrchestratorState::new(n, CompositionMode::Additive, HyperParams::default());
        let believed = ProfileRow::from_pairs(
            n,
            truth
                .entries()
                .iter()
                .map(|p| InterferencePair { slope: p.slope, intercept: p.intercept * factor })
                .collect(),
        );
        state.register_device(DeviceId(1), believed, 0.0, smp_with_survival(9, 9));
        state
    }

    #[test]
    fn perfect_prediction_never_updates() {
        let truth = uniform_row(2, 0.02, 0.3);
        let mut state = feedback_state(2, &truth, 1.0);
        let before = state.matrix.row(DeviceId(1)).unwrap().clone();
        let fired = state.online_readjust(&Feedback {
            task: 1,
            device: DeviceId(1),
            st_expected: 1.0,
            st_actual: 1.0,
            counts_at_dispatch: vec![1, 1],
        });
        assert!(!fired);
        assert_eq!(state.matrix.row(DeviceId(1)).unwrap(), &before);
    }

    #[test]
    fn error_below_delta_never_updates() {
        let truth = uniform_row(2, 0.02, 0.3);
        let mut state = feedback_state(2, &truth, 1.0);
        // |1.0 - 1.05| / 1.05 = 0.048 <= 0.10
        let fired = state.online_readjust(&Feedback {
            task: 1,
            device: DeviceId(1),
            st_expected: 1.0,
            st_actual: 1.05,
            counts_at_dispatch: vec![1, 1],
        });
        assert!(!fired);
    }

    #[test]
    fn perturbed_row_converges_within_200_events() {
        // Believed intercepts 50% high. The stationary count vector is chosen
        // so one gradient step contracts the error by ~10x (factor
        // 1 - 2*eta*(N + |x|^2) with |x|^2 = 39), and the truth slopes are
        // large enough that the non-negativity clamp never bites.
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let truth = ProfileRow::from_pairs(
            n,
            (0..n * n)
                .map(|_| InterferencePair {
                    slope: rng.random_range(0.15..0.20),
                    intercept: rng.random_range(0.20..0.35),
                })
                .collect(),
        );
        let mut state = feedback_state(n, &truth, 1.5);
        let x = vec![5u32, 3, 2, 1, 0, 0];
        for event in 0..200 {
            let task = event % n + 1;
            let actual = expected_service_time(task, &truth, &x, CompositionMode::Additive).unwrap();
            let predicted = expected_service_time(
                task,
                state.matrix.row(DeviceId(1)).unwrap(),
                &x,
                CompositionMode::Additive,
            )
            .unwrap();
            state.online_readjust(&Feedback {
                task,
                device: DeviceId(1),
                st_expected: predicted,
                st_actual: actual,
                counts_at_dispatch: x.clone(),
            });
        }
        // measure the worst per-task relative error after the feedback runs
        let final_err = (1..=n)
            .map(|task| {
                let actual =
                    expected_service_time(task, &truth, &x, CompositionMode::Additive).unwrap();
                let predicted = expected_service_time(
                    task,
                    state.matrix.row(DeviceId(1)).unwrap(),
                    &x,
                    CompositionMode::Additive,
                )
                .unwrap();
                (predicted - actual).abs() / actual
            })
            .fold(0.0, f64::max);
        assert!(final_err <= 0.05, "relative error after 200 events: {final_err}");
    }

    #[test]
    fn single_step_strictly_decreases_squared_loss() {
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(888);
        for _ in 0..100 {
            let truth = random_row(n, &mut rng);
            let factor = rng.random_range(1.2..1.8);
            let mut state = feedback_state(n, &truth, factor);
            let x: Vec<u32> = (0..n).map(|_| rng.random_range(0..=3)).collect();
            let task = rng.random_range(1..=n);
            let actual = expected_service_time(task, &truth, &x, CompositionMode::Additive).unwrap();
            let before = expected_service_time(
                task,
                state.matrix.row(DeviceId(1)).unwrap(),
                &x,
                CompositionMode::Additive,
            )
            .unwrap();
            let fired = state.online_readjust(&Feedback {
                task,
                device: DeviceId(1),
                st_expected: before,
                st_actual: actual,
                counts_at_dispatch: x.clone(),
            });
            assert!(fired);
            let after = expected_service_time(
                task,
                state.matrix.row(DeviceId(1)).unwrap(),
                &x,
                CompositionMode::Additive,
            )
            .unwrap();
            assert!(
                (after - actual).powi(2) < (before - actual).powi(2),
                "loss did not decrease: {before} -> {after} vs {actual}"
            );
        }
    }

    #[test]
    fn exit_then_rejoin_restores_row_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut state = OrchestratorState::new(3, CompositionMode::Additive, HyperParams::default());
        let row = random_row(3, &mut rng);
        state.register_device(DeviceId(5), row.clone(), 0.02, smp_with_survival(9, 9));
        state.device_exit(DeviceId(5)).unwrap();
        assert!(!state.is_registered(DeviceId(5)));
        assert!(state.has_archived(DeviceId(5)));
        state.device_rejoin(DeviceId(5)).unwrap();
        assert_eq!(state.matrix.row(DeviceId(5)).unwrap(), &row);
        assert_eq!(state.delays[&DeviceId(5)], 0.02);
        assert_eq!(state.counts.row(DeviceId(5)).unwrap(), &[0, 0, 0]);
    }

    #[test]
    fn rejoin_of_unknown_device_fails() {
        let mut state = OrchestratorState::new(2, CompositionMode::Additive, HyperParams::default());
        assert_eq!(
            state.device_rejoin(DeviceId(9)),
            Err(OrchestratorError::UnknownDevice(DeviceId(9)))
        );
        assert_eq!(
            state.device_exit(DeviceId(9)),
            Err(OrchestratorError::UnknownDevice(DeviceId(9)))
        );
    }

    #[test]
    fn scheduling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut state = OrchestratorState::new(2, CompositionMode::Additive, HyperParams::default());
        for id in 1..=4u32 {
            state.register_device(
                DeviceId(id),
                random_row(2, &mut rng),
                rng.random_range(0.0..0.02),
                smp_with_survival(9, 9),
            );
        }
        let profile = two_task_profile();
        let a = state.schedule_instance(&profile).unwrap();
        let b = state.schedule_instance(&profile).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_device_single_task_goes_there() {
        let mut state = OrchestratorState::new(1, CompositionMode::Marginal, HyperParams::default());
        state.register_device(DeviceId(7), uniform_row(1, 0.0, 0.4), 0.0, smp_with_survival(9, 9));
        let profile = ApplicationProfile {
            name: "one".into(),
            tasks: vec![crate::model::TaskType {
                index: 1,
                name: "t".into(),
                input_group: 1,
                base_service_time: 0.4,
            }],
        };
        let a = state.schedule_instance(&profile).unwrap();
        assert_eq!(a.task(1).device, DeviceId(7));
    }

    #[test]
    fn bandwidth_phase_bounded_by_beta_and_never_worse_on_overhead() {
        // random fleets: phase 3 must never raise the avoidable-transmission
        // count and never raise any task's expectation by more than beta
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let profile = crate::model::ApplicationProfile::heavy();
        for _ in 0..100 {
            let params =
                HyperParams { beta: rng.random_range(0.0..0.4), ..HyperParams::default() };
            let mut state = OrchestratorState::new(6, CompositionMode::Additive, params);
            for id in 0..6u32 {
                state.register_device(
                    DeviceId(id),
                    random_row(6, &mut rng),
                    rng.random_range(0.0..0.03),
                    smp_with_survival(9, 9),
                );
                for task in 1..=6 {
                    for _ in 0..rng.random_range(0..3u32) {
                        state.note_dispatch(DeviceId(id), task);
                    }
                }
            }
            let eligible: Vec<DeviceId> = (0..6).map(DeviceId).collect();
            let before = state.min_service_time_schedule(&profile, &eligible).unwrap();
            let after = state.reduce_bandwidth(&profile, before.clone()).unwrap();
            let spread = |a: &Assignment| -> usize {
                profile
                    .input_groups()
                    .iter()
                    .filter(|g| g.len() >= 2)
                    .map(|g| {
                        let mut devs: Vec<DeviceId> =
                            g.iter().map(|&t| a.task(t).device).collect();
                        devs.sort_unstable();
                        devs.dedup();
                        devs.len() - 1
                    })
                    .sum()
            };
            assert!(spread(&after) <= spread(&before));
            for task in 1..=6 {
                let b = before.task(task).expected_st.unwrap();
                let a = after.task(task).expected_st.unwrap();
                assert!(
                    a <= b * (1.0 + params.beta) + 1e-12,
                    "task {task} expectation grew {b} -> {a} beyond beta {}",
                    params.beta
                );
            }
        }
    }

    #[test]
    fn readjust_keeps_masks() {
        let truth = uniform_row(2, 0.02, 0.3);
        let mut state = feedback_state(2, &truth, 1.5);
        state
            .matrix
            .row_mut(DeviceId(1))
            .unwrap()
            .set(1, 2, InterferencePair { slope: 0.02, intercept: 0.45 }, EntryMask::Reconstructed);
        state.online_readjust(&Feedback {
            task: 1,
            device: DeviceId(1),
            st_expected: 1.5,
            st_actual: 1.0,
            counts_at_dispatch: vec![1, 1],
        });
        assert_eq!(state.matrix.row(DeviceId(1)).unwrap().mask_at(1, 2), EntryMask::Reconstructed);
        assert_eq!(state.matrix.row(DeviceId(1)).unwrap().mask_at(1, 1), EntryMask::Measured);
    }
}
