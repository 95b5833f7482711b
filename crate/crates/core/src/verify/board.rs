use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::clock::Clock;
use super::sampling::Sample;
use super::{
    Lease, PackageState, ReviewPackage, TaskKind, TaskPayload, TaskResult, TaskState, VerificationTask,
    VerifyError, VqaOutcome, UNANSWERABLE_ANSWER, WRONG_SEMANTIC_ANSWER,
};
use crate::region::{QaStatus, Region, Verification, VerificationStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardConfig {
    pub lease_ttl_ms: u64,
    pub package_size: usize,
    /// A package passes when at least this percentage is confirmed.
    pub pass_percent: u32,
    /// Candidates shown per tag-filter task.
    pub shown: usize,
}

impl Default for BoardConfig {
    fn default() -> Self {
        Self {
            lease_ttl_ms: 15 * 60 * 1000,
            package_size: 100,
            pass_percent: 95,
            shown: 5,
        }
    }
}

/// Serializable board state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoardSnapshot {
    pub config: Option<BoardConfig>,
    pub tasks: Vec<VerificationTask>,
    pub packages: Vec<ReviewPackage>,
    /// Submitted tasks not yet assigned to a package, in submission order.
    pub unpackaged: Vec<String>,
    pub regions: BTreeMap<String, Region>,
    /// Region records as they were when queued.
    #[serde(default)]
    pub originals: BTreeMap<String, Region>,
}

/// Task queue, leases and review packages. Every mutation goes through
/// `&mut self`, so wrapping the board in a mutex serializes transitions.
pub struct Board {
    cfg: BoardConfig,
    clock: Arc<dyn Clock>,
    tasks: Vec<VerificationTask>,
    by_id: HashMap<String, usize>,
    packages: Vec<ReviewPackage>,
    unpackaged: Vec<usize>,
    regions: BTreeMap<String, Region>,
    originals: BTreeMap<String, Region>,
}

impl Board {
    pub fn new(cfg: BoardConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            cfg,
            clock,
            tasks: Vec::new(),
            by_id: HashMap::new(),
            packages: Vec::new(),
            unpackaged: Vec::new(),
            regions: BTreeMap::new(),
            originals: BTreeMap::new(),
        }
    }

    pub fn restore(snapshot: BoardSnapshot, clock: Arc<dyn Clock>) -> Self {
        let mut b = Self::new(snapshot.config.unwrap_or_default(), clock);
        b.by_id = snapshot
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.task_id.clone(), i))
            .collect();
        b.unpackaged = snapshot.unpackaged.iter().filter_map(|id| b.by_id.get(id).copied()).collect();
        b.tasks = snapshot.tasks;
        b.packages = snapshot.packages;
        b.regions = snapshot.regions;
        b.originals = snapshot.originals;
        b
    }

    pub fn snapshot(&self) -> BoardSnapshot {
        BoardSnapshot {
            config: Some(self.cfg),
            tasks: self.tasks.clone(),
            packages: self.packages.clone(),
            unpackaged: self.unpackaged.iter().map(|&i| self.tasks[i].task_id.clone()).collect(),
            regions: self.regions.clone(),
            originals: self.originals.clone(),
        }
    }

    pub fn config(&self) -> BoardConfig {
        self.cfg
    }

    pub fn tasks(&self) -> &[VerificationTask] {
        &self.tasks
    }

    pub fn packages(&self) -> &[ReviewPackage] {
        &self.packages
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.get(id)
    }

    pub fn task(&self, id: &str) -> Option<&VerificationTask> {
        self.by_id.get(id).map(|&i| &self.tasks[i])
    }

    pub fn package(&self, id: &str) -> Option<&ReviewPackage> {
        self.packages.iter().find(|p| p.package_id == id)
    }

    fn push_task(&mut self, region: &Region, concept: &str, payload: TaskPayload) -> String {
        let task_id = format!("t{:06}", self.tasks.len() + 1);
        self.by_id.insert(task_id.clone(), self.tasks.len());
        self.tasks.push(VerificationTask {
            task_id: task_id.clone(),
            region_id: region.region_id.clone(),
            image_id: region.image_id.clone(),
            concept: concept.to_string(),
            payload,
            state: TaskState::Pending,
            lease: None,
            result: None,
            submitted_by: None,
            excluded_workers: Vec::new(),
        });
        task_id
    }

    /// Queues a tag-filter task and one QA check per pair for `region`.
    pub fn add_region(&mut self, region: Region, concept: &str) -> Vec<String> {
        let shown: Vec<String> = if region.matched_tags.is_empty() {
            &region.candidate_tags
        } else {
            &region.matched_tags
        }
        .iter()
        .take(self.cfg.shown)
        .map(|t| t.text.clone())
        .collect();
        let mut ids = vec![self.push_task(&region, concept, TaskPayload::TagFilter { candidates: shown })];
        for (i, qa) in region.qa_pairs.iter().enumerate() {
            if qa.status == QaStatus::Unverified {
                let payload = TaskPayload::VqaCheck {
                    qa_index: i,
                    qa: qa.clone(),
                };
                ids.push(self.push_task(&region, concept, payload));
            }
        }
        self.originals.insert(region.region_id.clone(), region.clone());
        self.regions.insert(region.region_id.clone(), region);
        ids
    }

    /// Queues tasks for every sampled region found in `lookup`.
    pub fn add_samples<'a>(&mut self, samples: &[Sample], lookup: impl Fn(&str) -> Option<&'a Region>) -> usize {
        let mut created = 0;
        for s in samples {
            for id in &s.region_ids {
                if let Some(r) = lookup(id) {
                    created += self.add_region(r.clone(), &s.concept).len();
                }
            }
        }
        created
    }

    fn set_state(&mut self, idx: usize, next: TaskState) {
        let t = &mut self.tasks[idx];
        assert!(
            t.state.can_transition(next),
            "illegal task transition {:?} -> {next:?}",
            t.state
        );
        t.state = next;
    }

    /// Returns expired leases to pending.
    pub fn expire_leases(&mut self) -> usize {
        let now = self.clock.now_ms();
        let expired: Vec<usize> = self
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.state == TaskState::Leased && t.lease.as_ref().is_some_and(|l| l.expires_at_ms <= now))
            .map(|(i, _)| i)
            .collect();
        for &i in &expired {
            self.set_state(i, TaskState::Pending);
            self.tasks[i].lease = None;
        }
        expired.len()
    }

    /// Leases the oldest available task of `kind`. At most one active lease
    /// per worker; a second attempt is a conflict.
    pub fn lease(&mut self, worker_id: &str, kind: TaskKind) -> Result<Option<VerificationTask>, VerifyError> {
        if worker_id.is_empty() {
            return Err(VerifyError::Invalid("worker_id is empty".into()));
        }
        self.expire_leases();
        if let Some(t) = self
            .tasks
            .iter()
            .find(|t| t.state == TaskState::Leased && t.lease.as_ref().is_some_and(|l| l.worker_id == worker_id))
        {
            return Err(VerifyError::Conflict(format!("{worker_id} already holds {}", t.task_id)));
        }
        let Some(idx) = self.tasks.iter().position(|t| {
            self.is_available(t) && t.kind() == kind && !t.excluded_workers.iter().any(|w| w == worker_id)
        }) else {
            return Ok(None);
        };
        self.set_state(idx, TaskState::Leased);
        self.tasks[idx].lease = Some(Lease {
            worker_id: worker_id.to_string(),
            expires_at_ms: self.clock.now_ms() + self.cfg.lease_ttl_ms,
        });
        Ok(Some(self.tasks[idx].clone()))
    }

    /// Stores a result and applies it to the region record. Returns the ids of
    /// regions changed.
    pub fn submit(&mut self, task_id: &str, worker_id: &str, result: TaskResult) -> Result<Vec<String>, VerifyError> {
        let idx = *self
            .by_id
            .get(task_id)
            .ok_or_else(|| VerifyError::NotFound(format!("task {task_id}")))?;
        let now = self.clock.now_ms();
        {
            let t = &self.tasks[idx];
            let lease = match (&t.state, &t.lease) {
                (TaskState::Leased, Some(l)) => l,
                _ => return Err(VerifyError::Conflict(format!("task {task_id} is not leased"))),
            };
            if lease.worker_id != worker_id {
                return Err(VerifyError::Forbidden(format!("task {task_id} is leased by another worker")));
            }
            if lease.expires_at_ms <= now {
                self.set_state(idx, TaskState::Pending);
                self.tasks[idx].lease = None;
                return Err(VerifyError::Expired(task_id.to_string()));
            }
            if result.kind() != t.kind() {
                return Err(VerifyError::Invalid(format!(
                    "result for {:?} submitted to a {:?} task",
                    result.kind(),
                    t.kind()
                )));
            }
        }
        self.apply(idx, worker_id, &result)?;
        self.set_state(idx, TaskState::Submitted);
        let t = &mut self.tasks[idx];
        t.lease = None;
        t.result = Some(result);
        t.submitted_by = Some(worker_id.to_string());
        let region_id = t.region_id.clone();
        self.unpackaged.push(idx);
        if self.unpackaged.len() >= self.cfg.package_size {
            self.close_package();
        } else if !self.has_open_work() {
            // nothing left to submit: the remainder forms a partial package
            self.close_package();
        }
        Ok(vec![region_id])
    }

    fn apply(&mut self, idx: usize, worker_id: &str, result: &TaskResult) -> Result<(), VerifyError> {
        let task = self.tasks[idx].clone();
        let region = self
            .regions
            .get_mut(&task.region_id)
            .ok_or_else(|| VerifyError::NotFound(format!("region {}", task.region_id)))?;
        let mut spawn = None;
        match (&task.payload, result) {
            (TaskPayload::TagFilter { candidates }, TaskResult::TagFilter { selected }) => {
                if let Some(bad) = selected.iter().find(|s| !candidates.contains(s)) {
                    return Err(VerifyError::Invalid(format!("{bad:?} was not shown")));
                }
                let confirmed: Vec<String> = candidates.iter().filter(|c| selected.contains(c)).cloned().collect();
                let negatives: Vec<String> = candidates.iter().filter(|c| !selected.contains(c)).cloned().collect();
                // rejected tags are filtered out of the ranked list
                region.matched_tags.retain(|t| !negatives.contains(&t.text));
                region.verification = Verification {
                    status: VerificationStatus::HumanVerified,
                    shown: candidates.clone(),
                    confirmed,
                    negatives,
                    annotator: Some(worker_id.to_string()),
                };
            }
            (TaskPayload::VqaCheck { qa_index, qa }, TaskResult::VqaCheck { outcome, .. }) => {
                let slot = region
                    .qa_pairs
                    .get_mut(*qa_index)
                    .ok_or_else(|| VerifyError::NotFound(format!("qa pair {qa_index}")))?;
                *slot = qa.clone();
                slot.transition(outcome.status())
                    .map_err(|e| VerifyError::Invalid(e.to_string()))?;
                match outcome {
                    VqaOutcome::Unanswerable => slot.answer = UNANSWERABLE_ANSWER.into(),
                    VqaOutcome::WrongSemantic => slot.answer = WRONG_SEMANTIC_ANSWER.into(),
                    VqaOutcome::WrongAnswer => {
                        spawn = Some(TaskPayload::VqaCorrect {
                            qa_index: *qa_index,
                            qa: slot.clone(),
                        })
                    }
                    VqaOutcome::Correct => {}
                }
            }
            (TaskPayload::VqaCorrect { qa_index, .. }, TaskResult::VqaCorrect { answer }) => {
                if answer.trim().is_empty() {
                    return Err(VerifyError::Invalid("corrected answer is empty".into()));
                }
                let slot = region
                    .qa_pairs
                    .get_mut(*qa_index)
                    .ok_or_else(|| VerifyError::NotFound(format!("qa pair {qa_index}")))?;
                if slot.status != QaStatus::WrongAnswer {
                    return Err(VerifyError::Conflict(format!("qa pair {qa_index} is not awaiting correction")));
                }
                slot.transition(QaStatus::HumanCorrected)
                    .map_err(|e| VerifyError::Invalid(e.to_string()))?;
                slot.answer = answer.trim().to_string();
            }
            _ => return Err(VerifyError::Invalid("result does not fit the task".into())),
        }
        if let Some(payload) = spawn {
            // a correction still waiting from an earlier round is reused
            let waiting = self.tasks.iter().position(|t| {
                t.region_id == task.region_id
                    && matches!(t.state, TaskState::Pending | TaskState::Requeued | TaskState::Leased)
                    && matches!((&t.payload, &payload),
                        (TaskPayload::VqaCorrect { qa_index: a, .. }, TaskPayload::VqaCorrect { qa_index: b, .. }) if a == b)
            });
            match waiting {
                Some(i) => self.tasks[i].payload = payload,
                None => {
                    let region = self.regions[&task.region_id].clone();
                    self.push_task(&region, &task.concept, payload);
                }
            }
        }
        Ok(())
    }

    /// Whether any task can still be leased or submitted.
    pub fn has_open_work(&self) -> bool {
        self.tasks
            .iter()
            .any(|t| t.state == TaskState::Leased || self.is_available(t))
    }

    /// Pending or requeued, and for corrections, the question is still
    /// marked wrong. A correction whose check was rolled back stays dormant.
    fn is_available(&self, t: &VerificationTask) -> bool {
        if !matches!(t.state, TaskState::Pending | TaskState::Requeued) {
            return false;
        }
        match &t.payload {
            TaskPayload::VqaCorrect { qa_index, .. } => {
                self.is_latest_correction(t)
                    && self
                        .regions
                        .get(&t.region_id)
                        .and_then(|r| r.qa_pairs.get(*qa_index))
                        .is_some_and(|qa| qa.status == QaStatus::WrongAnswer)
            }
            _ => true,
        }
    }

    /// Whether `t` is the newest correction task for its question.
    fn is_latest_correction(&self, t: &VerificationTask) -> bool {
        let TaskPayload::VqaCorrect { qa_index, .. } = &t.payload else { return false };
        let newest = self.tasks.iter().rev().find(|o| {
            o.region_id == t.region_id && matches!(&o.payload, TaskPayload::VqaCorrect { qa_index: q, .. } if q == qa_index)
        });
        newest.is_some_and(|o| o.task_id == t.task_id)
    }

    /// Packages all unpackaged submitted tasks (a partial final package).
    pub fn close_package(&mut self) -> Option<String> {
        if self.unpackaged.is_empty() {
            return None;
        }
        let take = self.unpackaged.len().min(self.cfg.package_size);
        let members: Vec<usize> = self.unpackaged.drain(..take).collect();
        let package_id = format!("p{:04}", self.packages.len() + 1);
        self.packages.push(ReviewPackage {
            package_id: package_id.clone(),
            task_ids: members.iter().map(|&i| self.tasks[i].task_id.clone()).collect(),
            expert_id: None,
            accuracy: None,
            confirmed: None,
            state: PackageState::Open,
        });
        Some(package_id)
    }

    /// Records an expert's per-task verdicts. Failing packages send their
    /// tasks back for a different annotator.
    pub fn review(&mut self, package_id: &str, expert_id: &str, verdicts: &[bool]) -> Result<ReviewPackage, VerifyError> {
        let pi = self
            .packages
            .iter()
            .position(|p| p.package_id == package_id)
            .ok_or_else(|| VerifyError::NotFound(format!("package {package_id}")))?;
        let pkg = &self.packages[pi];
        if pkg.state != PackageState::Open {
            return Err(VerifyError::Conflict(format!("package {package_id} already reviewed")));
        }
        if verdicts.len() != pkg.task_ids.len() {
            return Err(VerifyError::Invalid(format!(
                "{} verdicts for {} tasks",
                verdicts.len(),
                pkg.task_ids.len()
            )));
        }
        let members: Vec<usize> = pkg.task_ids.iter().map(|id| self.by_id[id]).collect();
        if let Some(&i) = members.iter().find(|&&i| self.tasks[i].state != TaskState::Submitted) {
            return Err(VerifyError::Conflict(format!("task {} is not submitted", self.tasks[i].task_id)));
        }
        let confirmed = verdicts.iter().filter(|v| **v).count();
        let passed = confirmed as u64 * 100 >= self.cfg.pass_percent as u64 * verdicts.len() as u64;
        for &i in &members {
            if passed {
                self.set_state(i, TaskState::Reviewed);
            } else {
                self.set_state(i, TaskState::Requeued);
                let t = &mut self.tasks[i];
                if let Some(w) = t.submitted_by.take() {
                    if !t.excluded_workers.contains(&w) {
                        t.excluded_workers.push(w);
                    }
                }
                t.result = None;
                let t = t.clone();
                self.revert(&t);
            }
        }
        let pkg = &mut self.packages[pi];
        pkg.expert_id = Some(expert_id.to_string());
        pkg.confirmed = Some(confirmed);
        pkg.accuracy = Some(confirmed as f64 / verdicts.len() as f64);
        pkg.state = if passed { PackageState::Passed } else { PackageState::Failed };
        Ok(pkg.clone())
    }

    /// Undoes the region change of a task whose package failed.
    fn revert(&mut self, task: &VerificationTask) {
        let latest = self.is_latest_correction(task);
        let Some(region) = self.regions.get_mut(&task.region_id) else { return };
        match &task.payload {
            TaskPayload::TagFilter { .. } => {
                if let Some(orig) = self.originals.get(&task.region_id) {
                    region.matched_tags = orig.matched_tags.clone();
                    region.verification = orig.verification.clone();
                }
            }
            TaskPayload::VqaCheck { qa_index, qa } => {
                if let Some(slot) = region.qa_pairs.get_mut(*qa_index) {
                    *slot = qa.clone();
                }
            }
            TaskPayload::VqaCorrect { qa_index, qa } => {
                // a superseded correction no longer owns the question
                if !latest {
                    return;
                }
                if let Some(slot) = region.qa_pairs.get_mut(*qa_index) {
                    *slot = qa.clone();
                }
            }
        }
    }

    /// Task count per state.
    pub fn counts(&self) -> BTreeMap<TaskState, usize> {
        let mut m = BTreeMap::new();
        for t in &self.tasks {
            *m.entry(t.state).or_insert(0) += 1;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::region::{ProposalSource, QaPair, SemanticTag, TagSource};
    use crate::verify::clock::ManualClock;

    fn region(i: usize) -> Region {
        let b = BoundingBox::new(i as f64, 0.0, i as f64 + 30.0, 30.0).unwrap();
        let tags: Vec<SemanticTag> = ["person", "backpack", "chair", "floor", "cup", "lamp"]
            .iter()
            .enumerate()
            .map(|(k, t)| {
                SemanticTag::new(t, TagSource::Magnifier)
                    .unwrap()
                    .with_align_score(0.9 - k as f64 * 0.1)
                    .unwrap()
            })
            .collect();
        let mut r = Region::new("img", b, ProposalSource::ClassAgnostic).with_tags(tags.clone());
        r.matched_tags = tags[..5].to_vec();
        r.qa_pairs = vec![QaPair::unverified("What color is the person?", "The person is red.")];
        r
    }

    fn board(clock: Arc<ManualClock>) -> Board {
        Board::new(
            BoardConfig {
                lease_ttl_ms: 1000,
                ..Default::default()
            },
            clock,
        )
    }

    #[test]
    fn fifo_leasing() {
        let clock = Arc::new(ManualClock::new(0));
        let mut b = board(clock);
        for i in 0..3 {
            b.add_region(region(i), "person");
        }
        let mut order = Vec::new();
        for w in ["w1", "w2", "w3"] {
            order.push(b.lease(w, TaskKind::TagFilter).unwrap().unwrap().task_id);
        }
        assert_eq!(order, ["t000001", "t000003", "t000005"]);
    }

    #[test]
    fn second_lease_conflicts_and_expiry_returns_task() {
        let clock = Arc::new(ManualClock::new(0));
        let mut b = board(clock.clone());
        b.add_region(region(0), "person");
        let t = b.lease("w1", TaskKind::TagFilter).unwrap().unwrap();
        assert!(matches!(b.lease("w1", TaskKind::VqaCheck), Err(VerifyError::Conflict(_))));
        assert!(b.lease("w2", TaskKind::TagFilter).unwrap().is_none());
        clock.advance(1000);
        let again = b.lease("w2", TaskKind::TagFilter).unwrap().unwrap();
        assert_eq!(again.task_id, t.task_id);
        let err = b.submit(&t.task_id, "w1", TaskResult::TagFilter { selected: vec![] });
        assert!(matches!(err, Err(VerifyError::Forbidden(_))));
    }

    #[test]
    fn expired_submit_is_rejected() {
        let clock = Arc::new(ManualClock::new(0));
        let mut b = board(clock.clone());
        b.add_region(region(0), "person");
        let t = b.lease("w1", TaskKind::TagFilter).unwrap().unwrap();
        clock.advance(5000);
        let err = b.submit(&t.task_id, "w1", TaskResult::TagFilter { selected: vec![] });
        assert!(matches!(err, Err(VerifyError::Expired(_))));
        assert_eq!(b.task(&t.task_id).unwrap().state, TaskState::Pending);
    }

    #[test]
    fn tag_filter_records_negatives() {
        let clock = Arc::new(ManualClock::new(0));
        let mut b = board(clock);
        let r = region(0);
        let id = r.region_id.clone();
        b.add_region(r, "person");
        let t = b.lease("w1", TaskKind::TagFilter).unwrap().unwrap();
        let all: Vec<String> = ["person", "backpack", "chair", "floor", "cup"].map(String::from).to_vec();
        b.submit(&t.task_id, "w1", TaskResult::TagFilter { selected: all }).unwrap();
        let v = &b.region(&id).unwrap().verification;
        assert!(v.negatives.is_empty());
        assert_eq!(v.confirmed.len(), 5);

        let mut b2 = board(Arc::new(ManualClock::new(0)));
        b2.add_region(region(0), "person");
        let t = b2.lease("w1", TaskKind::TagFilter).unwrap().unwrap();
        b2.submit(&t.task_id, "w1", TaskResult::TagFilter { selected: vec!["backpack".into()] })
            .unwrap();
        let r = b2.region(&id).unwrap();
        assert_eq!(r.verification.negatives, ["person", "chair", "floor", "cup"]);
        assert_eq!(r.top1().unwrap().text, "backpack");
    }

    fn check_outcome(outcome: VqaOutcome) -> (Board, String) {
        let mut b = board(Arc::new(ManualClock::new(0)));
        let r = region(0);
        let id = r.region_id.clone();
        b.add_region(r, "person");
        let t = b.lease("w1", TaskKind::VqaCheck).unwrap().unwrap();
        b.submit(&t.task_id, "w1", TaskResult::VqaCheck { outcome, correction: None })
            .unwrap();
        (b, id)
    }

    #[test]
    fn rejection_answers_are_verbatim() {
        let (b, id) = check_outcome(VqaOutcome::Unanswerable);
        assert_eq!(b.region(&id).unwrap().qa_pairs[0].answer, UNANSWERABLE_ANSWER);
        let (b, id) = check_outcome(VqaOutcome::WrongSemantic);
        assert_eq!(b.region(&id).unwrap().qa_pairs[0].answer, WRONG_SEMANTIC_ANSWER);
    }

    #[test]
    fn wrong_answer_spawns_correction() {
        let (mut b, id) = check_outcome(VqaOutcome::WrongAnswer);
        let c = b.lease("w2", TaskKind::VqaCorrect).unwrap().unwrap();
        b.submit(&c.task_id, "w2", TaskResult::VqaCorrect { answer: "The person is blue.".into() })
            .unwrap();
        let qa = &b.region(&id).unwrap().qa_pairs[0];
        assert_eq!(qa.status, QaStatus::HumanCorrected);
        assert_eq!(qa.answer, "The person is blue.");
    }

    #[test]
    fn redone_check_reuses_its_waiting_correction() {
        let (mut b, _) = check_outcome(VqaOutcome::WrongAnswer);
        assert_eq!(b.tasks().len(), 3);
        let p = b.close_package().unwrap();
        b.review(&p, "e1", &[false]).unwrap();
        // the question is back to unverified, so its correction is dormant
        assert!(b.lease("w2", TaskKind::VqaCorrect).unwrap().is_none());
        let t = b.lease("w2", TaskKind::VqaCheck).unwrap().unwrap();
        b.submit(&t.task_id, "w2", TaskResult::VqaCheck { outcome: VqaOutcome::WrongAnswer, correction: None })
            .unwrap();
        assert_eq!(b.tasks().len(), 3);
        assert!(b.lease("w1", TaskKind::VqaCorrect).unwrap().is_some());
    }

    fn package_with(confirmed: usize) -> (Board, ReviewPackage) {
        let mut b = Board::new(BoardConfig::default(), Arc::new(ManualClock::new(0)));
        for i in 0..100 {
            let mut r = region(i);
            r.qa_pairs.clear();
            b.add_region(r, "person");
        }
        for _ in 0..100 {
            let t = b.lease("w1", TaskKind::TagFilter).unwrap().unwrap();
            b.submit(&t.task_id, "w1", TaskResult::TagFilter { selected: vec!["person".into()] })
                .unwrap();
        }
        assert_eq!(b.packages().len(), 1);
        let verdicts: Vec<bool> = (0..100).map(|i| i < confirmed).collect();
        let p = b.review("p0001", "e1", &verdicts).unwrap();
        (b, p)
    }

    #[test]
    fn threshold_boundaries() {
        assert_eq!(package_with(94).1.state, PackageState::Failed);
        assert_eq!(package_with(95).1.state, PackageState::Passed);
        assert_eq!(package_with(96).1.state, PackageState::Passed);
    }

    #[test]
    fn failed_package_requeues_away_from_original_worker() {
        let (mut b, _) = package_with(94);
        assert_eq!(b.counts().get(&TaskState::Requeued), Some(&100));
        assert!(b.lease("w1", TaskKind::TagFilter).unwrap().is_none());
        assert!(b.lease("w2", TaskKind::TagFilter).unwrap().is_some());
        assert!(b.regions().all(|r| !r.verification.is_verified()));
    }

    #[test]
    fn verdict_count_must_match() {
        let mut b = board(Arc::new(ManualClock::new(0)));
        b.add_region(region(0), "person");
        let t = b.lease("w1", TaskKind::TagFilter).unwrap().unwrap();
        b.submit(&t.task_id, "w1", TaskResult::TagFilter { selected: vec![] }).unwrap();
        assert!(b.packages().is_empty());
        let vqa = b.lease("w1", TaskKind::VqaCheck).unwrap().unwrap();
        b.submit(&vqa.task_id, "w1", TaskResult::VqaCheck { outcome: VqaOutcome::Correct, correction: None })
            .unwrap();
        let p = b.packages()[0].package_id.clone();
        assert!(matches!(b.review(&p, "e", &[true, true, true]), Err(VerifyError::Invalid(_))));
        assert_eq!(b.review(&p, "e", &[true, true]).unwrap().state, PackageState::Passed);
    }

    #[test]
    fn snapshot_round_trip() {
        let clock = Arc::new(ManualClock::new(0));
        let mut b = board(clock.clone());
        b.add_region(region(0), "person");
        b.lease("w1", TaskKind::TagFilter).unwrap();
        let snap = b.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: BoardSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(Board::restore(back, clock).snapshot(), snap);
    }
}
