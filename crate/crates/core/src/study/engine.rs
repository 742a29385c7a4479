use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::assist::{assist_payload, AssistPayload};
use super::clock::{Clock, DAY, SECOND};
use super::log::{EventStore, LoggedEvent, Snapshot};
use super::plan::{compose_exam, presentation_order, randomize_groups, ExamList, StudyPlan};
use super::pool::{PoolCase, Pools};
use super::{Arm, ExamSet, Participant, Phase, StudyError, Tier};
use crate::exec::{stable_hash, Exec};
use crate::fusion::Diagnosis;
use crate::synth::render_schematic;

/// One answered case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisEvent {
    pub participant: String,
    pub cycle: u32,
    pub phase: Phase,
    pub set: ExamSet,
    pub case_id: String,
    pub diagnosis: Diagnosis,
    pub served_at: i64,
    pub answered_at: i64,
    /// Server-measured, at least 1 ms.
    pub elapsed_ms: i64,
    /// As reported by the client, kept for audit only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_elapsed_ms: Option<i64>,
    /// The assistant's recommendation when it was shown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist_recommendation: Option<Diagnosis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist_hash: Option<String>,
}

impl DiagnosisEvent {
    pub fn followed_ai(&self) -> Option<bool> {
        self.assist_recommendation.map(|r| r == self.diagnosis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    StudyCreated { plan: Box<StudyPlan>, pool_digest: String },
    Enrolled { participant: Participant },
    Randomized { assignments: BTreeMap<String, Arm>, single_arm_tiers: Vec<Tier> },
    CycleOpened { cycle: u32, exam: ExamList, training: Vec<String> },
    CycleClosed { cycle: u32 },
    SessionStarted { token: String, participant: String, cycle: u32, phase: Phase, client_id: String, assisted: bool, order: Vec<String> },
    CaseServed { token: String, case_id: String },
    Answered(DiagnosisEvent),
    DuplicateRejected { token: String, case_id: String, diagnosis: Diagnosis },
    SessionCompleted { token: String },
    SessionExpired { token: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
    Expired,
}

/// Server-side state of one reading session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub participant: String,
    pub cycle: u32,
    pub phase: Phase,
    pub client_id: String,
    pub assisted: bool,
    pub started_at: i64,
    pub deadline: i64,
    pub order: Vec<String>,
    /// Index into `order` of the next case to serve.
    pub cursor: usize,
    /// Served and not yet answered, with the serving time.
    pub pending: Option<(String, i64)>,
    pub answered: BTreeSet<String>,
    pub status: SessionStatus,
}

/// What a client learns about its session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub token: String,
    pub participant: String,
    pub cycle: u32,
    pub phase: Phase,
    pub assisted: bool,
    pub total: usize,
    pub answered: usize,
    pub deadline_ms: i64,
    pub status: SessionStatus,
}

impl Session {
    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            token: self.token.clone(),
            participant: self.participant.clone(),
            cycle: self.cycle,
            phase: self.phase,
            assisted: self.assisted,
            total: self.order.len(),
            answered: self.answered.len(),
            deadline_ms: self.deadline,
            status: self.status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub image_id: String,
    /// Schematic SVG of the image.
    pub rendering: String,
}

/// Blinded case as shown to a reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePayload {
    pub case_id: String,
    /// 1-based.
    pub position: usize,
    pub remaining: usize,
    pub gestational_week: u8,
    pub images: Vec<ImagePayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assist: Option<AssistPayload>,
    /// Set when the session is assisted but this case has no model result.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub assist_unavailable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextCase {
    Case(Box<CasePayload>),
    Completed { answered: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub case_id: String,
    pub elapsed_ms: i64,
    pub answered: usize,
    pub remaining: usize,
    /// Reference diagnosis, revealed only as training feedback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Diagnosis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleState {
    pub opened_at: i64,
    pub closed_at: Option<i64>,
    pub exam: ExamList,
    pub training: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct State {
    time_limit_ms: i64,
    participants: BTreeMap<String, Participant>,
    randomized: bool,
    single_arm_tiers: Vec<Tier>,
    cycles: BTreeMap<u32, CycleState>,
    sessions: BTreeMap<String, Session>,
    answers: Vec<DiagnosisEvent>,
    duplicates: usize,
}

impl State {
    fn apply(&mut self, at: i64, event: &Event) {
        match event {
            Event::StudyCreated { .. } => {}
            Event::Enrolled { participant } => {
                self.participants.insert(participant.id.clone(), participant.clone());
            }
            Event::Randomized { assignments, single_arm_tiers } => {
                for (id, arm) in assignments {
                    if let Some(p) = self.participants.get_mut(id) {
                        p.arm = Some(*arm);
                    }
                }
                self.single_arm_tiers = single_arm_tiers.clone();
                self.randomized = true;
            }
            Event::CycleOpened { cycle, exam, training } => {
                self.cycles.insert(
                    *cycle,
                    CycleState { opened_at: at, closed_at: None, exam: exam.clone(), training: training.clone() },
                );
            }
            Event::CycleClosed { cycle } => {
                if let Some(c) = self.cycles.get_mut(cycle) {
                    c.closed_at = Some(at);
                }
            }
            Event::SessionStarted { token, participant, cycle, phase, client_id, assisted, order } => {
                self.sessions.insert(
                    token.clone(),
                    Session {
                        token: token.clone(),
                        participant: participant.clone(),
                        cycle: *cycle,
                        phase: *phase,
                        client_id: client_id.clone(),
                        assisted: *assisted,
                        started_at: at,
                        deadline: at + self.time_limit_ms,
                        order: order.clone(),
                        cursor: 0,
                        pending: None,
                        answered: BTreeSet::new(),
                        status: SessionStatus::Active,
                    },
                );
            }
            Event::CaseServed { token, case_id } => {
                if let Some(s) = self.sessions.get_mut(token) {
                    s.cursor += 1;
                    s.pending = Some((case_id.clone(), at));
                }
            }
            Event::Answered(d) => {
                let token = session_token(&d.participant, d.cycle, d.phase);
                if let Some(s) = self.sessions.get_mut(&token) {
                    s.pending = None;
                    s.answered.insert(d.case_id.clone());
                }
                self.answers.push(d.clone());
            }
            Event::DuplicateRejected { .. } => self.duplicates += 1,
            Event::SessionCompleted { token } => {
                if let Some(s) = self.sessions.get_mut(token) {
                    s.status = SessionStatus::Completed;
                }
            }
            Event::SessionExpired { token } => {
                if let Some(s) = self.sessions.get_mut(token) {
                    s.status = SessionStatus::Expired;
                    s.pending = None;
                }
            }
        }
    }
}

/// Deterministic, so a client that reconnects after a restart keeps its
/// token.
fn session_token(participant: &str, cycle: u32, phase: Phase) -> String {
    let phase = match phase {
        Phase::Training => "training",
        Phase::Exam => "exam",
    };
    hex::encode(&Sha256::digest(format!("{participant}\u{1f}{cycle}\u{1f}{phase}"))[..16])
}

/// A study: plan, case pools, event log and the state derived from it.
pub struct Study {
    plan: StudyPlan,
    pools: Arc<Pools>,
    clock: Arc<dyn Clock>,
    store: EventStore,
    state: State,
    snapshot_every: u64,
}

impl std::fmt::Debug for Study {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Study").field("name", &self.plan.name).field("events", &self.store.len()).finish()
    }
}

impl Study {
    /// Starts a new study on an empty store.
    pub fn create(plan: StudyPlan, store: EventStore, clock: Arc<dyn Clock>, exec: Exec) -> Result<Self, StudyError> {
        plan.validate()?;
        if !store.is_empty() {
            return Err(StudyError::Log("store already holds a study".into()));
        }
        let pools = Arc::new(Pools::generate(&plan, exec)?);
        Self::create_with_pools(plan, pools, store, clock)
    }

    /// As [`Study::create`], reusing pools generated for an equivalent plan.
    pub fn create_with_pools(
        plan: StudyPlan,
        pools: Arc<Pools>,
        store: EventStore,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, StudyError> {
        plan.validate()?;
        if !store.is_empty() {
            return Err(StudyError::Log("store already holds a study".into()));
        }
        if !pools.matches(&plan) {
            return Err(StudyError::Plan("pools were generated from different pool settings".into()));
        }
        let state = State { time_limit_ms: plan.time_limit_seconds as i64 * SECOND, ..State::default() };
        let mut study = Self { plan, pools, clock, store, state, snapshot_every: 500 };
        let ev = Event::StudyCreated { plan: Box::new(study.plan.clone()), pool_digest: study.pools.digest().into() };
        study.append(ev)?;
        Ok(study)
    }

    /// Rebuilds a study from its log, starting from the newest usable
    /// snapshot.
    pub fn open(store: EventStore, clock: Arc<dyn Clock>, exec: Exec) -> Result<Self, StudyError> {
        let first = store.events().first().ok_or_else(|| StudyError::Log("empty event log".into()))?;
        let Event::StudyCreated { plan, pool_digest } = &first.event else {
            return Err(StudyError::Log("log does not start with study creation".into()));
        };
        let plan = (**plan).clone();
        plan.validate()?;
        let pools = Arc::new(Pools::generate(&plan, exec)?);
        if pools.digest() != pool_digest {
            return Err(StudyError::Log("regenerated case pools do not match the log".into()));
        }
        let mut state = State { time_limit_ms: plan.time_limit_seconds as i64 * SECOND, ..State::default() };
        let mut from = 0;
        if let Some(snap) = store.snapshot() {
            if snap.pool_digest == *pool_digest && (snap.seq as usize) <= store.len() {
                if let Ok(s) = serde_json::from_value::<State>(snap.state.clone()) {
                    state = s;
                    from = snap.seq as usize;
                }
            }
        }
        for e in &store.events()[from..] {
            state.apply(e.at, &e.event);
        }
        Ok(Self { plan, pools, clock, store, state, snapshot_every: 500 })
    }

    /// Events between snapshots when backed by a directory.
    pub fn set_snapshot_interval(&mut self, every: u64) {
        self.snapshot_every = every.max(1);
    }

    fn append(&mut self, event: Event) -> Result<&LoggedEvent, StudyError> {
        let at = self.clock.now_ms();
        // Persist first so a failed write leaves the state untouched.
        let seq = self.store.append(at, event)?;
        let logged = self.store.events().last().expect("just appended");
        self.state.apply(logged.at, &logged.event);
        if self.store.is_persistent() && seq % self.snapshot_every == 0 {
            self.checkpoint()?;
        }
        Ok(self.store.events().last().expect("just appended"))
    }

    /// Writes a snapshot of the current state. No-op for in-memory stores.
    pub fn checkpoint(&mut self) -> Result<(), StudyError> {
        if !self.store.is_persistent() {
            return Ok(());
        }
        let snap = Snapshot {
            seq: self.store.len() as u64,
            pool_digest: self.pools.digest().into(),
            state: serde_json::to_value(&self.state).map_err(|e| StudyError::Log(e.to_string()))?,
        };
        self.store.write_snapshot(&snap)
    }

    pub fn plan(&self) -> &StudyPlan {
        &self.plan
    }

    pub fn pools(&self) -> &Pools {
        &self.pools
    }

    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    pub fn events(&self) -> &[LoggedEvent] {
        self.store.events()
    }

    pub fn participants(&self) -> impl Iterator<Item = &Participant> {
        self.state.participants.values()
    }

    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.state.participants.get(id)
    }

    pub fn answers(&self) -> &[DiagnosisEvent] {
        &self.state.answers
    }

    pub fn duplicate_submissions(&self) -> usize {
        self.state.duplicates
    }

    pub fn cycle(&self, cycle: u32) -> Option<&CycleState> {
        self.state.cycles.get(&cycle)
    }

    pub fn single_arm_tiers(&self) -> &[Tier] {
        &self.state.single_arm_tiers
    }

    pub fn session(&self, token: &str) -> Option<&Session> {
        self.state.sessions.get(token)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.state.sessions.values()
    }

    pub fn enroll(&mut self, id: &str, tier: Tier) -> Result<&Participant, StudyError> {
        if id.is_empty() || id.len() > 64 || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(StudyError::State(format!("invalid participant id {id:?}")));
        }
        if self.state.participants.contains_key(id) {
            return Err(StudyError::AlreadyEnrolled(id.into()));
        }
        if !self.state.cycles.is_empty() || self.state.randomized {
            return Err(StudyError::State("enrollment closes at randomization or the first cycle".into()));
        }
        self.append(Event::Enrolled { participant: Participant::new(id, tier) })?;
        Ok(&self.state.participants[id])
    }

    pub fn randomize(&mut self, allow_single_arm: bool) -> Result<BTreeMap<String, Arm>, StudyError> {
        if self.state.randomized {
            return Err(StudyError::State("already randomized".into()));
        }
        if !self.state.cycles.is_empty() {
            return Err(StudyError::State("randomization must precede the first cycle".into()));
        }
        if self.state.participants.is_empty() {
            return Err(StudyError::State("no participants enrolled".into()));
        }
        let ps: Vec<Participant> = self.state.participants.values().cloned().collect();
        let r = randomize_groups(&ps, self.plan.seed, allow_single_arm)?;
        let out = r.assignments.clone();
        self.append(Event::Randomized { assignments: r.assignments, single_arm_tiers: r.single_arm_tiers })?;
        Ok(out)
    }

    pub fn open_cycle(&mut self, cycle: u32) -> Result<&CycleState, StudyError> {
        let expected = self.state.cycles.keys().last().map_or(1, |c| c + 1);
        if cycle != expected || cycle > self.plan.cycles {
            return Err(StudyError::State(format!("next cycle to open is {expected} of {}", self.plan.cycles)));
        }
        if self.state.participants.is_empty() {
            return Err(StudyError::State("no participants enrolled".into()));
        }
        if self.plan.uses_arms() && !self.state.randomized {
            return Err(StudyError::State("participants must be randomized first".into()));
        }
        if let Some(prev) = self.state.cycles.get(&(cycle - 1)) {
            let closed = prev.closed_at.ok_or_else(|| StudyError::State(format!("cycle {} is still open", cycle - 1)))?;
            let not_before = closed + self.plan.washout_days as i64 * DAY;
            if self.clock.now_ms() < not_before {
                return Err(StudyError::Washout { cycle, not_before_ms: not_before });
            }
        }
        let seed = self.plan.seed;
        let exam_labels = Pools::labels(&self.pools.exam);
        let fixed = match self.state.cycles.get(&1) {
            Some(c) => c.exam.fixed.clone(),
            None => compose_exam(&exam_labels, &self.plan.fixed, &[], &BTreeSet::new(), seed ^ 0xf1)?.sampled,
        };
        let used_random: BTreeSet<String> =
            self.state.cycles.values().flat_map(|c| c.exam.sampled.iter().cloned()).collect();
        let exam = compose_exam(&exam_labels, &self.plan.random, &fixed, &used_random, seed ^ (0x4a << 8 | cycle as u64))?;
        let training = match &self.plan.training {
            Some(t) => {
                let used: BTreeSet<String> =
                    self.state.cycles.values().flat_map(|c| c.training.iter().cloned()).collect();
                let labels = Pools::labels(&self.pools.training);
                compose_exam(&labels, &t.cases, &[], &used, seed ^ (0x7c << 8 | cycle as u64))?.sampled
            }
            None => Vec::new(),
        };
        self.append(Event::CycleOpened { cycle, exam, training })?;
        Ok(&self.state.cycles[&cycle])
    }

    pub fn close_cycle(&mut self, cycle: u32) -> Result<(), StudyError> {
        match self.state.cycles.get(&cycle) {
            Some(c) if c.closed_at.is_none() => {}
            _ => return Err(StudyError::CycleNotOpen(cycle)),
        }
        self.append(Event::CycleClosed { cycle })?;
        Ok(())
    }

    fn open_cycle_state(&self, cycle: u32) -> Result<&CycleState, StudyError> {
        self.state.cycles.get(&cycle).filter(|c| c.closed_at.is_none()).ok_or(StudyError::CycleNotOpen(cycle))
    }

    /// Starts or resumes a session. Only the client that started it may use
    /// it.
    pub fn start_session(&mut self, participant: &str, cycle: u32, phase: Phase, client_id: &str) -> Result<SessionInfo, StudyError> {
        let p = self.state.participants.get(participant).ok_or_else(|| StudyError::UnknownParticipant(participant.into()))?.clone();
        let cs = self.open_cycle_state(cycle)?;
        let token = session_token(participant, cycle, phase);
        if let Some(s) = self.state.sessions.get(&token) {
            if s.client_id != client_id {
                return Err(StudyError::SessionBusy);
            }
            return Ok(s.info());
        }
        let (ids, assisted) = match phase {
            Phase::Training => {
                let t = self.plan.training.as_ref().ok_or_else(|| StudyError::State("plan has no training phase".into()))?;
                (cs.training.clone(), t.assist.applies(&p))
            }
            Phase::Exam => {
                if self.plan.training.is_some() {
                    let done = self
                        .state
                        .sessions
                        .get(&session_token(participant, cycle, Phase::Training))
                        .is_some_and(|s| s.status != SessionStatus::Active);
                    if !done {
                        return Err(StudyError::State("training must be finished before the exam".into()));
                    }
                }
                (cs.exam.all().cloned().collect::<Vec<_>>(), self.plan.exam_assist_for(cycle).applies(&p))
            }
        };
        let key = (cycle as u64) << 1 | (phase == Phase::Exam) as u64;
        let order = presentation_order(&ids, self.plan.seed ^ stable_hash("presentation"), participant, key);
        self.append(Event::SessionStarted {
            token: token.clone(),
            participant: participant.into(),
            cycle,
            phase,
            client_id: client_id.into(),
            assisted,
            order,
        })?;
        Ok(self.state.sessions[&token].info())
    }

    /// Looks a session up and checks the lease and time limit; logs the
    /// expiry the first time it is noticed.
    fn checked_session(&mut self, token: &str, client_id: &str) -> Result<&Session, StudyError> {
        let s = self.state.sessions.get(token).ok_or(StudyError::UnknownSession)?;
        if s.client_id != client_id {
            return Err(StudyError::SessionBusy);
        }
        if s.status == SessionStatus::Expired {
            return Err(StudyError::SessionExpired);
        }
        if s.status == SessionStatus::Active && self.clock.now_ms() > s.deadline {
            self.append(Event::SessionExpired { token: token.into() })?;
            return Err(StudyError::SessionExpired);
        }
        self.open_cycle_state(s.cycle)?;
        Ok(&self.state.sessions[token])
    }

    fn case(&self, case_id: &str) -> &PoolCase {
        self.pools.get(case_id).expect("session cases come from the pools")
    }

    /// Payload of the pending case of `token`.
    fn payload(&self, token: &str) -> CasePayload {
        let s = &self.state.sessions[token];
        let (case_id, _) = s.pending.as_ref().expect("a case is pending");
        let c = self.case(case_id);
        CasePayload {
            case_id: case_id.clone(),
            // Cases are served in order, so the pending one is the last served.
            position: s.cursor,
            remaining: s.order.len() - s.answered.len(),
            gestational_week: c.gestational_week,
            images: c
                .annotated
                .images
                .iter()
                .map(|img| ImagePayload { image_id: img.image_id.clone(), rendering: render_schematic(img) })
                .collect(),
            assist: s.assisted.then(|| assist_payload(c, &self.plan.model.fusion)).flatten(),
            assist_unavailable: s.assisted && c.model.is_none(),
        }
    }

    /// The current case, re-served if still unanswered.
    pub fn next_case(&mut self, token: &str, client_id: &str) -> Result<NextCase, StudyError> {
        let s = self.checked_session(token, client_id)?;
        if s.pending.is_some() {
            return Ok(NextCase::Case(Box::new(self.payload(token))));
        }
        if s.cursor < s.order.len() {
            let case_id = s.order[s.cursor].clone();
            self.append(Event::CaseServed { token: token.into(), case_id })?;
            return Ok(NextCase::Case(Box::new(self.payload(token))));
        }
        let (answered, total, active) = (s.answered.len(), s.order.len(), s.status == SessionStatus::Active);
        if active {
            self.append(Event::SessionCompleted { token: token.into() })?;
        }
        Ok(NextCase::Completed { answered, total })
    }

    pub fn submit(
        &mut self,
        token: &str,
        client_id: &str,
        case_id: &str,
        diagnosis: Diagnosis,
        client_elapsed_ms: Option<i64>,
    ) -> Result<SubmitAck, StudyError> {
        let s = self.checked_session(token, client_id)?;
        let (participant, cycle, phase, assisted) = (s.participant.clone(), s.cycle, s.phase, s.assisted);
        let served_at = match &s.pending {
            Some((id, at)) if id == case_id => Some(*at),
            _ => None,
        };
        if s.answered.contains(case_id) {
            self.append(Event::DuplicateRejected { token: token.into(), case_id: case_id.into(), diagnosis })?;
            return Err(StudyError::AlreadyAnswered(case_id.into()));
        }
        let served_at = served_at.ok_or_else(|| StudyError::NotServed(case_id.into()))?;
        let now = self.clock.now_ms();
        let c = self.case(case_id);
        let (assist_recommendation, assist_hash) = match assisted.then(|| assist_payload(c, &self.plan.model.fusion)).flatten() {
            Some(a) => (Some(a.recommendation), Some(a.hash())),
            None => (None, None),
        };
        let set = match phase {
            Phase::Training => ExamSet::Training,
            Phase::Exam => {
                if self.state.cycles[&cycle].exam.fixed.iter().any(|x| x == case_id) {
                    ExamSet::Fixed
                } else {
                    ExamSet::Random
                }
            }
        };
        let reference = (phase == Phase::Training).then_some(c.truth);
        let elapsed_ms = (now - served_at).max(1);
        self.append(Event::Answered(DiagnosisEvent {
            participant,
            cycle,
            phase,
            set,
            case_id: case_id.into(),
            diagnosis,
            served_at,
            answered_at: now,
            elapsed_ms,
            client_elapsed_ms,
            assist_recommendation,
            assist_hash,
        }))?;
        let s = &self.state.sessions[token];
        Ok(SubmitAck {
            case_id: case_id.into(),
            elapsed_ms,
            answered: s.answered.len(),
            remaining: s.order.len() - s.answered.len(),
            reference,
        })
    }

    /// Assist overlay for the pending case. `Ok(None)` when the model has
    /// no result for it; an unassisted session is a state error.
    pub fn assist(&mut self, token: &str, client_id: &str) -> Result<Option<AssistPayload>, StudyError> {
        let s = self.checked_session(token, client_id)?;
        if !s.assisted {
            return Err(StudyError::State("assist is not shown in this session".into()));
        }
        let (case_id, _) = s.pending.clone().ok_or_else(|| StudyError::State("no case is pending".into()))?;
        Ok(assist_payload(self.case(&case_id), &self.plan.model.fusion))
    }

    /// Participants without a completed exam session in `cycle`.
    pub fn missing_exams(&self, cycle: u32) -> Vec<String> {
        self.state
            .participants
            .keys()
            .filter(|id| {
                !self
                    .state
                    .sessions
                    .get(&session_token(id, cycle, Phase::Exam))
                    .is_some_and(|s| s.answered.len() == s.order.len())
            })
            .cloned()
            .collect()
    }
}
