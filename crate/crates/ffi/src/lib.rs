//! C ABI over the cmail policy loader and online adaptation session.
//!
//! Every fallible call returns a [`CmailStatus`]. On failure the message is
//! kept per thread and can be read with [`cmail_last_error`] until the next
//! failing call on that thread. Handles are opaque and must be released with
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use cmail::envs::{Action, ActionSpace, Role};
use cmail::policy::{ActMode, Policy, PolicyError};
use cmail::trainer::{AdaptConfig, AdaptSession, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmailStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    /// The call does not apply to this policy's action space.
    WrongActionSpace = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// How an action is chosen from the adapted distribution.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmailActMode {
    Sample = 0,
    /// Argmax for discrete actions, the mean for continuous ones.
    Mode = 1,
}

/// Adaptation settings; obtain defaults from [`cmail_adapt_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CmailAdaptConfig {
    pub lr: f64,
    pub steps_per_batch: usize,
    pub batch_size: usize,
    /// Nonzero also fine-tunes the strategy weights.
    pub adapt_g1: u8,
}

/// A trained policy loaded from a checkpoint.
pub struct CmailPolicy {
    policy: Policy,
}

impl CmailPolicy {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }
}

/// A test slot being adapted to one partner, with its own sampling stream.
pub struct CmailAdaptSession {
    session: AdaptSession,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CmailStatus, String);

impl Failure {
    fn new(status: CmailStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl From<PolicyError> for Failure {
    fn from(e: PolicyError) -> Self {
        let status = match e {
            PolicyError::Io(_) => CmailStatus::Io,
            PolicyError::Format(_) => CmailStatus::Format,
            _ => CmailStatus::InvalidArgument,
        };
        Self(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Policy(p) => p.into(),
            TrainError::Diverged { .. } => Self(CmailStatus::Internal, e.to_string()),
            _ => Self(CmailStatus::InvalidArgument, e.to_string()),
        }
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CmailStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmailStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            CmailStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(CmailStatus::NullPointer, format!("{what} is null")))
}

fn non_null_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as for `non_null`; the caller guarantees exclusive access.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(CmailStatus::NullPointer, format!("{what} is null")))
}

fn doubles<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(CmailStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller guarantees `len` readable doubles at `p`.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

fn doubles_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::new(CmailStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller guarantees `len` writable doubles at `p`.
    Ok(unsafe { slice::from_raw_parts_mut(p, len) })
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(CmailStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and supplied by the caller as writable.
    unsafe { out.write(value) };
    Ok(())
}

fn with_role(s: &[f64], role: Role) -> Vec<f64> {
    let mut v = s.to_vec();
    if let Some(last) = v.last_mut() {
        *last = role.flag();
    }
    v
}

impl CmailAdaptSession {
    fn discrete(&self) -> Result<usize, Failure> {
        match self.session.policy().dims().action_space {
            ActionSpace::Discrete(n) => Ok(n),
            ActionSpace::Continuous(_) => Err(Failure::new(
                CmailStatus::WrongActionSpace,
                "policy has a continuous action space",
            )),
        }
    }

    fn continuous(&self) -> Result<usize, Failure> {
        match self.session.policy().dims().action_space {
            ActionSpace::Continuous(d) => Ok(d),
            ActionSpace::Discrete(_) => Err(Failure::new(
                CmailStatus::WrongActionSpace,
                "policy has a discrete action space",
            )),
        }
    }

    fn check_state(&self, s: &[f64]) -> Result<(), Failure> {
        let want = self.session.policy().dims().state_dim;
        if s.len() != want {
            return Err(Failure::new(
                CmailStatus::InvalidArgument,
                format!("state has {} entries but the policy expects {want}", s.len()),
            ));
        }
        Ok(())
    }

    fn log_prob(&self, s: &[f64], a: &Action) -> Result<f64, Failure> {
        self.check_state(s)?;
        let ego = with_role(s, Role::Ego);
        Ok(self.session.policy().act_log_prob(self.session.slot(), &ego, a)?)
    }
}

fn act_mode(mode: CmailActMode) -> ActMode {
    match mode {
        CmailActMode::Sample => ActMode::Sample,
        CmailActMode::Mode => ActMode::Mode,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmail_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cmail_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into a new policy handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cmail_policy_load(path: *const c_char, out: *mut *mut CmailPolicy) -> CmailStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::new(CmailStatus::NullPointer, "path is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::new(CmailStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let file = File::open(path).map_err(|e| Failure::new(CmailStatus::Io, format!("{path}: {e}")))?;
        let policy = Policy::load(BufReader::new(file))?;
        write_out(out, Box::into_raw(Box::new(CmailPolicy { policy })), "out")
    })
}

/// Loads a checkpoint held in memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmail_policy_load_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut CmailPolicy,
) -> CmailStatus {
    guard(|| {
        if data.is_null() && len > 0 {
            return Err(Failure::new(CmailStatus::NullPointer, "data is null"));
        }
        let bytes = if len == 0 {
            &[][..]
        } else {
            slice::from_raw_parts(data, len)
        };
        let policy = Policy::load(bytes)?;
        write_out(out, Box::into_raw(Box::new(CmailPolicy { policy })), "out")
    })
}

/// Releases a policy. NULL is ignored.
///
/// # Safety
/// `policy` must come from a `cmail_policy_load*` call and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cmail_policy_free(policy: *mut CmailPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Reports the state width and the action count (discrete) or dimension
/// (continuous). `continuous` is set to 1 for continuous action spaces.
///
/// # Safety
/// All pointers must be valid; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmail_policy_dims(
    policy: *const CmailPolicy,
    state_dim: *mut usize,
    action_dim: *mut usize,
    continuous: *mut u8,
) -> CmailStatus {
    guard(|| {
        let dims = non_null(policy, "policy")?.policy.dims();
        let (n, c) = match dims.action_space {
            ActionSpace::Discrete(n) => (n, 0),
            ActionSpace::Continuous(d) => (d, 1),
        };
        write_out(state_dim, dims.state_dim, "state_dim")?;
        write_out(action_dim, n, "action_dim")?;
        write_out(continuous, c, "continuous")
    })
}

/// Default adaptation settings.
#[no_mangle]
pub extern "C" fn cmail_adapt_config_default() -> CmailAdaptConfig {
    let d = AdaptConfig::default();
    CmailAdaptConfig {
        lr: d.lr,
        steps_per_batch: d.steps_per_batch,
        batch_size: d.batch_size,
        adapt_g1: u8::from(d.adapt_g1),
    }
}

/// Opens an adaptation session with a fresh test slot. `config` may be NULL
/// for the defaults. The session owns a copy of the policy.
///
/// # Safety
/// `policy` must be a live handle, `config` NULL or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_new(
    policy: *const CmailPolicy,
    config: *const CmailAdaptConfig,
    seed: u64,
    out: *mut *mut CmailAdaptSession,
) -> CmailStatus {
    guard(|| {
        let policy = &non_null(policy, "policy")?.policy;
        let mut cfg = AdaptConfig::default();
        if let Some(c) = config.as_ref() {
            if !(c.lr.is_finite() && c.lr >= 0.0) || c.batch_size == 0 {
                return Err(Failure::new(
                    CmailStatus::InvalidArgument,
                    "adaptation needs a finite lr >= 0 and batch_size > 0",
                ));
            }
            cfg.lr = c.lr;
            cfg.steps_per_batch = c.steps_per_batch;
            cfg.batch_size = c.batch_size;
            cfg.adapt_g1 = c.adapt_g1 != 0;
        }
        let session = AdaptSession::new(policy, cfg, seed);
        let handle = CmailAdaptSession {
            session,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        write_out(out, Box::into_raw(Box::new(handle)), "out")
    })
}

/// Releases a session. NULL is ignored.
///
/// # Safety
/// `session` must come from `cmail_session_new` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_free(session: *mut CmailAdaptSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Records one partner step with a discrete action. The state may use either
/// role flag; it is stored in the partner role. A full batch triggers an update.
///
/// # Safety
/// `session` must be live and `state` must hold `state_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_observe_discrete(
    session: *mut CmailAdaptSession,
    state: *const f64,
    state_len: usize,
    action: usize,
) -> CmailStatus {
    guard(|| {
        let h = non_null_mut(session, "session")?;
        h.discrete()?;
        let s = doubles(state, state_len, "state")?;
        h.check_state(s)?;
        h.session
            .observe(with_role(s, Role::Partner), Action::Discrete(action))?;
        Ok(())
    })
}

/// Continuous counterpart of [`cmail_session_observe_discrete`].
///
/// # Safety
/// `state` must hold `state_len` doubles and `action` `action_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_observe_continuous(
    session: *mut CmailAdaptSession,
    state: *const f64,
    state_len: usize,
    action: *const f64,
    action_len: usize,
) -> CmailStatus {
    guard(|| {
        let h = non_null_mut(session, "session")?;
        h.continuous()?;
        let s = doubles(state, state_len, "state")?;
        h.check_state(s)?;
        let a = doubles(action, action_len, "action")?;
        h.session
            .observe(with_role(s, Role::Partner), Action::Continuous(a.to_vec()))?;
        Ok(())
    })
}

/// Adapts on any steps observed since the last update.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_flush(session: *mut CmailAdaptSession) -> CmailStatus {
    guard(|| {
        non_null_mut(session, "session")?.session.flush()?;
        Ok(())
    })
}

/// Number of observed steps and of gradient updates applied so far.
/// Either output may be NULL.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_counts(
    session: *const CmailAdaptSession,
    samples: *mut usize,
    updates: *mut usize,
) -> CmailStatus {
    guard(|| {
        let h = non_null(session, "session")?;
        if !samples.is_null() {
            samples.write(h.session.samples());
        }
        if !updates.is_null() {
            updates.write(h.session.updates());
        }
        Ok(())
    })
}

/// Ego action probabilities for a discrete policy, written to `probs`.
///
/// # Safety
/// `state` must hold `state_len` doubles; `probs` must have room for `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_action_probs(
    session: *const CmailAdaptSession,
    state: *const f64,
    state_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> CmailStatus {
    guard(|| {
        let h = non_null(session, "session")?;
        let n = h.discrete()?;
        let s = doubles(state, state_len, "state")?;
        h.check_state(s)?;
        if probs_len < n {
            return Err(Failure::new(
                CmailStatus::BufferTooSmall,
                format!("need {n} entries, got {probs_len}"),
            ));
        }
        let p = h
            .session
            .policy()
            .action_probs(h.session.slot(), &with_role(s, Role::Ego))?;
        doubles_mut(probs, n, "probs")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Chooses an ego action for a discrete policy.
///
/// # Safety
/// `state` must hold `state_len` doubles and `action` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_act_discrete(
    session: *mut CmailAdaptSession,
    state: *const f64,
    state_len: usize,
    mode: CmailActMode,
    action: *mut usize,
) -> CmailStatus {
    guard(|| {
        let h = non_null_mut(session, "session")?;
        h.discrete()?;
        let s = doubles(state, state_len, "state")?;
        h.check_state(s)?;
        match h.session.act_online(s, act_mode(mode), &mut h.rng)? {
            Action::Discrete(a) => write_out(action, a, "action"),
            Action::Continuous(_) => Err(Failure::new(CmailStatus::Internal, "unexpected continuous action")),
        }
    })
}

/// Chooses an ego action for a continuous policy, written to `action`.
///
/// # Safety
/// `state` must hold `state_len` doubles; `action` must have room for `action_len`.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_act_continuous(
    session: *mut CmailAdaptSession,
    state: *const f64,
    state_len: usize,
    mode: CmailActMode,
    action: *mut f64,
    action_len: usize,
) -> CmailStatus {
    guard(|| {
        let h = non_null_mut(session, "session")?;
        let d = h.continuous()?;
        let s = doubles(state, state_len, "state")?;
        h.check_state(s)?;
        if action_len < d {
            return Err(Failure::new(
                CmailStatus::BufferTooSmall,
                format!("need {d} entries, got {action_len}"),
            ));
        }
        match h.session.act_online(s, act_mode(mode), &mut h.rng)? {
            Action::Continuous(a) => {
                doubles_mut(action, d, "action")?.copy_from_slice(&a);
                Ok(())
            }
            Action::Discrete(_) => Err(Failure::new(CmailStatus::Internal, "unexpected discrete action")),
        }
    })
}

/// Ego log-probability of a discrete action under the adapted slot.
///
/// # Safety
/// `state` must hold `state_len` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_log_prob_discrete(
    session: *const CmailAdaptSession,
    state: *const f64,
    state_len: usize,
    action: usize,
    out: *mut f64,
) -> CmailStatus {
    guard(|| {
        let h = non_null(session, "session")?;
        let n = h.discrete()?;
        if action >= n {
            return Err(Failure::new(
                CmailStatus::InvalidArgument,
                format!("action {action} out of range for {n} actions"),
            ));
        }
        let lp = h.log_prob(doubles(state, state_len, "state")?, &Action::Discrete(action))?;
        write_out(out, lp, "out")
    })
}

/// Ego log-density of a continuous action under the adapted slot.
///
/// # Safety
/// `state` must hold `state_len` doubles, `action` `action_len` doubles, and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmail_session_log_prob_continuous(
    session: *const CmailAdaptSession,
    state: *const f64,
    state_len: usize,
    action: *const f64,
    action_len: usize,
    out: *mut f64,
) -> CmailStatus {
    guard(|| {
        let h = non_null(session, "session")?;
        let d = h.continuous()?;
        let a = doubles(action, action_len, "action")?;
        if a.len() != d {
            return Err(Failure::new(
                CmailStatus::InvalidArgument,
                format!("action has {} entries but the policy expects {d}", a.len()),
            ));
        }
        let lp = h.log_prob(doubles(state, state_len, "state")?, &Action::Continuous(a.to_vec()))?;
        write_out(out, lp, "out")
    })
}
