#ifndef CMAIL_H
#define CMAIL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum CmailStatus {
  CMAIL_STATUS_OK = 0,
  CMAIL_STATUS_NULL_POINTER = 1,
  CMAIL_STATUS_INVALID_ARGUMENT = 2,
  CMAIL_STATUS_IO = 3,
  CMAIL_STATUS_FORMAT = 4,
  // The call does not apply to this policy's action space.
  CMAIL_STATUS_WRONG_ACTION_SPACE = 5,
  CMAIL_STATUS_BUFFER_TOO_SMALL = 6,
  CMAIL_STATUS_INTERNAL = 7,
} CmailStatus;

// How an action is chosen from the adapted distribution.
typedef enum CmailActMode {
  CMAIL_ACT_MODE_SAMPLE = 0,
  // Argmax for discrete actions, the mean for continuous ones.
  CMAIL_ACT_MODE_MODE = 1,
} CmailActMode;

// A test slot being adapted to one partner, with its own sampling stream.
typedef struct CmailAdaptSession CmailAdaptSession;

// A trained policy loaded from a checkpoint.
typedef struct CmailPolicy CmailPolicy;

// Adaptation settings; obtain defaults from [`cmail_adapt_config_default`].
typedef struct CmailAdaptConfig {
  double lr;
  size_t steps_per_batch;
  size_t batch_size;
  // Nonzero also fine-tunes the strategy weights.
  uint8_t adapt_g1;
} CmailAdaptConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cmail_version(void);

// Message of the last failed call on this thread, or NULL if none.
//
// The pointer stays valid until the next failing call on the same thread.
const char *cmail_last_error(void);

// Loads a checkpoint file into a new policy handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CmailStatus cmail_policy_load(const char *path, struct CmailPolicy **out);

// Loads a checkpoint held in memory.
//
// # Safety
// `data` must point to `len` readable bytes and `out` must be writable.
enum CmailStatus cmail_policy_load_bytes(const uint8_t *data, size_t len, struct CmailPolicy **out);

// Releases a policy. NULL is ignored.
//
// # Safety
// `policy` must come from a `cmail_policy_load*` call and not be used again.
void cmail_policy_free(struct CmailPolicy *policy);

// Reports the state width and the action count (discrete) or dimension
// (continuous). `continuous` is set to 1 for continuous action spaces.
//
// # Safety
// All pointers must be valid; outputs must be writable.
enum CmailStatus cmail_policy_dims(const struct CmailPolicy *policy,
                                   size_t *state_dim,
                                   size_t *action_dim,
                                   uint8_t *continuous);

// Default adaptation settings.
struct CmailAdaptConfig cmail_adapt_config_default(void);

// Opens an adaptation session with a fresh test slot. `config` may be NULL
// for the defaults. The session owns a copy of the policy.
//
// # Safety
// `policy` must be a live handle, `config` NULL or valid, `out` writable.
enum CmailStatus cmail_session_new(const struct CmailPolicy *policy,
                                   const struct CmailAdaptConfig *config,
                                   uint64_t seed,
                                   struct CmailAdaptSession **out);

// Releases a session. NULL is ignored.
//
// # Safety
// `session` must come from `cmail_session_new` and not be used again.
void cmail_session_free(struct CmailAdaptSession *session);

// Records one partner step with a discrete action. The state may use either
// role flag; it is stored in the partner role. A full batch triggers an update.
//
// # Safety
// `session` must be live and `state` must hold `state_len` doubles.
enum CmailStatus cmail_session_observe_discrete(struct CmailAdaptSession *session,
                                                const double *state,
                                                size_t state_len,
                                                size_t action);

// Continuous counterpart of [`cmail_session_observe_discrete`].
//
// # Safety
// `state` must hold `state_len` doubles and `action` `action_len` doubles.
enum CmailStatus cmail_session_observe_continuous(struct CmailAdaptSession *session,
                                                  const double *state,
                                                  size_t state_len,
                                                  const double *action,
                                                  size_t action_len);

// Adapts on any steps observed since the last update.
//
// # Safety
// `session` must be a live handle.
enum CmailStatus cmail_session_flush(struct CmailAdaptSession *session);

// Number of observed steps and of gradient updates applied so far.
// Either output may be NULL.
//
// # Safety
// `session` must be a live handle.
enum CmailStatus cmail_session_counts(const struct CmailAdaptSession *session,
                                      size_t *samples,
                                      size_t *updates);

// Ego action probabilities for a discrete policy, written to `probs`.
//
// # Safety
// `state` must hold `state_len` doubles; `probs` must have room for `probs_len`.
enum CmailStatus cmail_session_action_probs(const struct CmailAdaptSession *session,
                                            const double *state,
                                            size_t state_len,
                                            double *probs,
                                            size_t probs_len);

// Chooses an ego action for a discrete policy.
//
// # Safety
// `state` must hold `state_len` doubles and `action` must be writable.
enum CmailStatus cmail_session_act_discrete(struct CmailAdaptSession *session,
                                            const double *state,
                                            size_t state_len,
                                            enum CmailActMode mode,
                                            size_t *action);

// Chooses an ego action for a continuous policy, written to `action`.
//
// # Safety
// `state` must hold `state_len` doubles; `action` must have room for `action_len`.
enum CmailStatus cmail_session_act_continuous(struct CmailAdaptSession *session,
                                              const double *state,
                                              size_t state_len,
                                              enum CmailActMode mode,
                                              double *action,
                                              size_t action_len);

// Ego log-probability of a discrete action under the adapted slot.
//
// # Safety
// `state` must hold `state_len` doubles and `out` must be writable.
enum CmailStatus cmail_session_log_prob_discrete(const struct CmailAdaptSession *session,
                                                 const double *state,
                                                 size_t state_len,
                                                 size_t action,
                                                 double *out);

// Ego log-density of a continuous action under the adapted slot.
//
// # Safety
// `state` must hold `state_len` doubles, `action` `action_len` doubles, and
// `out` must be writable.
enum CmailStatus cmail_session_log_prob_continuous(const struct CmailAdaptSession *session,
                                                   const double *state,
                                                   size_t state_len,
                                                   const double *action,
                                                   size_t action_len,
                                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMAIL_H */
