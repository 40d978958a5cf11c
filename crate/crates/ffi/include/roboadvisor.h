#ifndef ROBOADVISOR_H
#define ROBOADVISOR_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RaStatus {
  RA_STATUS_OK = 0,
  RA_STATUS_NULL_ARGUMENT = 1,
  RA_STATUS_VALIDATION = 2,
  RA_STATUS_DOMAIN = 3,
  RA_STATUS_INCONSISTENT = 4,
  RA_STATUS_INFEASIBLE = 5,
  RA_STATUS_SOLVER = 6,
  RA_STATUS_IO = 7,
  RA_STATUS_NOT_FOUND = 8,
  RA_STATUS_PANIC = 9,
} RaStatus;

// Estimator selector for [`ra_elicit`].
typedef enum RaEstimator {
  RA_ESTIMATOR_PESSIMISTIC = 0,
  RA_ESTIMATOR_OPTIMISTIC = 1,
  RA_ESTIMATOR_NEUTRAL = 2,
} RaEstimator;

// An item set of lotteries.
typedef struct RaItemSet RaItemSet;

// A questionnaire of item pairs drawn from an item set.
typedef struct RaQuestionnaire RaQuestionnaire;

// A normalized monotone concave piecewise-linear utility.
typedef struct RaUtility RaUtility;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *ra_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void ra_string_free(char *s);

// Loads an item set JSON file.
//
// # Safety
// `path` must be a valid C string and `out_items` a valid pointer.
enum RaStatus ra_item_set_load(const char *path, struct RaItemSet **out_items);

// Parses an item set from JSON text.
//
// # Safety
// `json` must be a valid C string and `out_items` a valid pointer.
enum RaStatus ra_item_set_from_json(const char *json, struct RaItemSet **out_items);

// Number of items.
//
// # Safety
// `items` must be a live handle and `out_len` a valid pointer.
enum RaStatus ra_item_set_len(const struct RaItemSet *items, size_t *out_len);

// Largest outcome over all items; the default upper end of the utility domain.
//
// # Safety
// `items` must be a live handle and `out_value` a valid pointer.
enum RaStatus ra_item_set_max_outcome(const struct RaItemSet *items, double *out_value);

// # Safety
// `items` must be null or a handle not yet freed.
void ra_item_set_free(struct RaItemSet *items);

// Draws `k` distinct pairs uniformly at random.
//
// # Safety
// `items` must be a live handle and `out_q` a valid pointer.
enum RaStatus ra_questionnaire_random(const struct RaItemSet *items,
                                      size_t k,
                                      uint64_t seed,
                                      struct RaQuestionnaire **out_q);

// Number of pairs.
//
// # Safety
// `q` must be a live handle and `out_len` a valid pointer.
enum RaStatus ra_questionnaire_len(const struct RaQuestionnaire *q, size_t *out_len);

// Questionnaire as JSON (item ids per pair); release with [`ra_string_free`].
//
// # Safety
// `q` must be a live handle and `out_json` a valid pointer.
enum RaStatus ra_questionnaire_to_json(const struct RaQuestionnaire *q, char **out_json);

// # Safety
// `q` must be null or a handle not yet freed.
void ra_questionnaire_free(struct RaQuestionnaire *q);

// Elicits one nominal utility. `choices[i]` answers pair `i`: +1 first, -1 second, 0 no
// preference. The grid is the questionnaire's outcomes up to the item set's largest outcome
// and the benchmark is the uniform portfolio of all items.
//
// # Safety
// Handles must be live, `choices` must hold `n` values and `out_u` must be valid.
enum RaStatus ra_elicit(const struct RaItemSet *items,
                        const struct RaQuestionnaire *q,
                        const int8_t *choices,
                        size_t n,
                        enum RaEstimator estimator,
                        struct RaUtility **out_u);

// Parses a utility from JSON `{"grid", "alpha", "beta"}`; extra fields are ignored.
//
// # Safety
// `json` must be a valid C string and `out_u` a valid pointer.
enum RaStatus ra_utility_from_json(const char *json, struct RaUtility **out_u);

// Utility as JSON; release with [`ra_string_free`].
//
// # Safety
// `u` must be a live handle and `out_json` a valid pointer.
enum RaStatus ra_utility_to_json(const struct RaUtility *u, char **out_json);

// Utility value at `y`; fails with `Domain` outside `[0, upper]`.
//
// # Safety
// `u` must be a live handle and `out_value` a valid pointer.
enum RaStatus ra_utility_eval(const struct RaUtility *u, double y, double *out_value);

// Gini coefficient of the utility.
//
// # Safety
// `u` must be a live handle and `out_value` a valid pointer.
enum RaStatus ra_utility_gini(const struct RaUtility *u, double *out_value);

// Kantorovich distance on the normalized domain; both utilities must share a grid.
//
// # Safety
// Handles must be live and `out_value` a valid pointer.
enum RaStatus ra_kantorovich(const struct RaUtility *u,
                             const struct RaUtility *v,
                             double *out_value);

// # Safety
// `u` must be null or a handle not yet freed.
void ra_utility_free(struct RaUtility *u);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROBOADVISOR_H */
