/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef INOT_H
#define INOT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum InotStatus {
  INOT_STATUS_OK = 0,
  INOT_STATUS_NULL_ARGUMENT = 1,
  INOT_STATUS_INVALID_UTF8 = 2,
  INOT_STATUS_PARSE = 3,
  INOT_STATUS_NO_MATCH = 4,
  INOT_STATUS_AMBIGUOUS = 5,
  INOT_STATUS_IO = 6,
  INOT_STATUS_INTERNAL = 7,
} InotStatus;

/**
 * A resolved scene: records, landmarks and their spatial graph.
 */
typedef struct InotEngine InotEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds an engine from `{"records":[...],"landmarks":[...],"width":W,"height":H}`
 * with an optional `"near_threshold"`.
 *
 * # Safety
 * `scene_json` is a NUL-terminated string; `out` is valid for a pointer write.
 */
enum InotStatus inot_engine_from_json(const char *scene_json, struct InotEngine **out);

/**
 * Loads an engine from a stored session.
 *
 * # Safety
 * Both strings are NUL-terminated; `out` is valid for a pointer write.
 */
enum InotStatus inot_engine_open_session(const char *store_root,
                                         const char *session_id,
                                         struct InotEngine **out);

/**
 * # Safety
 * `engine` is null or was returned by an `inot_engine_*` constructor and not yet freed.
 */
void inot_engine_free(struct InotEngine *engine);

/**
 * Number of device records in the engine, or 0 for null.
 *
 * # Safety
 * `engine` is null or a live engine handle.
 */
size_t inot_engine_device_count(const struct InotEngine *engine);

/**
 * Resolves a spoken-style command to `[{"uuid","action"}]`. On
 * `Ambiguous`, `out` (when non-null) receives `{"candidates":[{"uuid","name"}]}`.
 *
 * # Safety
 * `engine` is a live handle; `command` is NUL-terminated; `out` is valid for a pointer write.
 */
enum InotStatus inot_engine_resolve(const struct InotEngine *engine,
                                    const char *command,
                                    char **out);

/**
 * Parses a language-model reply against the engine's records.
 *
 * # Safety
 * As for [`inot_engine_resolve`].
 */
enum InotStatus inot_engine_parse_reply(const struct InotEngine *engine,
                                        const char *reply,
                                        char **out);

/**
 * The engine's spatial graph as JSON.
 *
 * # Safety
 * `engine` is a live handle; `out` is valid for a pointer write.
 */
enum InotStatus inot_engine_graph_json(const struct InotEngine *engine, char **out);

/**
 * Rule-based inventory extraction: `"2 fans and a light"` -> `{"fan":2,"light":1}`.
 *
 * # Safety
 * `text_in` is NUL-terminated; `out` is valid for a pointer write.
 */
enum InotStatus inot_inventory_extract(const char *text_in, char **out);

/**
 * # Safety
 * `s` is null or a string returned by this library and not yet freed.
 */
void inot_string_free(char *s);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *inot_last_error(void);

/**
 * NUL-terminated crate version.
 */
const char *inot_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INOT_H */
