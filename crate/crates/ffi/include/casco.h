#ifndef CASCO_H
#define CASCO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CascoStatus {
  CASCO_STATUS_OK = 0,
  // A required pointer argument was null.
  CASCO_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  CASCO_STATUS_INVALID_UTF8 = 2,
  // The program source or configuration did not parse.
  CASCO_STATUS_PARSE_ERROR = 3,
  // An unknown contract, model, policy or check kind, or an invalid configuration.
  CASCO_STATUS_INVALID_ARGUMENT = 4,
  // Execution trapped.
  CASCO_STATUS_EXECUTION_ERROR = 5,
  // Internal error; the library caught a panic.
  CASCO_STATUS_PANIC = 99,
} CascoStatus;

// Verdict of a relational check.
typedef enum CascoVerdict {
  CASCO_VERDICT_PASS = 0,
  CASCO_VERDICT_FAIL = 1,
  CASCO_VERDICT_VACUOUS = 2,
  CASCO_VERDICT_INCONCLUSIVE = 3,
} CascoVerdict;

// Opaque handle to a parsed program.
typedef struct CascoProgram CascoProgram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *casco_version(void);

// Message for the last failed call on this thread, or "" after a success.
// Valid until the next call into the library on the same thread.
const char *casco_last_error(void);

// Parses program source text. On success `*out` owns a new handle.
enum CascoStatus casco_program_parse(const char *source, struct CascoProgram **out);

// Releases a program handle. Null is ignored.
void casco_program_free(struct CascoProgram *program);

// Canonical source text of a program.
enum CascoStatus casco_program_to_text(const struct CascoProgram *program, char **out);

// Number of `fence` instructions in a program, or -1 if `program` is null.
int64_t casco_program_fence_count(const struct CascoProgram *program);

// Compiles `program` for `contract` (`seq-ct`, `spec-ct`, `arch-seq`,
// `ct-pc-spec`) with `policy` (`identity`, `baseline`, `optimized`).
// `config_toml` may be null for the defaults.
enum CascoStatus casco_compile(const struct CascoProgram *program,
                               const char *contract,
                               const char *policy,
                               const char *config_toml,
                               struct CascoProgram **out);

// Trace of `program` as a JSON array. `semantics` is `arch`, a contract
// name, or a hardware model name.
enum CascoStatus casco_trace_json(const struct CascoProgram *program,
                                  const char *semantics,
                                  const char *config_toml,
                                  char **out);

// Runs a relational check and writes the JSON report. `kind` is `hw`,
// `compiler` or `e2e`; `model` is needed for `hw`/`e2e` and `policy` for
// `compiler`/`e2e` (otherwise they may be null). `verdict` may be null.
enum CascoStatus casco_check_json(const struct CascoProgram *program,
                                  const char *kind,
                                  const char *contract,
                                  const char *model,
                                  const char *policy,
                                  const char *config_toml,
                                  enum CascoVerdict *verdict,
                                  char **out);

// Releases a string returned by this library. Null is ignored.
void casco_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASCO_H */
