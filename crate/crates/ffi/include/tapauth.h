#ifndef TAPAUTH_H
#define TAPAUTH_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of a key pair as exchanged over the ABI: `k_e || k_m`.
 */
#define TAPAUTH_KEYPAIR_LEN 64

#define TAPAUTH_SK_LEN 32

#define TAPAUTH_IV_LEN 16

/**
 * Envelope overhead on top of the ciphertext: IV and tag.
 */
#define TAPAUTH_ENVELOPE_HEADER_LEN 48

typedef enum TapauthStatus {
  TAPAUTH_STATUS_OK = 0,
  TAPAUTH_STATUS_NULL_ARGUMENT = 1,
  TAPAUTH_STATUS_INVALID_UTF8 = 2,
  TAPAUTH_STATUS_INVALID_ARGUMENT = 3,
  TAPAUTH_STATUS_BUFFER_TOO_SMALL = 4,
  TAPAUTH_STATUS_MAC_MISMATCH = 5,
  TAPAUTH_STATUS_BAD_PADDING = 6,
  TAPAUTH_STATUS_MALFORMED_ENVELOPE = 7,
  TAPAUTH_STATUS_CONFIG = 8,
  TAPAUTH_STATUS_IO = 9,
  TAPAUTH_STATUS_INTERNAL = 10,
  TAPAUTH_STATUS_TRANSCRIPT = 11,
} TapauthStatus;

/**
 * Opaque handle to a verifier server that answers line-delimited JSON
 * requests.
 */
typedef struct TapauthServer TapauthServer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string. Do not free.
 */
const char *tapauth_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next tapauth call on the same thread. Do not free.
 */
const char *tapauth_last_error(void);

/**
 * Releases a string returned through an out pointer. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void tapauth_string_free(char *s);

/**
 * Derives `k_e || k_m` from a 32-byte secret and a 10-digit decimal nonce.
 *
 * # Safety
 * `k` must point to 32 readable bytes, `nonce` to a NUL-terminated string
 * and `out` to 64 writable bytes.
 */
enum TapauthStatus tapauth_derive_keys(const uint8_t *k, const char *nonce, uint8_t *out);

/**
 * Encrypt-then-MAC. Writes `IV || MAC || ciphertext` to `out`. The IV must
 * be fresh and unpredictable for every call.
 *
 * On `BufferTooSmall`, `*out_len` holds the required size.
 *
 * # Safety
 * `keys` must point to 64 bytes, `iv` to 16, `pt` to `pt_len` (may be NULL
 * when zero), `out` to `out_cap` writable bytes.
 */
enum TapauthStatus tapauth_seal(const uint8_t *keys,
                                const uint8_t *iv,
                                const uint8_t *pt,
                                size_t pt_len,
                                uint8_t *out,
                                size_t out_cap,
                                size_t *out_len);

/**
 * Checks the tag, then decrypts an envelope produced by [`tapauth_seal`].
 *
 * # Safety
 * As for [`tapauth_seal`], with `env` pointing to `env_len` bytes.
 */
enum TapauthStatus tapauth_open(const uint8_t *keys,
                                const uint8_t *env,
                                size_t env_len,
                                uint8_t *out,
                                size_t out_cap,
                                size_t *out_len);

/**
 * Creates an in-memory server. `seed` drives its RNG.
 *
 * # Safety
 * `sk` must point to 32 bytes and `out` to a writable handle slot.
 */
enum TapauthStatus tapauth_server_new(const uint8_t *sk, uint64_t seed, struct TapauthServer **out);

/**
 * Like [`tapauth_server_new`] but loads and persists users in `store_dir`.
 *
 * # Safety
 * As for [`tapauth_server_new`]; `store_dir` must be NUL-terminated.
 */
enum TapauthStatus tapauth_server_open(const uint8_t *sk,
                                       uint64_t seed,
                                       const char *store_dir,
                                       struct TapauthServer **out);

/**
 * Answers one JSON request line (see the `serve` subcommand). Protocol
 * level failures are reported inside the response, so this only fails on
 * bad arguments.
 *
 * # Safety
 * `server` must be a live handle, `line` NUL-terminated, `out` writable.
 */
enum TapauthStatus tapauth_server_handle(struct TapauthServer *server,
                                         const char *line,
                                         char **out);

/**
 * Destroys a server handle. NULL is ignored.
 *
 * # Safety
 * `server` must come from this library and not have been freed already.
 */
void tapauth_server_free(struct TapauthServer *server);

/**
 * Runs a scenario config (JSON, comments allowed) and returns the report as
 * JSON. When `transcript_out` is not NULL it receives the JSON-lines
 * transcript.
 *
 * # Safety
 * `config` must be NUL-terminated; `report_out` writable; `transcript_out`
 * NULL or writable.
 */
enum TapauthStatus tapauth_run_scenario(const char *config,
                                        char **report_out,
                                        char **transcript_out);

/**
 * Re-runs the secrecy and authenticity analysis on a JSON-lines transcript.
 * `*all_safe` is set to 1 when every secret is safe and every accepted OK
 * authentic.
 *
 * # Safety
 * `transcript` must be NUL-terminated; `report_out` and `all_safe` writable.
 */
enum TapauthStatus tapauth_verify_transcript(const char *transcript,
                                             char **report_out,
                                             int32_t *all_safe);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAPAUTH_H */
