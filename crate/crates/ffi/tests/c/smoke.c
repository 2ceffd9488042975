#include <stdio.h>
#include <string.h>

#include "tapauth.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      const char *e = tapauth_last_error();                           \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond,  \
              e ? e : "no error");                                    \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  uint8_t sk[TAPAUTH_SK_LEN] = {0};
  uint8_t keys[TAPAUTH_KEYPAIR_LEN];
  uint8_t iv[TAPAUTH_IV_LEN] = {1, 2, 3};
  const char *msg = "hello from C";
  uint8_t env[TAPAUTH_ENVELOPE_HEADER_LEN + 32];
  uint8_t back[32];
  size_t n = 0, m = 0;

  CHECK(tapauth_derive_keys(sk, "0000000001", keys) == TAPAUTH_STATUS_OK);
  CHECK(tapauth_seal(keys, iv, (const uint8_t *)msg, strlen(msg), env,
                     sizeof env, &n) == TAPAUTH_STATUS_OK);
  CHECK(tapauth_open(keys, env, n, back, sizeof back, &m) == TAPAUTH_STATUS_OK);
  CHECK(m == strlen(msg) && memcmp(back, msg, m) == 0);

  env[n - 1] ^= 0x80;
  CHECK(tapauth_open(keys, env, n, back, sizeof back, &m) ==
        TAPAUTH_STATUS_MAC_MISMATCH);
  CHECK(tapauth_last_error() != NULL);

  TapauthServer *srv = NULL;
  char *reply = NULL;
  CHECK(tapauth_server_new(sk, 5, &srv) == TAPAUTH_STATUS_OK);
  CHECK(tapauth_server_handle(srv, "{\"op\":\"expire\",\"t\":10}", &reply) ==
        TAPAUTH_STATUS_OK);
  CHECK(strcmp(reply, "{\"status\":\"expired\",\"count\":0}") == 0);
  tapauth_string_free(reply);
  tapauth_server_free(srv);

  printf("ok %s\n", tapauth_version());
  return 0;
}
