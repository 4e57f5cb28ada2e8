/* Exercises the C header and the static library from plain C. */
#include <math.h>
#include <stdio.h>
#include <string.h>

#include "envmon.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    EnvmonConstants d = {28469.0, 26034.0, 753.63};
    EnvmonPoly p;
    EnvmonConstants back;
    CHECK(envmon_poly_from_constants(&d, &p) == ENVMON_STATUS_OK);
    CHECK(envmon_constants_from_poly(&p, &back) == ENVMON_STATUS_OK);
    CHECK(fabs(back.d1 - d.d1) < 1.0 && fabs(back.d2 - d.d2) < 1.0 && fabs(back.d3 - d.d3) < 0.01);

    EnvmonPoly bad = {1.0, 0.0, 1.0};
    char msg[128];
    CHECK(envmon_constants_from_poly(&bad, &back) == ENVMON_STATUS_CALIBRATION);
    CHECK(envmon_last_error_message(msg, sizeof msg) > 0);

    /* ROM 28 f0 00 00 01 5a 2b plus its CRC verifies to zero */
    uint8_t rom[8] = {0x28, 0x2b, 0x5a, 0x01, 0x00, 0x00, 0x00, 0x00};
    rom[7] = envmon_crc8(rom, 7);
    CHECK(envmon_crc8(rom, 8) == 0);

    double rt;
    bool ok;
    CHECK(envmon_bus_health(10.0, 15, 0, &rt, &ok) == ENVMON_STATUS_OK);
    CHECK(ok && fabs(rt - 93.0) < 1e-9);

    char line[256];
    size_t n;
    CHECK(envmon_record_encode("sau-01", 3, 1000, 2, "28f00000015a2b", "temp_c", 21.5, line, sizeof line, &n) ==
          ENVMON_STATUS_OK);
    CHECK(strcmp(line, "v1 sau-01 3 1000 2 28f00000015a2b temp_c 21.5 c\n") == 0);
    EnvmonRecord *r = envmon_record_decode(line);
    CHECK(r != NULL);
    CHECK(strcmp(envmon_record_metric(r), "temp_c") == 0);
    CHECK(envmon_record_value(r) == 21.5 && envmon_record_port(r) == 2);
    envmon_record_free(r);

    EnvmonTier tiers[2] = {{1, 10, 3}, {5, 4, 0}};
    EnvmonArchive *a = envmon_archive_new("k", tiers, 2);
    CHECK(a != NULL);
    for (int i = 0; i < 20; i++) {
        CHECK(envmon_archive_append(a, i * 1000, (double)i) == ENVMON_STATUS_OK);
    }
    CHECK(envmon_archive_append(a, 0, 1.0) == ENVMON_STATUS_STORAGE);
    int64_t ts[16];
    double v[16];
    CHECK(envmon_archive_query(a, 10000, 19000, 100, ts, v, 16, &n) == ENVMON_STATUS_OK);
    CHECK(n == 10 && ts[0] == 10000 && v[9] == 19.0);
    envmon_archive_free(a);

    puts("ok");
    return 0;
}
