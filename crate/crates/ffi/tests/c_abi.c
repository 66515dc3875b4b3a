#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include "storyvid.h"

#define CHECK(x) do { if ((x) != SV_STATUS_OK) { char *m = sv_last_error(); fprintf(stderr, "%s: %s\n", #x, m ? m : "?"); sv_string_free(m); return 1; } } while (0)

int main(void) {
    /* Two conditions over four visual tokens, text segments of two tokens each. */
    uint64_t bits[4] = {1, 1, 2, 2};
    size_t segs[2] = {2, 2};
    SvRegionMap *map = NULL;
    SvMask *mask = NULL;
    CHECK(sv_region_map_from_bits(1, 2, 2, 2, bits, &map));
    CHECK(sv_mask_build(map, segs, 2, SV_MASK_MODE_SR3A, &mask));
    if (sv_mask_size(mask) != 8) return 2;
    bool allowed = true;
    CHECK(sv_mask_query(mask, 0, 2, &allowed));
    if (allowed) return 3;
    CHECK(sv_mask_query(mask, 4, 6, &allowed));
    if (!allowed) return 4;
    if (sv_mask_query(mask, 8, 0, &allowed) != SV_STATUS_OUT_OF_RANGE) return 5;
    uint8_t *buf = NULL;
    size_t len = 0;
    CHECK(sv_mask_export(mask, SV_MASK_FORMAT_PGM, &buf, &len));
    if (len != 11 + 64 || memcmp(buf, "P5\n8 8\n255\n", 11) != 0) return 6;
    sv_bytes_free(buf, len);
    sv_mask_free(mask);
    sv_region_map_free(map);

    double w0[4] = {1, 0, 0, 1};
    double a[2] = {1, 1};
    double b[2] = {2, 0};
    double x[4] = {1, 3, 2, 4};
    double y[4];
    SvLora *lora = NULL;
    CHECK(sv_lora_new(2, 2, 1, a, b, 1.0, &lora));
    const SvLora *loras[1] = {lora};
    uint8_t m[2] = {1, 0};
    const uint8_t *masks[1] = {m};
    CHECK(sv_lora_apply(w0, 2, 2, loras, masks, 1, x, 2, y));
    /* Column 0 gets W0 x + B A x = (1,2) + (6,0); column 1 is untouched. */
    if (y[0] != 7 || y[1] != 3 || y[2] != 2 || y[3] != 4) return 7;
    sv_lora_free(lora);

    SvFramePlan *plan = NULL;
    if (sv_frame_plan_parse("nonsense", &plan) != SV_STATUS_PARSE) return 8;
    char *msg = sv_last_error();
    if (msg == NULL) return 9;
    sv_string_free(msg);
    printf("ok %s\n", sv_version());
    return 0;
}
