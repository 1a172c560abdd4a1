#include <stdio.h>
#include <string.h>
#include "hif.h"

int main(void) {
    static uint8_t a[64 * 64], b[64 * 64];
    for (int y = 0; y < 64; y++)
        for (int x = 0; x < 64; x++)
            a[y * 64 + x] = b[y * 64 + x] = (uint8_t)((x * 7 + y * 13) ^ (x * y));
    size_t rows = 0, cols = 0;
    if (hif_motion_grid(64, 64, &rows, &cols) != HIF_STATUS_OK || rows != 4 || cols != 4) return 1;
    int32_t mv[32];
    memset(mv, 0x55, sizeof mv);
    if (hif_estimate_motion(a, b, 64, 64, 1, 8, HIF_SEARCH_METHOD_DIAMOND, mv, 32) != HIF_STATUS_OK) return 2;
    for (int i = 0; i < 32; i++)
        if (mv[i] != 0) return 3;
    if (hif_estimate_motion(NULL, b, 64, 64, 1, 8, HIF_SEARCH_METHOD_DIAMOND, mv, 32) != HIF_STATUS_NULL_POINTER) return 4;
    if (hif_last_error() == NULL) return 5;
    HifPolicy *p = NULL;
    if (hif_policy_load("/nonexistent.ckpt", 0, &p) != HIF_STATUS_CHECKPOINT || p != NULL) return 6;
    hif_policy_free(p);
    puts("ok");
    return 0;
}
