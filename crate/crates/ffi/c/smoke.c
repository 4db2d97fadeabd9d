#include <stdio.h>
#include "migrasim.h"

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: %s decision.json\n", argv[0]);
        return 2;
    }
    FILE *f = fopen(argv[1], "rb");
    if (!f) return 2;
    static char buf[1 << 16];
    size_t n = fread(buf, 1, sizeof buf - 1, f);
    fclose(f);
    buf[n] = 0;

    printf("migrasim %s, %zu variants\n", ms_version(), ms_variant_count());
    char *csv = NULL;
    MsStatus st = ms_decide_csv(buf, &csv);
    if (st != MS_STATUS_OK) {
        fprintf(stderr, "error %d: %s\n", st, ms_last_error());
        return 1;
    }
    fputs(csv, stdout);
    ms_string_free(csv);
    return 0;
}
