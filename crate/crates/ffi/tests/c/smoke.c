#include <stdio.h>
#include "caltype.h"

int main(void) {
    const uint32_t counts[4] = {3, 3, 3, 3};
    caltype_dataset *d = NULL;
    if (caltype_dataset_generate(counts, 100, 7, &d) != CALTYPE_STATUS_OK) return 1;
    if (caltype_dataset_len(d) != 12) return 2;
    double x[100];
    uint8_t label = 9;
    if (caltype_dataset_get(d, 5, x, 100, &label) != CALTYPE_STATUS_OK || label > 3) return 3;
    caltype_model *m = NULL;
    if (caltype_model_load(NULL, &m) != CALTYPE_STATUS_NULL_ARGUMENT) return 4;
    if (caltype_last_error() == NULL) return 5;
    caltype_dataset_free(d);
    printf("%s\n", caltype_version());
    return 0;
}
