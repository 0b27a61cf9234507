#include <stdio.h>
#include <stdlib.h>
#include "mtd.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        MtdStatus s_ = (call);                                             \
        if (s_ != MTD_STATUS_OK) {                                         \
            fprintf(stderr, "%s -> %d: %s\n", #call, s_, mtd_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    MtdCorpus *corpus = NULL;
    MtdModel *model = NULL;
    size_t n = 0, dv = 0, da = 0, rate = 0, params = 0;
    double lr = 0.0, logit = 0.0;

    CHECK(mtd_corpus_generate("corpus.n_train = 4\ncorpus.n_val = 2\ncorpus.n_test = 2\n", &corpus));
    CHECK(mtd_corpus_len(corpus, MTD_SPLIT_TEST, &n));
    CHECK(mtd_model_init(MTD_PROFILE_STUDENT, 3, &model));
    CHECK(mtd_model_dims(model, &dv, &da, &rate));
    CHECK(mtd_model_param_count(model, true, &params));
    CHECK(mtd_lr_schedule(10, &lr));

    double *v = calloc(5 * dv, sizeof(double));
    double *a = calloc(5 * rate * da, sizeof(double));
    CHECK(mtd_model_score(model, v, 5, a, 5 * rate, &logit));

    MtdStatus bad = mtd_model_score(model, v, 5, a, 3, &logit);
    printf("n_test=%zu params=%zu lr=%g bad=%d msg=%s\n", n, params, lr, (int)bad, mtd_last_error());

    free(v);
    free(a);
    mtd_model_free(model);
    mtd_corpus_free(corpus);
    return bad == MTD_STATUS_DATA ? 0 : 2;
}
