#include <math.h>
#include <stdio.h>
#include "kbvqa.h"

int main(void) {
    uint64_t ids[3] = {10, 3, 7};
    double vecs[6] = {1, 0, 0, 1, 1, 1};
    KbvqaIndex *idx = NULL;
    if (kbvqa_index_build(2, ids, vecs, 3, &idx) != KBVQA_STATUS_OK) return 1;
    double q[2] = {1, 0};
    uint64_t out_ids[3];
    double out_scores[3];
    size_t n = 0;
    if (kbvqa_index_search(idx, q, 2, 3, out_ids, out_scores, &n) != KBVQA_STATUS_OK) return 2;
    kbvqa_index_free(idx);
    if (n != 3 || out_ids[0] != 10 || out_ids[1] != 7 || out_ids[2] != 3) return 3;
    double r = 0;
    kbvqa_retrieval_reward(7, &r);
    if (r != 3.5) return 4;
    printf("ok %.4f\n", out_scores[1]);
    return 0;
}
