#include <math.h>
#include <stdio.h>
#include <string.h>

#include "cyto.h"

#define CHECK(expr)                                                          \
    do {                                                                     \
        CytoStatus s_ = (expr);                                              \
        if (s_ != CYTO_STATUS_OK) {                                          \
            fprintf(stderr, "%s failed (%d): %s\n", #expr, (int)s_,          \
                    cyto_last_error_message());                              \
            return 1;                                                        \
        }                                                                    \
    } while (0)

enum { W = 48, H = 40 };

int main(void) {
    static uint32_t labels[W * H];
    static uint8_t rgb[W * H * 3];
    for (int y = 0; y < H; y++) {
        for (int x = 0; x < W; x++) {
            int a = (x - 12) * (x - 12) + (y - 20) * (y - 20) < 64;
            int b = (x - 34) * (x - 34) + (y - 18) * (y - 18) < 49;
            labels[y * W + x] = a ? 1 : (b ? 2 : 0);
            uint8_t v = (uint8_t)(a || b ? 90 : 200);
            rgb[(y * W + x) * 3 + 0] = v;
            rgb[(y * W + x) * 3 + 1] = (uint8_t)(v + 20);
            rgb[(y * W + x) * 3 + 2] = v;
        }
    }

    CytoLabelMap *map = NULL;
    CHECK(cyto_label_map_new(W, H, labels, &map));
    if (cyto_label_map_instance_count(map) != 2) return 2;

    CytoFlowField *flows = NULL;
    CHECK(cyto_flow_field_from_labels(map, &flows));
    const float *dx = NULL, *dy = NULL;
    CHECK(cyto_flow_field_planes(flows, &dy, &dx, NULL));
    float n = sqrtf(dx[20 * W + 8] * dx[20 * W + 8] + dy[20 * W + 8] * dy[20 * W + 8]);
    if (fabsf(n - 1.0f) > 1e-4f) return 3;

    CytoFlowParams params = cyto_flow_params_default();
    CytoLabelMap *seg = NULL;
    CHECK(cyto_flow_field_segment(flows, &params, &seg));
    CytoSegMetrics m;
    CHECK(cyto_seg_metrics(seg, map, &m));
    if (cyto_label_map_instance_count(seg) != 2 || m.dice < 0.99) return 4;

    CytoModel *model = NULL;
    CHECK(cyto_model_new_random(CYTO_VARIANT_ORIGINAL13, 5, 64, 1, &model));
    size_t count = 0;
    if (cyto_model_classify(model, rgb, W, H, map, NULL, NULL, 0, &count) != CYTO_STATUS_BUFFER_TOO_SMALL ||
        count != 2)
        return 5;
    uint32_t ids[2];
    double probs[2 * 5];
    CHECK(cyto_model_classify(model, rgb, W, H, map, ids, probs, 2, &count));
    for (size_t i = 0; i < count; i++) {
        double s = 0;
        for (int k = 0; k < 5; k++) s += probs[i * 5 + k];
        if (fabs(s - 1.0) > 1e-6) return 6;
    }

    CytoLabelMap *missing = NULL;
    if (cyto_label_map_read("/nonexistent/labels.png", &missing) != CYTO_STATUS_IO) return 7;
    if (strlen(cyto_last_error_message()) == 0 || missing != NULL) return 8;

    printf("cyto %s: %zu cells, dice %.3f\n", cyto_version(), count, m.dice);
    cyto_model_free(model);
    cyto_label_map_free(seg);
    cyto_flow_field_free(flows);
    cyto_label_map_free(map);
    return 0;
}
