/* Loads a checkpoint and classifies a PPM (P6, maxval 255) image. */
#include <stdio.h>
#include <stdlib.h>

#include "chroma.h"

static unsigned char *read_ppm(const char *path, size_t *w, size_t *h) {
    FILE *f = fopen(path, "rb");
    int maxval;
    unsigned char *px;
    if (!f) return NULL;
    if (fscanf(f, "P6 %zu %zu %d", w, h, &maxval) != 3 || maxval != 255 || fgetc(f) == EOF) {
        fclose(f);
        return NULL;
    }
    px = malloc(*w * *h * 3);
    if (px && fread(px, 1, *w * *h * 3, f) != *w * *h * 3) {
        free(px);
        px = NULL;
    }
    fclose(f);
    return px;
}

int main(int argc, char **argv) {
    ChromaModel *model = NULL;
    size_t w, h, classes, predicted, needed, k;
    unsigned char *rgb;
    double *probs;
    char name[64];
    if (argc != 3) {
        fprintf(stderr, "usage: %s MODEL.ckpt IMAGE.ppm\n", argv[0]);
        return 2;
    }
    if (chroma_model_load(argv[1], &model) != CHROMA_STATUS_OK) {
        fprintf(stderr, "load: %s\n", chroma_last_error());
        return 2;
    }
    rgb = read_ppm(argv[2], &w, &h);
    if (!rgb) {
        fprintf(stderr, "cannot read %s\n", argv[2]);
        chroma_model_free(model);
        return 2;
    }
    chroma_model_num_classes(model, &classes);
    probs = calloc(classes, sizeof(double));
    if (chroma_model_predict(model, rgb, w, h, probs, classes, &predicted, NULL, NULL) != CHROMA_STATUS_OK) {
        fprintf(stderr, "predict: %s\n", chroma_last_error());
        return 1;
    }
    for (k = 0; k < classes; k++) {
        chroma_model_class_name(model, k, name, sizeof name, &needed);
        printf("%s = %.6f\n", name, probs[k]);
    }
    chroma_model_class_name(model, predicted, name, sizeof name, &needed);
    printf("predicted = %s\n", name);
    free(probs);
    free(rgb);
    chroma_model_free(model);
    return 0;
}
