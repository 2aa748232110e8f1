#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tokenseg/rng.hpp"
#include "tokenseg/tensor.hpp"

namespace tokenseg {

// A synthetic segmentation sample: colored geometric shapes over a noisy
// background. Labels derive from geometry only; colors are jittered so the
// classes are not separable by per-pixel color lookup.
struct Scene {
    Tensor image;            // [H,W,3] in [0,1]
    std::vector<int> label;  // H*W row-major, values in [0,C)
    int size = 0;            // H == W
    int num_classes = 0;
};

struct SplitSpec {
    int n_labeled = 4;
    int n_unlabeled = 64;
    int n_val = 32;
    uint64_t seed = 0;

    void validate() const;
    bool operator==(const SplitSpec&) const = default;
};

struct Splits {
    std::vector<Scene> labeled;
    std::vector<Scene> unlabeled;  // labels already discarded
    std::vector<Scene> val;
};

// ---- painters (exposed so tests can build exact scenes) ----

void paint_background(Scene& scene, real base_gray, real noise_amp, Rng& rng);
void paint_rect(Scene& scene, int x0, int y0, int x1, int y1, int cls, const real color[3]);
void paint_circle(Scene& scene, real cx, real cy, real radius, int cls, const real color[3]);
void paint_triangle(Scene& scene, real x0, real y0, real x1, real y1, real x2, real y2, int cls,
                    const real color[3]);

// Characteristic base color for a class (before jitter).
void class_color(int cls, real out[3]);

// Background texture plus n_shapes random shapes (circle/rect/triangle) of
// random non-background classes; later shapes occlude earlier ones.
Scene gen_scene_with_shapes(Rng& rng, int size, int num_classes, int n_shapes);
Scene gen_scene(Rng& rng, int size, int num_classes);  // 1..3 shapes

// Disjoint labeled/unlabeled/val scene lists, deterministic per spec.seed.
Splits make_splits(const SplitSpec& spec, int image_size, int num_classes);

// ---- metrics ----

// Row-major C x C counts; entry (truth, pred).
std::vector<long> confusion_matrix(const std::vector<int>& pred, const std::vector<int>& truth,
                                   int num_classes);
void accumulate_confusion(std::vector<long>& conf, const std::vector<int>& pred,
                          const std::vector<int>& truth, int num_classes);

struct IouReport {
    real miou = 0;
    std::vector<real> per_class;  // NaN-free: classes with empty union get -1
};

// Mean over classes with non-empty union of diag / (row + col - diag).
// Throws if every class has an empty union.
IouReport miou_from_confusion(const std::vector<long>& conf, int num_classes);
real miou(const std::vector<long>& conf, int num_classes);

// One confusion matrix over the whole set (dataset-level mIoU), computed
// from the predictor's class maps. Deterministic, no augmentation.
IouReport evaluate(const std::function<std::vector<int>(const Scene&)>& predict,
                   const std::vector<Scene>& val_set, int num_classes);

// ---- scene archive ----
// Directory of flat binary records (int32 H, W, C; float64 image; int32
// labels) plus manifest.txt listing split membership and the generator seed.

void write_scene_archive(const std::string& dir, const Splits& splits, const SplitSpec& spec);
Splits read_scene_archive(const std::string& dir);

}  // namespace tokenseg
