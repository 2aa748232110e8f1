#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tokenseg/rng.hpp"
#include "tokenseg/tensor.hpp"

namespace tokenseg {

// ---- TokenMix (embedding-seam token exchange) ----

struct TokenMask {
    std::vector<uint8_t> m;  // strictly 0/1
    real swap_ratio = 0;     // actual fraction of ones

    int popcount() const;
};

// Exactly round(swap_ratio * n_tokens) ones at uniformly drawn positions.
TokenMask gen_token_mask(int n_tokens, real swap_ratio, Rng& rng);

// Block-structured ablation variant: whole block_size x block_size token
// blocks are selected until round(swap_ratio * n_blocks) blocks are set, so
// the requested ratio is quantized to complete blocks.
TokenMask tokenmix_star_mask(int tokens_per_side, int block_size, real swap_ratio, Rng& rng);

std::string mask_to_string(const TokenMask& mask);   // "0110..." for run logs
TokenMask mask_from_string(const std::string& s);

// Simultaneous swap from pre-exchange values: rows with m=1 trade places,
// rows with m=0 stay. Applying it twice restores both streams exactly.
std::pair<Tensor, Tensor> token_exchange(const Tensor& g_u, const Tensor& g_l,
                                         const TokenMask& mask);

// Reconstitutes only the unlabeled stream: masked rows come back from f_l.
Tensor token_swap_back(const Tensor& f_u, const Tensor& f_l, const TokenMask& mask);

// ---- weak augmentation (geometric, label-preserving) ----

struct WeakAugParams {
    bool flip = false;     // horizontal
    real scale = 1;        // crop side fraction in [0.8, 1]
    real off_x = real(0.5), off_y = real(0.5);  // crop anchor fractions in [0,1]

    static WeakAugParams identity() { return {}; }
};

WeakAugParams draw_weak_params(Rng& rng);

// Flip, then crop a scale*H square at the offset anchor and resize back to
// H x H with nearest-neighbor sampling. Labels follow the same index map.
Tensor apply_weak(const Tensor& image, const WeakAugParams& p);
std::pair<Tensor, std::vector<int>> apply_weak(const Tensor& image, const std::vector<int>& label,
                                               const WeakAugParams& p);

// ---- strong augmentation (photometric only; geometry untouched) ----

struct StrongAugParams {
    real brightness = 1;   // multiplicative, drawn from [0.5, 1.5]
    real contrast = 1;     // about the image mean, drawn from [0.5, 1.5]
    int channel_perm = 0;  // index into the 6 permutations of (r,g,b); 0 = identity
    bool blur = false;     // 3x3 box blur, replicate padding
    bool grayscale = false;

    bool is_identity() const;
    static StrongAugParams identity() { return {}; }
};

StrongAugParams draw_strong_params(Rng& rng);

// Applies brightness, contrast, channel shuffle, blur, grayscale in that
// order, then clamps to [0,1]. Identity params return the input bitwise.
Tensor apply_strong(const Tensor& image, const StrongAugParams& p);
Tensor strong_augment(const Tensor& image, Rng& rng);

// ---- pixel-level mixing baselines ----

struct CutMixBox {
    int x0 = 0, y0 = 0, w = 0, h = 0;
};

// One axis-aligned box with area ratio ~ uniform[0.2, 0.5] of the frame and
// aspect ~ uniform[0.5, 2], fully inside the image.
CutMixBox draw_cutmix_box(int height, int width, Rng& rng);

std::pair<Tensor, std::vector<int>> apply_cutmix(const Tensor& image_a,
                                                 const std::vector<int>& label_a,
                                                 const Tensor& image_b,
                                                 const std::vector<int>& label_b,
                                                 const CutMixBox& box);
std::pair<Tensor, std::vector<int>> cutmix(const Tensor& image_a, const std::vector<int>& label_a,
                                           const Tensor& image_b, const std::vector<int>& label_b,
                                           Rng& rng);

// Ceil(half) of the classes present in pseudo_b, uniformly chosen.
std::vector<int> draw_classmix_classes(const std::vector<int>& pseudo_b, Rng& rng);

std::pair<Tensor, std::vector<int>> apply_classmix(const Tensor& image_a,
                                                   const std::vector<int>& label_a,
                                                   const Tensor& image_b,
                                                   const std::vector<int>& pseudo_b,
                                                   const std::vector<int>& classes);
std::pair<Tensor, std::vector<int>> classmix(const Tensor& image_a,
                                             const std::vector<int>& label_a,
                                             const Tensor& image_b,
                                             const std::vector<int>& pseudo_b, Rng& rng);

}  // namespace tokenseg
