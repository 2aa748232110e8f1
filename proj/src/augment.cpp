#include "tokenseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace tokenseg {

namespace {

void check_image(const Tensor& image, const char* who) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw std::invalid_argument(std::string(who) + " expects an [H,W,3] image, got " +
                                    shape_str(image.shape()));
    }
}

void check_same_frame(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(who) + " image shapes differ: " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// k distinct values from {0..n-1}, uniformly, via partial Fisher-Yates.
std::vector<int> sample_without_replacement(int n, int k, Rng& rng) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
        const int j = rng.uniform_int(i, n - 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
}

constexpr int kChannelPerms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                     {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};

}  // namespace

int TokenMask::popcount() const {
    int n = 0;
    for (uint8_t v : m) n += v ? 1 : 0;
    return n;
}

TokenMask gen_token_mask(int n_tokens, real swap_ratio, Rng& rng) {
    if (n_tokens <= 0) throw std::invalid_argument("gen_token_mask needs n_tokens >= 1");
    if (swap_ratio < 0 || swap_ratio > 1) {
        throw std::invalid_argument("swap_ratio must lie in [0,1], got " +
                                    std::to_string(swap_ratio));
    }
    const int k = static_cast<int>(std::lround(swap_ratio * n_tokens));
    TokenMask mask;
    mask.m.assign(static_cast<size_t>(n_tokens), 0);
    mask.swap_ratio = static_cast<real>(k) / static_cast<real>(n_tokens);
    for (int pos : sample_without_replacement(n_tokens, k, rng)) {
        mask.m[static_cast<size_t>(pos)] = 1;
    }
    return mask;
}

TokenMask tokenmix_star_mask(int tokens_per_side, int block_size, real swap_ratio, Rng& rng) {
    if (tokens_per_side <= 0) throw std::invalid_argument("tokenmix_star needs a positive grid");
    if (block_size <= 0 || tokens_per_side % block_size != 0) {
        throw std::invalid_argument("star block size " + std::to_string(block_size) +
                                    " must divide the token grid side " +
                                    std::to_string(tokens_per_side));
    }
    if (swap_ratio < 0 || swap_ratio > 1) {
        throw std::invalid_argument("swap_ratio must lie in [0,1], got " +
                                    std::to_string(swap_ratio));
    }
    const int blocks_per_side = tokens_per_side / block_size;
    const int n_blocks = blocks_per_side * blocks_per_side;
    const int n_tokens = tokens_per_side * tokens_per_side;
    const int k = static_cast<int>(std::lround(swap_ratio * n_blocks));
    TokenMask mask;
    mask.m.assign(static_cast<size_t>(n_tokens), 0);
    for (int b : sample_without_replacement(n_blocks, k, rng)) {
        const int by = (b / blocks_per_side) * block_size;
        const int bx = (b % blocks_per_side) * block_size;
        for (int y = by; y < by + block_size; ++y) {
            for (int x = bx; x < bx + block_size; ++x) {
                mask.m[static_cast<size_t>(y * tokens_per_side + x)] = 1;
            }
        }
    }
    // The requested ratio is quantized to whole blocks; record the fraction
    // the mask actually carries.
    mask.swap_ratio = static_cast<real>(mask.popcount()) / static_cast<real>(n_tokens);
    return mask;
}

std::string mask_to_string(const TokenMask& mask) {
    std::string s;
    s.reserve(mask.m.size());
    for (uint8_t v : mask.m) s.push_back(v ? '1' : '0');
    return s;
}

TokenMask mask_from_string(const std::string& s) {
    TokenMask mask;
    mask.m.reserve(s.size());
    for (char c : s) {
        if (c != '0' && c != '1') {
            throw std::invalid_argument("mask string must be 0/1 characters, got '" +
                                        std::string(1, c) + "'");
        }
        mask.m.push_back(c == '1' ? 1 : 0);
    }
    if (mask.m.empty()) throw std::invalid_argument("mask string is empty");
    mask.swap_ratio = static_cast<real>(mask.popcount()) / static_cast<real>(mask.m.size());
    return mask;
}

std::pair<Tensor, Tensor> token_exchange(const Tensor& g_u, const Tensor& g_l,
                                         const TokenMask& mask) {
    if (g_u.shape() != g_l.shape()) {
        throw std::invalid_argument("token_exchange stream shapes differ: " +
                                    shape_str(g_u.shape()) + " vs " + shape_str(g_l.shape()));
    }
    if (static_cast<int>(mask.m.size()) != g_u.rows()) {
        throw std::invalid_argument("token_exchange mask length " +
                                    std::to_string(mask.m.size()) + " does not match " +
                                    std::to_string(g_u.rows()) + " tokens");
    }
    // Both selections read the pre-exchange operands, so this is a
    // simultaneous swap and an involution.
    return {row_select(g_u, g_l, mask.m), row_select(g_l, g_u, mask.m)};
}

Tensor token_swap_back(const Tensor& f_u, const Tensor& f_l, const TokenMask& mask) {
    if (f_u.shape() != f_l.shape()) {
        throw std::invalid_argument("token_swap_back stream shapes differ: " +
                                    shape_str(f_u.shape()) + " vs " + shape_str(f_l.shape()));
    }
    if (static_cast<int>(mask.m.size()) != f_u.rows()) {
        throw std::invalid_argument("token_swap_back mask length " +
                                    std::to_string(mask.m.size()) + " does not match " +
                                    std::to_string(f_u.rows()) + " tokens");
    }
    return row_select(f_u, f_l, mask.m);
}

// ---- weak augmentation ----

WeakAugParams draw_weak_params(Rng& rng) {
    WeakAugParams p;
    p.flip = rng.bernoulli(real(0.5));
    p.scale = rng.uniform(real(0.8), real(1));
    p.off_x = rng.uniform();
    p.off_y = rng.uniform();
    return p;
}

namespace {

struct WeakMap {
    int size = 0;
    int crop = 0, x0 = 0, y0 = 0;
    bool flip = false;

    // source pixel for output (y, x), flip applied before the crop
    std::pair<int, int> src(int y, int x) const {
        const int sy = y0 + (y * crop) / size;
        int sx = x0 + (x * crop) / size;
        if (flip) sx = size - 1 - sx;
        return {sy, sx};
    }
};

WeakMap weak_map(int size, const WeakAugParams& p) {
    if (p.scale < real(0.1) || p.scale > 1) {
        throw std::invalid_argument("weak aug scale must lie in [0.1, 1]");
    }
    WeakMap m;
    m.size = size;
    m.crop = std::clamp(static_cast<int>(std::lround(p.scale * size)), 1, size);
    const int span = size - m.crop;
    m.x0 = std::clamp(static_cast<int>(std::lround(p.off_x * span)), 0, span);
    m.y0 = std::clamp(static_cast<int>(std::lround(p.off_y * span)), 0, span);
    m.flip = p.flip;
    return m;
}

}  // namespace

Tensor apply_weak(const Tensor& image, const WeakAugParams& p) {
    check_image(image, "apply_weak");
    const int size = image.dim(0);
    if (image.dim(1) != size) throw std::invalid_argument("apply_weak expects a square image");
    const WeakMap m = weak_map(size, p);
    Tensor out = Tensor::zeros(image.shape());
    const real* pi = image.data();
    real* po = out.data();
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const auto [sy, sx] = m.src(y, x);
            const size_t s = (static_cast<size_t>(sy) * size + sx) * 3;
            const size_t d = (static_cast<size_t>(y) * size + x) * 3;
            po[d + 0] = pi[s + 0];
            po[d + 1] = pi[s + 1];
            po[d + 2] = pi[s + 2];
        }
    }
    return out;
}

std::pair<Tensor, std::vector<int>> apply_weak(const Tensor& image, const std::vector<int>& label,
                                               const WeakAugParams& p) {
    check_image(image, "apply_weak");
    const int size = image.dim(0);
    if (label.size() != static_cast<size_t>(size) * size) {
        throw std::invalid_argument("apply_weak label length " + std::to_string(label.size()) +
                                    " does not match image " + shape_str(image.shape()));
    }
    Tensor out = apply_weak(image, p);
    const WeakMap m = weak_map(size, p);
    std::vector<int> lab(label.size());
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const auto [sy, sx] = m.src(y, x);
            lab[static_cast<size_t>(y) * size + x] = label[static_cast<size_t>(sy) * size + sx];
        }
    }
    return {out, std::move(lab)};
}

// ---- strong augmentation ----

bool StrongAugParams::is_identity() const {
    return brightness == 1 && contrast == 1 && channel_perm == 0 && !blur && !grayscale;
}

StrongAugParams draw_strong_params(Rng& rng) {
    StrongAugParams p;
    p.brightness = rng.uniform(real(0.5), real(1.5));
    p.contrast = rng.uniform(real(0.5), real(1.5));
    p.channel_perm = rng.bernoulli(real(0.2)) ? rng.uniform_int(1, 5) : 0;
    p.blur = rng.bernoulli(real(0.5));
    p.grayscale = rng.bernoulli(real(0.2));
    return p;
}

Tensor apply_strong(const Tensor& image, const StrongAugParams& p) {
    check_image(image, "apply_strong");
    if (p.channel_perm < 0 || p.channel_perm > 5) {
        throw std::invalid_argument("channel_perm must lie in [0,5]");
    }
    if (p.is_identity()) return image;
    const int h = image.dim(0), w = image.dim(1);
    std::vector<real> v = image.values();
    if (p.brightness != 1) {
        for (real& x : v) x *= p.brightness;
    }
    if (p.contrast != 1) {
        real mean = 0;
        for (real x : v) mean += x;
        mean /= static_cast<real>(v.size());
        for (real& x : v) x = mean + (x - mean) * p.contrast;
    }
    if (p.channel_perm != 0) {
        const int* perm = kChannelPerms[p.channel_perm];
        for (size_t px = 0; px < v.size(); px += 3) {
            const real r = v[px], g = v[px + 1], b = v[px + 2];
            const real rgb[3] = {r, g, b};
            v[px] = rgb[perm[0]];
            v[px + 1] = rgb[perm[1]];
            v[px + 2] = rgb[perm[2]];
        }
    }
    if (p.blur) {
        std::vector<real> src = v;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    real acc = 0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int sy = std::clamp(y + dy, 0, h - 1);
                            const int sx = std::clamp(x + dx, 0, w - 1);
                            acc += src[(static_cast<size_t>(sy) * w + sx) * 3 + c];
                        }
                    }
                    v[(static_cast<size_t>(y) * w + x) * 3 + c] = acc / 9;
                }
            }
        }
    }
    if (p.grayscale) {
        for (size_t px = 0; px < v.size(); px += 3) {
            const real g = (v[px] + v[px + 1] + v[px + 2]) / 3;
            v[px] = v[px + 1] = v[px + 2] = g;
        }
    }
    for (real& x : v) x = std::clamp(x, real(0), real(1));
    return Tensor::from(image.shape(), std::move(v));
}

Tensor strong_augment(const Tensor& image, Rng& rng) {
    return apply_strong(image, draw_strong_params(rng));
}

// ---- CutMix ----

CutMixBox draw_cutmix_box(int height, int width, Rng& rng) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("cutmix frame must be non-empty");
    const real ratio = rng.uniform(real(0.2), real(0.5));
    const real aspect = rng.uniform(real(0.5), real(2));
    const real area = ratio * static_cast<real>(height) * static_cast<real>(width);
    CutMixBox box;
    box.w = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, width);
    box.h = std::clamp(static_cast<int>(std::lround(area / box.w)), 1, height);
    box.x0 = rng.uniform_int(0, width - box.w);
    box.y0 = rng.uniform_int(0, height - box.h);
    return box;
}

std::pair<Tensor, std::vector<int>> apply_cutmix(const Tensor& image_a,
                                                 const std::vector<int>& label_a,
                                                 const Tensor& image_b,
                                                 const std::vector<int>& label_b,
                                                 const CutMixBox& box) {
    check_image(image_a, "apply_cutmix");
    check_same_frame(image_a, image_b, "apply_cutmix");
    const int h = image_a.dim(0), w = image_a.dim(1);
    if (label_a.size() != static_cast<size_t>(h) * w || label_b.size() != label_a.size()) {
        throw std::invalid_argument("apply_cutmix labels must cover the frame");
    }
    if (box.w < 0 || box.h < 0 || box.x0 < 0 || box.y0 < 0 || box.x0 + box.w > w ||
        box.y0 + box.h > h) {
        throw std::invalid_argument("cutmix box leaves the frame");
    }
    Tensor img = image_a.clone();
    std::vector<int> lab = label_a;
    real* pv = img.data();
    const real* pb = image_b.data();
    for (int y = box.y0; y < box.y0 + box.h; ++y) {
        for (int x = box.x0; x < box.x0 + box.w; ++x) {
            const size_t px = (static_cast<size_t>(y) * w + x);
            pv[px * 3 + 0] = pb[px * 3 + 0];
            pv[px * 3 + 1] = pb[px * 3 + 1];
            pv[px * 3 + 2] = pb[px * 3 + 2];
            lab[px] = label_b[px];
        }
    }
    return {img, std::move(lab)};
}

std::pair<Tensor, std::vector<int>> cutmix(const Tensor& image_a, const std::vector<int>& label_a,
                                           const Tensor& image_b, const std::vector<int>& label_b,
                                           Rng& rng) {
    check_image(image_a, "cutmix");
    return apply_cutmix(image_a, label_a, image_b, label_b,
                        draw_cutmix_box(image_a.dim(0), image_a.dim(1), rng));
}

// ---- ClassMix ----

std::vector<int> draw_classmix_classes(const std::vector<int>& pseudo_b, Rng& rng) {
    std::set<int> present(pseudo_b.begin(), pseudo_b.end());
    std::vector<int> classes(present.begin(), present.end());
    const int k = (static_cast<int>(classes.size()) + 1) / 2;  // ceil(half)
    std::vector<int> picked_idx = sample_without_replacement(static_cast<int>(classes.size()), k,
                                                             rng);
    std::vector<int> out;
    out.reserve(picked_idx.size());
    for (int i : picked_idx) out.push_back(classes[static_cast<size_t>(i)]);
    std::sort(out.begin(), out.end());
    return out;
}

std::pair<Tensor, std::vector<int>> apply_classmix(const Tensor& image_a,
                                                   const std::vector<int>& label_a,
                                                   const Tensor& image_b,
                                                   const std::vector<int>& pseudo_b,
                                                   const std::vector<int>& classes) {
    check_image(image_a, "apply_classmix");
    check_same_frame(image_a, image_b, "apply_classmix");
    const size_t n = static_cast<size_t>(image_a.dim(0)) * image_a.dim(1);
    if (label_a.size() != n || pseudo_b.size() != n) {
        throw std::invalid_argument("apply_classmix labels must cover the frame");
    }
    const std::set<int> sel(classes.begin(), classes.end());
    Tensor img = image_a.clone();
    std::vector<int> lab = label_a;
    real* pv = img.data();
    const real* pb = image_b.data();
    for (size_t px = 0; px < n; ++px) {
        if (!sel.count(pseudo_b[px])) continue;
        pv[px * 3 + 0] = pb[px * 3 + 0];
        pv[px * 3 + 1] = pb[px * 3 + 1];
        pv[px * 3 + 2] = pb[px * 3 + 2];
        lab[px] = pseudo_b[px];
    }
    return {img, std::move(lab)};
}

std::pair<Tensor, std::vector<int>> classmix(const Tensor& image_a,
                                             const std::vector<int>& label_a,
                                             const Tensor& image_b,
                                             const std::vector<int>& pseudo_b, Rng& rng) {
    return apply_classmix(image_a, label_a, image_b, pseudo_b,
                          draw_classmix_classes(pseudo_b, rng));
}

}  // namespace tokenseg
