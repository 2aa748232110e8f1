#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "tokenseg/augment.hpp"
#include "tokenseg/rng.hpp"

using namespace tokenseg;

namespace {

Tensor random_matrix(int r, int c, uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::zeros({r, c});
    for (real& v : t.values()) v = rng.normal();
    return t;
}

Tensor random_image(int size, uint64_t seed) {
    Rng rng(seed);
    Tensor img = Tensor::zeros({size, size, 3});
    for (real& v : img.values()) v = rng.uniform();
    return img;
}

}  // namespace

TEST_CASE("gen_token_mask hits the requested count exactly") {
    Rng rng(1);
    for (real ratio : {real(0), real(0.25), real(0.5), real(0.77), real(1)}) {
        const TokenMask mask = gen_token_mask(16, ratio, rng);
        CHECK(mask.m.size() == 16);
        CHECK(mask.popcount() == static_cast<int>(std::lround(ratio * 16)));
        for (uint8_t b : mask.m) CHECK((b == 0 || b == 1));
    }
}

TEST_CASE("gen_token_mask positions are roughly uniform") {
    Rng rng(2);
    std::vector<int> hits(16, 0);
    for (int trial = 0; trial < 2000; ++trial) {
        const TokenMask mask = gen_token_mask(16, real(0.5), rng);
        for (int i = 0; i < 16; ++i) hits[i] += mask.m[i];
    }
    for (int h : hits) {
        CHECK(h > 800);
        CHECK(h < 1200);
    }
}

TEST_CASE("tokenmix_star selects whole blocks and records the actual ratio") {
    Rng rng(3);
    const TokenMask mask = tokenmix_star_mask(4, 2, real(0.5), rng);
    CHECK(mask.m.size() == 16);
    CHECK(mask.popcount() == 8);  // 2 of 4 blocks, 4 tokens each
    CHECK(mask.swap_ratio == real(0.5));
    // Every selected token's 2x2 block is fully selected.
    for (int by = 0; by < 2; ++by) {
        for (int bx = 0; bx < 2; ++bx) {
            const int corner = (by * 2) * 4 + bx * 2;
            const uint8_t v = mask.m[corner];
            CHECK(mask.m[corner + 1] == v);
            CHECK(mask.m[corner + 4] == v);
            CHECK(mask.m[corner + 5] == v);
        }
    }
}

TEST_CASE("mask string round-trip") {
    Rng rng(4);
    const TokenMask mask = gen_token_mask(9, real(0.4), rng);
    const TokenMask back = mask_from_string(mask_to_string(mask));
    CHECK(back.m == mask.m);
    CHECK_THROWS(mask_from_string("0120"));
}

TEST_CASE("token_exchange is a bitwise involution that preserves pair sums") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = rng.uniform_int(1, 24);
        const int d = rng.uniform_int(1, 16);
        Tensor g_u = random_matrix(n, d, 100 + trial);
        Tensor g_l = random_matrix(n, d, 200 + trial);
        const TokenMask mask = gen_token_mask(n, rng.uniform(), rng);
        auto [ex_u, ex_l] = token_exchange(g_u, g_l, mask);
        for (int t = 0; t < n; ++t) {
            for (int j = 0; j < d; ++j) {
                const size_t k = static_cast<size_t>(t) * d + j;
                if (mask.m[t]) {
                    CHECK(ex_u.values()[k] == g_l.values()[k]);
                    CHECK(ex_l.values()[k] == g_u.values()[k]);
                } else {
                    CHECK(ex_u.values()[k] == g_u.values()[k]);
                    CHECK(ex_l.values()[k] == g_l.values()[k]);
                }
                CHECK(ex_u.values()[k] + ex_l.values()[k] ==
                      g_u.values()[k] + g_l.values()[k]);
            }
        }
        auto [back_u, back_l] = token_exchange(ex_u, ex_l, mask);
        CHECK(back_u.values() == g_u.values());
        CHECK(back_l.values() == g_l.values());
    }
}

TEST_CASE("token_swap_back restores the unlabeled stream's masked rows") {
    Tensor f_u = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor f_l = Tensor::from({3, 2}, {10, 20, 30, 40, 50, 60});
    TokenMask mask;
    mask.m = {0, 1, 0};
    Tensor back = token_swap_back(f_u, f_l, mask);
    CHECK(back.values() == std::vector<real>{1, 2, 30, 40, 5, 6});
}

TEST_CASE("weak augmentation with identity params is bitwise identity") {
    Tensor img = random_image(16, 6);
    std::vector<int> label(16 * 16);
    for (size_t i = 0; i < label.size(); ++i) label[i] = static_cast<int>(i % 3);
    auto [out, lout] = apply_weak(img, label, WeakAugParams::identity());
    CHECK(out.values() == img.values());
    CHECK(lout == label);
}

TEST_CASE("a pure flip applied twice is the identity") {
    Tensor img = random_image(16, 7);
    WeakAugParams p;
    p.flip = true;
    Tensor once = apply_weak(img, p);
    CHECK(once.values() != img.values());
    Tensor twice = apply_weak(once, p);
    CHECK(twice.values() == img.values());
}

TEST_CASE("weak augmentation moves labels with their pixels") {
    // Channel 0 encodes the label, so resampled pixels must still agree.
    const int size = 16;
    Tensor img = Tensor::zeros({size, size, 3});
    std::vector<int> label(static_cast<size_t>(size) * size);
    Rng rng(8);
    for (size_t px = 0; px < label.size(); ++px) {
        label[px] = rng.uniform_int(0, 2);
        img.data()[px * 3] = static_cast<real>(label[px]);
    }
    for (int trial = 0; trial < 20; ++trial) {
        const WeakAugParams p = draw_weak_params(rng);
        auto [out, lout] = apply_weak(img, label, p);
        for (size_t px = 0; px < lout.size(); ++px) {
            CHECK(static_cast<real>(lout[px]) == out.values()[px * 3]);
            CHECK(lout[px] >= 0);
            CHECK(lout[px] <= 2);
        }
    }
}

TEST_CASE("strong augmentation with identity params returns the input handle") {
    Tensor img = random_image(8, 9);
    Tensor out = apply_strong(img, StrongAugParams::identity());
    CHECK(out.data() == img.data());
}

TEST_CASE("strong augmentation keeps shape, range, and geometry") {
    Tensor img = random_image(16, 10);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor out = strong_augment(img, rng);
        REQUIRE(out.shape() == img.shape());
        for (real v : out.values()) {
            CHECK(v >= real(0));
            CHECK(v <= real(1));
        }
    }
}

TEST_CASE("grayscale collapses the channels") {
    Tensor img = random_image(8, 12);
    StrongAugParams p;
    p.grayscale = true;
    Tensor out = apply_strong(img, p);
    for (int px = 0; px < 64; ++px) {
        CHECK(out.values()[px * 3 + 0] == out.values()[px * 3 + 1]);
        CHECK(out.values()[px * 3 + 1] == out.values()[px * 3 + 2]);
    }
}

TEST_CASE("channel permutation moves whole channels") {
    Tensor img = random_image(8, 13);
    StrongAugParams p;
    p.channel_perm = 1;  // some non-identity permutation
    Tensor out = apply_strong(img, p);
    // Each output channel must match one input channel exactly, and the
    // permutation must not be the identity.
    bool any_moved = false;
    for (int c = 0; c < 3; ++c) {
        int matches = -1;
        for (int s = 0; s < 3; ++s) {
            bool all = true;
            for (int px = 0; px < 64 && all; ++px) {
                all = out.values()[px * 3 + c] == img.values()[px * 3 + s];
            }
            if (all) matches = s;
        }
        REQUIRE(matches >= 0);
        any_moved = any_moved || matches != c;
    }
    CHECK(any_moved);
}

TEST_CASE("box blur leaves a constant image unchanged") {
    Tensor img = Tensor::full({8, 8, 3}, real(0.37));
    StrongAugParams p;
    p.blur = true;
    Tensor out = apply_strong(img, p);
    for (real v : out.values()) CHECK(std::abs(v - real(0.37)) <= real(1e-12));
}

TEST_CASE("brightness scales values before the clamp") {
    Tensor img = Tensor::full({4, 4, 3}, real(0.4));
    StrongAugParams p;
    p.brightness = real(1.5);
    Tensor out = apply_strong(img, p);
    for (real v : out.values()) CHECK(std::abs(v - real(0.6)) <= real(1e-12));
}

TEST_CASE("cutmix boxes stay inside the frame with sane areas") {
    Rng rng(14);
    for (int trial = 0; trial < 200; ++trial) {
        const CutMixBox box = draw_cutmix_box(16, 16, rng);
        CHECK(box.w >= 1);
        CHECK(box.h >= 1);
        CHECK(box.x0 >= 0);
        CHECK(box.y0 >= 0);
        CHECK(box.x0 + box.w <= 16);
        CHECK(box.y0 + box.h <= 16);
        const real area = static_cast<real>(box.w * box.h) / (16 * 16);
        CHECK(area >= real(0.05));
        CHECK(area <= real(0.65));
    }
}

TEST_CASE("apply_cutmix pastes exactly the box") {
    Tensor a = Tensor::full({8, 8, 3}, real(0.2));
    Tensor b = Tensor::full({8, 8, 3}, real(0.9));
    std::vector<int> la(64, 0), lb(64, 1);
    CutMixBox box{2, 3, 4, 2};  // x0=2, y0=3, w=4, h=2
    auto [img, lab] = apply_cutmix(a, la, b, lb, box);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            const bool inside = x >= 2 && x < 6 && y >= 3 && y < 5;
            CHECK(lab[y * 8 + x] == (inside ? 1 : 0));
            CHECK(img.values()[(y * 8 + x) * 3] == (inside ? real(0.9) : real(0.2)));
        }
    }
}

TEST_CASE("classmix picks ceil-half of the donor's classes and pastes them") {
    std::vector<int> pseudo_b(64);
    for (size_t i = 0; i < pseudo_b.size(); ++i) pseudo_b[i] = static_cast<int>(i % 3);
    Rng rng(15);
    const std::vector<int> classes = draw_classmix_classes(pseudo_b, rng);
    CHECK(classes.size() == 2);  // ceil(3/2)
    std::set<int> chosen(classes.begin(), classes.end());
    CHECK(chosen.size() == 2);
    for (int c : chosen) {
        CHECK(c >= 0);
        CHECK(c <= 2);
    }

    Tensor a = Tensor::full({8, 8, 3}, real(0.1));
    Tensor b = Tensor::full({8, 8, 3}, real(0.8));
    std::vector<int> la(64, 5);
    auto [img, lab] = apply_classmix(a, la, b, pseudo_b, classes);
    for (size_t px = 0; px < 64; ++px) {
        const bool pasted = chosen.count(pseudo_b[px]) > 0;
        CHECK(lab[px] == (pasted ? pseudo_b[px] : 5));
        CHECK(img.values()[px * 3] == (pasted ? real(0.8) : real(0.1)));
    }
}
