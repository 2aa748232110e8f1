#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tokenseg/rng.hpp"
#include "tokenseg/tensor.hpp"

namespace tokenseg {

struct ModelConfig {
    int image_size = 32;
    int patch_size = 8;
    int embed_dim = 64;
    int num_layers = 4;
    int num_heads = 4;
    real mlp_ratio = real(4);
    int num_classes = 4;

    int tokens_per_side() const { return image_size / patch_size; }
    int n_tokens() const { return tokens_per_side() * tokens_per_side(); }
    int patch_dim() const { return patch_size * patch_size * 3; }
    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }

    void validate() const;  // throws std::invalid_argument naming the bad field
    bool operator==(const ModelConfig&) const = default;
};

struct EncoderBlock {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gamma, ln2_beta;
    Tensor w1, c1, w2, c2;
};

// Patch-token segmenter: linear patch embedding, pre-norm transformer
// encoder with learned positional embeddings (added in encode, so the
// embedding seam carries pure content tokens), per-token linear decoder
// with nearest-neighbor upsampling. No class token, no final norm.
class SegmenterModel {
public:
    SegmenterModel() = default;
    SegmenterModel(const ModelConfig& cfg, Rng& rng);  // normal(0, init_std) weights

    const ModelConfig& config() const { return cfg_; }

    // image[H,W,3] -> tokens[n,d]; token i is the projection of patch i
    // (row-major patch order). Positional embeddings are not yet added.
    Tensor patch_embed(const Tensor& image) const;

    // tokens[n,d] -> features[n,d]: adds positional embeddings, then the
    // transformer blocks. If attention_probe is given, every layer's
    // per-head attention matrix [n,n] is appended to it.
    Tensor encode(const Tensor& tokens, std::vector<Tensor>* attention_probe = nullptr) const;

    // features[n,d] -> logits[H,W,C]; every pixel of a patch shares its
    // token's logit vector.
    Tensor decode(const Tensor& features) const;

    // decode(feature_dropout(encode(patch_embed(image)))). rng is only
    // consulted when dropout_rate > 0.
    Tensor forward(const Tensor& image, real dropout_rate, Rng& rng) const;
    Tensor forward(const Tensor& image) const;  // dropout-free

    // Parameters in a fixed registry order; handles alias model storage.
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    void set_requires_grad(bool flag);
    void zero_grad();
    size_t param_count() const;

    SegmenterModel clone() const;  // deep copy (teacher initialization)

    static real init_std() { return real(0.02); }

private:
    void register_params();

    ModelConfig cfg_;
    Tensor embed_w_, embed_b_;  // [patch_dim, d], [d]
    Tensor pos_;                // [n_tokens, d]
    std::vector<EncoderBlock> blocks_;
    Tensor dec_w_, dec_b_;      // [d, C], [C]
    std::vector<std::pair<std::string, Tensor>> params_;
};

// Inverted dropout on a feature map: zero with probability rate, scale
// survivors by 1/(1-rate). rate 0 returns the input handle untouched and
// draws nothing from rng.
Tensor feature_dropout(const Tensor& features, real rate, Rng& rng);

// Checkpoint: key=value header echoing ModelConfig, then one
// "param <name>" + tensor dump record per parameter, registry order.
void save_checkpoint(const std::string& path, const SegmenterModel& model);
SegmenterModel load_checkpoint(const std::string& path);

}  // namespace tokenseg
