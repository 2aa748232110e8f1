#include "tokenseg/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tokenseg {

namespace {

constexpr real kLayerNormEps = real(1e-5);

Tensor normal_init(Shape shape, Rng& rng, real std_dev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (real& v : t.values()) v = rng.normal() * std_dev;
    return t;
}

std::string fmt_real(real v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(v));
    return buf;
}

}  // namespace

void ModelConfig::validate() const {
    if (image_size <= 0) throw std::invalid_argument("model.image_size must be positive");
    if (patch_size <= 0) throw std::invalid_argument("model.patch_size must be positive");
    if (image_size % patch_size != 0) {
        throw std::invalid_argument("model.patch_size " + std::to_string(patch_size) +
                                    " must divide model.image_size " + std::to_string(image_size));
    }
    if (embed_dim <= 0) throw std::invalid_argument("model.embed_dim must be positive");
    if (num_layers <= 0) throw std::invalid_argument("model.num_layers must be positive");
    if (num_heads <= 0) throw std::invalid_argument("model.num_heads must be positive");
    if (embed_dim % num_heads != 0) {
        throw std::invalid_argument("model.num_heads " + std::to_string(num_heads) +
                                    " must divide model.embed_dim " + std::to_string(embed_dim));
    }
    if (!(mlp_ratio > 0)) throw std::invalid_argument("model.mlp_ratio must be positive");
    if (mlp_hidden() < 1) throw std::invalid_argument("model.mlp_ratio too small for embed_dim");
    if (num_classes < 2) throw std::invalid_argument("model.num_classes must be at least 2");
}

SegmenterModel::SegmenterModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.embed_dim;
    const real s = init_std();
    embed_w_ = normal_init({cfg_.patch_dim(), d}, rng, s);
    embed_b_ = Tensor::zeros({d});
    pos_ = normal_init({cfg_.n_tokens(), d}, rng, s);
    blocks_.resize(static_cast<size_t>(cfg_.num_layers));
    for (EncoderBlock& b : blocks_) {
        b.ln1_gamma = Tensor::full({d}, real(1));
        b.ln1_beta = Tensor::zeros({d});
        b.wq = normal_init({d, d}, rng, s);
        b.bq = Tensor::zeros({d});
        b.wk = normal_init({d, d}, rng, s);
        b.bk = Tensor::zeros({d});
        b.wv = normal_init({d, d}, rng, s);
        b.bv = Tensor::zeros({d});
        b.wo = normal_init({d, d}, rng, s);
        b.bo = Tensor::zeros({d});
        b.ln2_gamma = Tensor::full({d}, real(1));
        b.ln2_beta = Tensor::zeros({d});
        b.w1 = normal_init({d, cfg_.mlp_hidden()}, rng, s);
        b.c1 = Tensor::zeros({cfg_.mlp_hidden()});
        b.w2 = normal_init({cfg_.mlp_hidden(), d}, rng, s);
        b.c2 = Tensor::zeros({d});
    }
    dec_w_ = normal_init({d, cfg_.num_classes}, rng, s);
    dec_b_ = Tensor::zeros({cfg_.num_classes});
    register_params();
}

void SegmenterModel::register_params() {
    params_.clear();
    params_.emplace_back("embed.w", embed_w_);
    params_.emplace_back("embed.b", embed_b_);
    params_.emplace_back("pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        EncoderBlock& b = blocks_[i];
        params_.emplace_back(p + "ln1.gamma", b.ln1_gamma);
        params_.emplace_back(p + "ln1.beta", b.ln1_beta);
        params_.emplace_back(p + "wq", b.wq);
        params_.emplace_back(p + "bq", b.bq);
        params_.emplace_back(p + "wk", b.wk);
        params_.emplace_back(p + "bk", b.bk);
        params_.emplace_back(p + "wv", b.wv);
        params_.emplace_back(p + "bv", b.bv);
        params_.emplace_back(p + "wo", b.wo);
        params_.emplace_back(p + "bo", b.bo);
        params_.emplace_back(p + "ln2.gamma", b.ln2_gamma);
        params_.emplace_back(p + "ln2.beta", b.ln2_beta);
        params_.emplace_back(p + "w1", b.w1);
        params_.emplace_back(p + "c1", b.c1);
        params_.emplace_back(p + "w2", b.w2);
        params_.emplace_back(p + "c2", b.c2);
    }
    params_.emplace_back("dec.w", dec_w_);
    params_.emplace_back("dec.b", dec_b_);
}

Tensor SegmenterModel::patch_embed(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.image_size || image.dim(1) != cfg_.image_size ||
        image.dim(2) != 3) {
        throw std::invalid_argument("patch_embed expects [" + std::to_string(cfg_.image_size) +
                                    "," + std::to_string(cfg_.image_size) + ",3], got " +
                                    shape_str(image.shape()));
    }
    Tensor patches = extract_patches(image, cfg_.patch_size);
    return add_rowvec(matmul(patches, embed_w_), embed_b_);
}

Tensor SegmenterModel::encode(const Tensor& tokens, std::vector<Tensor>* attention_probe) const {
    const int n = cfg_.n_tokens(), d = cfg_.embed_dim;
    if (tokens.rank() != 2 || tokens.dim(0) != n || tokens.dim(1) != d) {
        throw std::invalid_argument("encode expects [" + std::to_string(n) + "," +
                                    std::to_string(d) + "] tokens, got " +
                                    shape_str(tokens.shape()));
    }
    const int heads = cfg_.num_heads;
    const int dh = d / heads;
    const real att_scale = real(1) / std::sqrt(static_cast<real>(dh));
    Tensor x = add(tokens, pos_);
    for (const EncoderBlock& b : blocks_) {
        Tensor h = layer_norm(x, b.ln1_gamma, b.ln1_beta, kLayerNormEps);
        Tensor q = add_rowvec(matmul(h, b.wq), b.bq);
        Tensor k = add_rowvec(matmul(h, b.wk), b.bk);
        Tensor v = add_rowvec(matmul(h, b.wv), b.bv);
        std::vector<Tensor> heads_out;
        heads_out.reserve(static_cast<size_t>(heads));
        for (int hd = 0; hd < heads; ++hd) {
            const int c0 = hd * dh, c1 = (hd + 1) * dh;
            Tensor qh = slice_cols(q, c0, c1);
            Tensor kh = slice_cols(k, c0, c1);
            Tensor vh = slice_cols(v, c0, c1);
            Tensor att = softmax(scale(matmul(qh, transpose(kh)), att_scale));
            if (attention_probe != nullptr) attention_probe->push_back(att);
            heads_out.push_back(matmul(att, vh));
        }
        Tensor att_out = add_rowvec(matmul(concat_cols(heads_out), b.wo), b.bo);
        x = add(x, att_out);
        Tensor h2 = layer_norm(x, b.ln2_gamma, b.ln2_beta, kLayerNormEps);
        Tensor mlp = add_rowvec(
            matmul(gelu(add_rowvec(matmul(h2, b.w1), b.c1)), b.w2), b.c2);
        x = add(x, mlp);
    }
    return x;
}

Tensor SegmenterModel::decode(const Tensor& features) const {
    const int n = cfg_.n_tokens(), d = cfg_.embed_dim;
    if (features.rank() != 2 || features.dim(0) != n || features.dim(1) != d) {
        throw std::invalid_argument("decode expects [" + std::to_string(n) + "," +
                                    std::to_string(d) + "] features, got " +
                                    shape_str(features.shape()));
    }
    Tensor token_logits = add_rowvec(matmul(features, dec_w_), dec_b_);
    return upsample_tokens(token_logits, cfg_.tokens_per_side(), cfg_.patch_size);
}

Tensor SegmenterModel::forward(const Tensor& image, real dropout_rate, Rng& rng) const {
    return decode(feature_dropout(encode(patch_embed(image)), dropout_rate, rng));
}

Tensor SegmenterModel::forward(const Tensor& image) const {
    Rng unused(0);
    return forward(image, 0, unused);
}

void SegmenterModel::set_requires_grad(bool flag) {
    for (auto& [name, t] : params_) t.set_requires_grad(flag);
}

void SegmenterModel::zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
}

size_t SegmenterModel::param_count() const {
    size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

SegmenterModel SegmenterModel::clone() const {
    SegmenterModel m;
    m.cfg_ = cfg_;
    m.embed_w_ = embed_w_.clone();
    m.embed_b_ = embed_b_.clone();
    m.pos_ = pos_.clone();
    m.blocks_.resize(blocks_.size());
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const EncoderBlock& s = blocks_[i];
        EncoderBlock& t = m.blocks_[i];
        t.ln1_gamma = s.ln1_gamma.clone();
        t.ln1_beta = s.ln1_beta.clone();
        t.wq = s.wq.clone();
        t.bq = s.bq.clone();
        t.wk = s.wk.clone();
        t.bk = s.bk.clone();
        t.wv = s.wv.clone();
        t.bv = s.bv.clone();
        t.wo = s.wo.clone();
        t.bo = s.bo.clone();
        t.ln2_gamma = s.ln2_gamma.clone();
        t.ln2_beta = s.ln2_beta.clone();
        t.w1 = s.w1.clone();
        t.c1 = s.c1.clone();
        t.w2 = s.w2.clone();
        t.c2 = s.c2.clone();
    }
    m.dec_w_ = dec_w_.clone();
    m.dec_b_ = dec_b_.clone();
    m.register_params();
    return m;
}

Tensor feature_dropout(const Tensor& features, real rate, Rng& rng) {
    if (rate < 0 || rate >= 1) {
        throw std::invalid_argument("dropout rate must lie in [0,1), got " + fmt_real(rate));
    }
    if (rate == 0) return features;
    Tensor mask = Tensor::zeros(features.shape());
    const real keep_scale = real(1) / (real(1) - rate);
    for (real& v : mask.values()) v = rng.bernoulli(rate) ? real(0) : keep_scale;
    return mul(features, mask);
}

// ---- checkpoints ----

void save_checkpoint(const std::string& path, const SegmenterModel& model) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open checkpoint file for writing: " + path);
    const ModelConfig& c = model.config();
    os << "image_size=" << c.image_size << '\n';
    os << "patch_size=" << c.patch_size << '\n';
    os << "embed_dim=" << c.embed_dim << '\n';
    os << "num_layers=" << c.num_layers << '\n';
    os << "num_heads=" << c.num_heads << '\n';
    os << "mlp_ratio=" << fmt_real(c.mlp_ratio) << '\n';
    os << "num_classes=" << c.num_classes << '\n';
    for (const auto& [name, t] : model.params()) {
        os << "param " << name << '\n';
        dump_tensor(os, t);
    }
    if (!os) throw std::runtime_error("write failure on checkpoint file: " + path);
}

SegmenterModel load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open checkpoint file: " + path);
    ModelConfig cfg;
    std::string line;
    std::streampos record_start = is.tellg();
    while (std::getline(is, line)) {
        if (line.rfind("param ", 0) == 0) break;
        record_start = is.tellg();
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("malformed checkpoint header line: '" + line + "'");
        }
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        try {
            if (key == "image_size") cfg.image_size = std::stoi(value);
            else if (key == "patch_size") cfg.patch_size = std::stoi(value);
            else if (key == "embed_dim") cfg.embed_dim = std::stoi(value);
            else if (key == "num_layers") cfg.num_layers = std::stoi(value);
            else if (key == "num_heads") cfg.num_heads = std::stoi(value);
            else if (key == "mlp_ratio") cfg.mlp_ratio = static_cast<real>(std::stod(value));
            else if (key == "num_classes") cfg.num_classes = std::stoi(value);
            else throw std::runtime_error("unknown checkpoint header key: " + key);
        } catch (const std::invalid_argument&) {
            throw std::runtime_error("bad checkpoint header value for " + key + ": '" + value +
                                     "'");
        }
    }
    // Rewind to the first "param" line and read records from there.
    is.clear();
    is.seekg(record_start);
    Rng scratch(0);
    SegmenterModel model(cfg, scratch);
    std::set<std::string> seen;
    std::string tag, name;
    while (is >> tag) {
        if (tag != "param") throw std::runtime_error("expected 'param' record, got '" + tag + "'");
        if (!(is >> name)) throw std::runtime_error("checkpoint param record missing name");
        Tensor t = parse_tensor(is);
        bool found = false;
        for (const auto& [pname, pt] : model.params()) {
            if (pname != name) continue;
            if (pt.shape() != t.shape()) {
                throw std::runtime_error("checkpoint shape mismatch for " + name + ": file has " +
                                         shape_str(t.shape()) + ", model needs " +
                                         shape_str(pt.shape()));
            }
            Tensor dst = pt;  // handle copy, shares the model's storage
            dst.values() = t.values();
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("checkpoint has unknown param: " + name);
        if (!seen.insert(name).second) {
            throw std::runtime_error("checkpoint repeats param: " + name);
        }
    }
    if (seen.size() != model.params().size()) {
        throw std::runtime_error("checkpoint is missing " +
                                 std::to_string(model.params().size() - seen.size()) +
                                 " parameter records");
    }
    return model;
}

}  // namespace tokenseg
