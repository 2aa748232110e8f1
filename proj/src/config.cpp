#include "tokenseg/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tokenseg {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* expected) {
    throw std::invalid_argument("config key '" + key + "' expects " + expected + " (got '" +
                                value + "')");
}

long long parse_int(const std::string& key, const std::string& value) {
    if (value.empty()) bad_value(key, value, "an integer");
    errno = 0;
    char* end = nullptr;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (errno != 0 || end != value.c_str() + value.size()) bad_value(key, value, "an integer");
    return v;
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    if (value.empty() || value[0] == '-') bad_value(key, value, "a non-negative integer");
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
    if (errno != 0 || end != value.c_str() + value.size()) {
        bad_value(key, value, "a non-negative integer");
    }
    return static_cast<uint64_t>(v);
}

real parse_real(const std::string& key, const std::string& value) {
    if (value.empty()) bad_value(key, value, "a real number");
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (errno != 0 || end != value.c_str() + value.size()) bad_value(key, value, "a real number");
    return static_cast<real>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    bad_value(key, value, "true or false");
}

std::string fmt_real(real v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(v));
    return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    train.validate();
    data.validate();
    aug.validate();
    if (output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::istringstream is(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        std::string line = raw;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        " is not key=value: '" + trim(raw) + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        " has an empty key");
        }
        if (!seen.insert(key).second) {
            throw std::invalid_argument("duplicate config key '" + key + "'");
        }

        if (key == "model.image_size") cfg.model.image_size = static_cast<int>(parse_int(key, value));
        else if (key == "model.patch_size") cfg.model.patch_size = static_cast<int>(parse_int(key, value));
        else if (key == "model.embed_dim") cfg.model.embed_dim = static_cast<int>(parse_int(key, value));
        else if (key == "model.num_layers") cfg.model.num_layers = static_cast<int>(parse_int(key, value));
        else if (key == "model.num_heads") cfg.model.num_heads = static_cast<int>(parse_int(key, value));
        else if (key == "model.mlp_ratio") cfg.model.mlp_ratio = parse_real(key, value);
        else if (key == "model.num_classes") cfg.model.num_classes = static_cast<int>(parse_int(key, value));
        else if (key == "train.lr0") cfg.train.lr0 = parse_real(key, value);
        else if (key == "train.sgd_momentum") cfg.train.sgd_momentum = parse_real(key, value);
        else if (key == "train.poly_power") cfg.train.poly_power = parse_real(key, value);
        else if (key == "train.epochs") cfg.train.epochs = static_cast<int>(parse_int(key, value));
        else if (key == "train.batch_labeled") cfg.train.batch_labeled = static_cast<int>(parse_int(key, value));
        else if (key == "train.batch_unlabeled") cfg.train.batch_unlabeled = static_cast<int>(parse_int(key, value));
        else if (key == "train.branch") cfg.train.branch = value;
        else if (key == "train.theta") cfg.train.theta = parse_real(key, value);
        else if (key == "train.rho") cfg.train.rho = parse_real(key, value);
        else if (key == "train.mode") {
            if (value == "semi") cfg.train.sup_only = false;
            else if (value == "sup_only") cfg.train.sup_only = true;
            else bad_value(key, value, "semi or sup_only");
        }
        else if (key == "train.seed") cfg.train.seed = parse_u64(key, value);
        else if (key == "data.n_labeled") cfg.data.n_labeled = static_cast<int>(parse_int(key, value));
        else if (key == "data.n_unlabeled") cfg.data.n_unlabeled = static_cast<int>(parse_int(key, value));
        else if (key == "data.n_val") cfg.data.n_val = static_cast<int>(parse_int(key, value));
        else if (key == "data.seed") cfg.data.seed = parse_u64(key, value);
        else if (key == "aug.swap_ratio") cfg.aug.swap_ratio = parse_real(key, value);
        else if (key == "aug.dropout_rate") cfg.aug.dropout_rate = parse_real(key, value);
        else if (key == "aug.star_block") cfg.aug.star_block = static_cast<int>(parse_int(key, value));
        else if (key == "aug.weak") cfg.aug.weak = parse_bool(key, value);
        else if (key == "aug.strong") cfg.aug.strong = parse_bool(key, value);
        else if (key == "aug.baseline") cfg.aug.baseline = value;
        else if (key == "output_dir") {
            if (value.empty()) bad_value(key, value, "a directory path");
            cfg.output_dir = value;
        }
        else throw std::invalid_argument("unknown config key '" + key + "'");
    }
    if (!seen.count("train.seed")) throw std::invalid_argument("config is missing train.seed");
    if (!seen.count("data.seed")) throw std::invalid_argument("config is missing data.seed");
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "model.image_size=" << cfg.model.image_size << '\n';
    os << "model.patch_size=" << cfg.model.patch_size << '\n';
    os << "model.embed_dim=" << cfg.model.embed_dim << '\n';
    os << "model.num_layers=" << cfg.model.num_layers << '\n';
    os << "model.num_heads=" << cfg.model.num_heads << '\n';
    os << "model.mlp_ratio=" << fmt_real(cfg.model.mlp_ratio) << '\n';
    os << "model.num_classes=" << cfg.model.num_classes << '\n';
    os << "train.lr0=" << fmt_real(cfg.train.lr0) << '\n';
    os << "train.sgd_momentum=" << fmt_real(cfg.train.sgd_momentum) << '\n';
    os << "train.poly_power=" << fmt_real(cfg.train.poly_power) << '\n';
    os << "train.epochs=" << cfg.train.epochs << '\n';
    os << "train.batch_labeled=" << cfg.train.batch_labeled << '\n';
    os << "train.batch_unlabeled=" << cfg.train.batch_unlabeled << '\n';
    os << "train.branch=" << cfg.train.branch << '\n';
    os << "train.theta=" << fmt_real(cfg.train.theta) << '\n';
    os << "train.rho=" << fmt_real(cfg.train.rho) << '\n';
    os << "train.mode=" << (cfg.train.sup_only ? "sup_only" : "semi") << '\n';
    os << "train.seed=" << cfg.train.seed << '\n';
    os << "data.n_labeled=" << cfg.data.n_labeled << '\n';
    os << "data.n_unlabeled=" << cfg.data.n_unlabeled << '\n';
    os << "data.n_val=" << cfg.data.n_val << '\n';
    os << "data.seed=" << cfg.data.seed << '\n';
    os << "aug.swap_ratio=" << fmt_real(cfg.aug.swap_ratio) << '\n';
    os << "aug.dropout_rate=" << fmt_real(cfg.aug.dropout_rate) << '\n';
    os << "aug.star_block=" << cfg.aug.star_block << '\n';
    os << "aug.weak=" << (cfg.aug.weak ? "true" : "false") << '\n';
    os << "aug.strong=" << (cfg.aug.strong ? "true" : "false") << '\n';
    os << "aug.baseline=" << cfg.aug.baseline << '\n';
    os << "output_dir=" << cfg.output_dir << '\n';
    return os.str();
}

}  // namespace tokenseg
