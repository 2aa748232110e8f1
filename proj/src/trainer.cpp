#include "tokenseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace tokenseg {

BranchDesign branch_design(const std::string& name) {
    const BranchFlags tm{true, false};
    const BranchFlags tm_do{true, true};
    const BranchFlags do_only{false, true};
    if (name == "D1") return {tm, tm};
    if (name == "D2") return {tm, do_only};
    if (name == "D3") return {tm_do, tm_do};
    if (name == "D4") return {tm_do, tm};
    throw std::invalid_argument("train.branch must be one of D1|D2|D3|D4 (got '" + name + "')");
}

MixBaseline mix_baseline(const std::string& name) {
    if (name == "none") return MixBaseline::none;
    if (name == "cutmix") return MixBaseline::cutmix;
    if (name == "classmix") return MixBaseline::classmix;
    if (name == "tokenmix_star") return MixBaseline::tokenmix_star;
    if (name == "tokenmix") return MixBaseline::tokenmix;
    throw std::invalid_argument(
        "aug.baseline must be one of none|cutmix|classmix|tokenmix_star|tokenmix (got '" + name +
        "')");
}

std::string mix_baseline_name(MixBaseline b) {
    switch (b) {
        case MixBaseline::none: return "none";
        case MixBaseline::cutmix: return "cutmix";
        case MixBaseline::classmix: return "classmix";
        case MixBaseline::tokenmix_star: return "tokenmix_star";
        case MixBaseline::tokenmix: return "tokenmix";
    }
    throw std::logic_error("unreachable mix baseline");
}

void TrainConfig::validate() const {
    if (!(lr0 > 0)) throw std::invalid_argument("train.lr0 must be positive");
    if (!(sgd_momentum >= 0 && sgd_momentum < 1)) {
        throw std::invalid_argument("train.sgd_momentum must be in [0,1)");
    }
    if (!(poly_power > 0)) throw std::invalid_argument("train.poly_power must be positive");
    if (epochs < 1) throw std::invalid_argument("train.epochs must be at least 1");
    if (batch_labeled < 1) throw std::invalid_argument("train.batch_labeled must be at least 1");
    if (batch_unlabeled < 1) {
        throw std::invalid_argument("train.batch_unlabeled must be at least 1");
    }
    branch_design(branch);
    if (!(theta >= 0 && theta <= 1)) throw std::invalid_argument("train.theta must be in [0,1]");
    if (!(rho >= 0 && rho <= 1)) throw std::invalid_argument("train.rho must be in [0,1]");
}

void AugConfig::validate() const {
    if (!(swap_ratio >= 0 && swap_ratio <= 1)) {
        throw std::invalid_argument("aug.swap_ratio must be in [0,1]");
    }
    if (!(dropout_rate >= 0 && dropout_rate < 1)) {
        throw std::invalid_argument("aug.dropout_rate must be in [0,1)");
    }
    if (star_block < 1) throw std::invalid_argument("aug.star_block must be at least 1");
    mix_baseline(baseline);
}

std::string metrics_line(const StepMetrics& m) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "step=%ld l_sup=%.17g l_unsup1=%.17g l_unsup2=%.17g gate_frac=%.17g lr=%.17g "
                  "theta=%.17g rho=%.17g",
                  m.step, static_cast<double>(m.l_sup), static_cast<double>(m.l_unsup1),
                  static_cast<double>(m.l_unsup2), static_cast<double>(m.gate_frac),
                  static_cast<double>(m.lr), static_cast<double>(m.theta),
                  static_cast<double>(m.rho));
    return buf;
}

real poly_lr(real lr0, long iter, long total_iters, real power) {
    if (total_iters < 1) throw std::invalid_argument("poly_lr needs total_iters >= 1");
    if (iter < 0) throw std::invalid_argument("poly_lr needs iter >= 0");
    if (iter > total_iters) {
        throw std::invalid_argument("poly_lr iter " + std::to_string(iter) +
                                    " exceeds schedule length " + std::to_string(total_iters));
    }
    const real frac = real(1) - static_cast<real>(iter) / static_cast<real>(total_iters);
    return lr0 * std::pow(frac, power);
}

void sgd_momentum_step(const std::vector<std::pair<std::string, Tensor>>& params,
                       std::vector<std::vector<real>>& velocity, real lr, real momentum) {
    if (velocity.size() != params.size()) {
        throw std::invalid_argument("velocity list does not match the parameter registry");
    }
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor p = params[k].second;
        std::vector<real>& v = velocity[k];
        if (v.size() != p.size()) {
            throw std::invalid_argument("velocity size mismatch on parameter " + params[k].first);
        }
        const std::vector<real>* g = p.has_grad() ? &p.grad() : nullptr;
        real* pd = p.data();
        for (size_t j = 0; j < v.size(); ++j) {
            v[j] = momentum * v[j] + (g ? (*g)[j] : real(0));
            pd[j] -= lr * v[j];
        }
    }
}

void ema_update(SegmenterModel& teacher, const SegmenterModel& student, real theta) {
    const auto& tp = teacher.params();
    const auto& sp = student.params();
    if (tp.size() != sp.size()) {
        throw std::invalid_argument("teacher/student parameter registries differ in size");
    }
    for (size_t k = 0; k < tp.size(); ++k) {
        if (tp[k].first != sp[k].first) {
            throw std::invalid_argument("teacher/student registry mismatch at " + tp[k].first);
        }
        Tensor t = tp[k].second;
        const Tensor& s = sp[k].second;
        if (t.size() != s.size()) {
            throw std::invalid_argument("teacher/student shape mismatch at " + tp[k].first);
        }
        real* td = t.data();
        const real* sd = s.data();
        for (size_t j = 0; j < t.size(); ++j) {
            td[j] = theta * td[j] + (real(1) - theta) * sd[j];
        }
    }
}

PseudoLabels pseudo_from_logits(const Tensor& logits) {
    if (!logits.defined() || logits.rank() < 1) {
        throw std::invalid_argument("pseudo_from_logits needs a defined logits tensor");
    }
    const int cols = logits.cols();
    const int rows = logits.rows();
    if (cols < 2) throw std::invalid_argument("pseudo_from_logits needs at least 2 classes");
    PseudoLabels out;
    out.classes.resize(static_cast<size_t>(rows));
    out.conf.resize(static_cast<size_t>(rows));
    const real* d = logits.data();
    for (int r = 0; r < rows; ++r) {
        const real* row = d + static_cast<size_t>(r) * cols;
        int best = 0;
        for (int j = 1; j < cols; ++j) {
            if (row[j] > row[best]) best = j;  // ties keep the lowest index
        }
        real denom = 0;
        for (int j = 0; j < cols; ++j) denom += std::exp(row[j] - row[best]);
        out.classes[static_cast<size_t>(r)] = best;
        out.conf[static_cast<size_t>(r)] = real(1) / denom;
    }
    return out;
}

std::vector<int> replicate_labeled(int set_size, int target_count) {
    if (set_size < 1) throw std::invalid_argument("replicate_labeled needs a non-empty set");
    if (target_count < 0) throw std::invalid_argument("replicate_labeled target must be >= 0");
    std::vector<int> out(static_cast<size_t>(target_count));
    for (int i = 0; i < target_count; ++i) out[static_cast<size_t>(i)] = i % set_size;
    return out;
}

Tensor dual_branch_loss(const Tensor& b1, const Tensor& b2) {
    return scale(add(b1, b2), real(0.5));
}

IouReport evaluate_model(const SegmenterModel& model, const std::vector<Scene>& val_set) {
    NoGradGuard guard;
    auto predict = [&model](const Scene& scene) {
        return pseudo_from_logits(model.forward(scene.image)).classes;
    };
    return evaluate(predict, val_set, model.config().num_classes);
}

namespace {

SegmenterModel make_student(const ModelConfig& mc, uint64_t seed) {
    Rng rng = Rng::stream(seed, "init");
    return SegmenterModel(mc, rng);
}

void check_scene_set(const std::vector<Scene>& set, const ModelConfig& mc, bool need_labels,
                     const char* which) {
    for (const Scene& s : set) {
        if (s.size != mc.image_size) {
            throw std::invalid_argument(std::string(which) + " scene size " +
                                        std::to_string(s.size) + " does not match model.image_size " +
                                        std::to_string(mc.image_size));
        }
        if (!need_labels) continue;
        if (s.label.size() != static_cast<size_t>(s.size) * s.size) {
            throw std::invalid_argument(std::string(which) + " scene is missing labels");
        }
        for (int v : s.label) {
            if (v < 0 || v >= mc.num_classes) {
                throw std::invalid_argument(std::string(which) + " scene has class " +
                                            std::to_string(v) + " outside model.num_classes");
            }
        }
    }
}

}  // namespace

Trainer::Trainer(const ModelConfig& mc, const TrainConfig& tc, const AugConfig& ac,
                 std::vector<Scene> labeled, std::vector<Scene> unlabeled,
                 bool swap_branch_streams)
    : mc_(mc),
      tc_(tc),
      ac_(ac),
      design_(branch_design(tc.branch)),
      student_(make_student(mc, tc.seed)),
      teacher_(student_.clone()),
      labeled_(std::move(labeled)),
      unlabeled_(std::move(unlabeled)),
      rng_weak_l_(Rng::stream(tc.seed, "weak_labeled")),
      rng_weak_u_(Rng::stream(tc.seed, "weak_unlabeled")),
      rng_branch_{Rng::stream(tc.seed, swap_branch_streams ? "branch1" : "branch0"),
                  Rng::stream(tc.seed, swap_branch_streams ? "branch0" : "branch1")},
      rng_shuffle_l_(Rng::stream(tc.seed, "shuffle_labeled")),
      rng_shuffle_u_(Rng::stream(tc.seed, "shuffle_unlabeled")) {
    mc_.validate();
    tc_.validate();
    ac_.validate();
    if (labeled_.empty()) throw std::invalid_argument("training needs labeled scenes");
    if (!tc_.sup_only && unlabeled_.empty()) {
        throw std::invalid_argument("semi-supervised training needs unlabeled scenes");
    }
    check_scene_set(labeled_, mc_, true, "labeled");
    check_scene_set(unlabeled_, mc_, false, "unlabeled");
    student_.set_requires_grad(true);
    teacher_.set_requires_grad(false);
    velocity_.reserve(student_.params().size());
    for (const auto& [name, p] : student_.params()) {
        velocity_.emplace_back(p.size(), real(0));
    }
}

long Trainer::steps_per_epoch() const {
    if (!unlabeled_.empty()) {
        const long spe = static_cast<long>(unlabeled_.size()) / tc_.batch_unlabeled;
        if (spe < 1) {
            throw std::invalid_argument("unlabeled set smaller than train.batch_unlabeled");
        }
        return spe;
    }
    return std::max<long>(1, static_cast<long>(labeled_.size()) / tc_.batch_labeled);
}

long Trainer::total_iters() const { return static_cast<long>(tc_.epochs) * steps_per_epoch(); }

Tensor Trainer::mixed_token_forward(const Tensor& strong_u, const Tensor& donor,
                                    const TokenMask& mask, bool use_dropout, Rng& rng) {
    Tensor g_u = student_.patch_embed(strong_u);
    Tensor g_l = student_.patch_embed(donor);
    auto [ex_u, ex_l] = token_exchange(g_u, g_l, mask);
    Tensor f_u = student_.encode(ex_u);
    Tensor f_l = student_.encode(ex_l);
    Tensor features = token_swap_back(f_u, f_l, mask);
    if (use_dropout) features = feature_dropout(features, ac_.dropout_rate, rng);
    return student_.decode(features);
}

std::pair<Tensor, long> Trainer::branch_loss(const std::vector<Tensor>& weak_u,
                                             const std::vector<Tensor>& weak_l,
                                             const std::vector<PseudoLabels>& pseudo,
                                             const BranchFlags& flags, Rng& rng) {
    const int n_u = static_cast<int>(weak_u.size());
    const int n_l = static_cast<int>(weak_l.size());
    const MixBaseline base = mix_baseline(ac_.baseline);
    const size_t n_px = static_cast<size_t>(mc_.image_size) * mc_.image_size;

    // Strong views for the whole batch first, one parameter draw per item,
    // so the per-item mixing draws below sit at fixed stream positions.
    std::vector<Tensor> strong(weak_u.begin(), weak_u.end());
    if (ac_.strong) {
        for (int i = 0; i < n_u; ++i) strong[static_cast<size_t>(i)] = strong_augment(weak_u[static_cast<size_t>(i)], rng);
    }

    auto gate = [&](const std::vector<real>& conf) {
        std::vector<uint8_t> valid(conf.size());
        for (size_t j = 0; j < conf.size(); ++j) valid[j] = conf[j] > tc_.rho ? 1 : 0;
        return valid;
    };

    Tensor total;
    long count = 0;
    for (int i = 0; i < n_u; ++i) {
        const size_t si = static_cast<size_t>(i);
        Tensor logits;
        std::vector<int> targets;
        std::vector<uint8_t> valid;
        const bool mixing = flags.use_tokenmix && base != MixBaseline::none;
        if (!mixing) {
            logits = student_.forward(strong[si], flags.use_dropout ? ac_.dropout_rate : real(0),
                                      rng);
            targets = pseudo[si].classes;
            valid = gate(pseudo[si].conf);
        } else if (base == MixBaseline::tokenmix || base == MixBaseline::tokenmix_star) {
            const TokenMask mask =
                base == MixBaseline::tokenmix
                    ? gen_token_mask(mc_.n_tokens(), ac_.swap_ratio, rng)
                    : tokenmix_star_mask(mc_.tokens_per_side(), ac_.star_block, ac_.swap_ratio,
                                         rng);
            const Tensor& donor = weak_l[static_cast<size_t>(i % n_l)];
            logits = mixed_token_forward(strong[si], donor, mask, flags.use_dropout, rng);
            targets = pseudo[si].classes;
            valid = gate(pseudo[si].conf);
        } else {
            const size_t sp = static_cast<size_t>((i + 1) % n_u);
            std::vector<real> conf(n_px);
            if (base == MixBaseline::cutmix) {
                const CutMixBox box = draw_cutmix_box(mc_.image_size, mc_.image_size, rng);
                auto [img, lab] = apply_cutmix(strong[si], pseudo[si].classes, strong[sp],
                                               pseudo[sp].classes, box);
                conf = pseudo[si].conf;
                for (int y = box.y0; y < box.y0 + box.h; ++y) {
                    for (int x = box.x0; x < box.x0 + box.w; ++x) {
                        const size_t px = static_cast<size_t>(y) * mc_.image_size + x;
                        conf[px] = pseudo[sp].conf[px];
                    }
                }
                targets = std::move(lab);
                logits = student_.forward(img, flags.use_dropout ? ac_.dropout_rate : real(0),
                                          rng);
            } else {  // classmix
                const std::vector<int> classes = draw_classmix_classes(pseudo[sp].classes, rng);
                auto [img, lab] = apply_classmix(strong[si], pseudo[si].classes, strong[sp],
                                                 pseudo[sp].classes, classes);
                for (size_t px = 0; px < n_px; ++px) {
                    const bool pasted = std::find(classes.begin(), classes.end(),
                                                  pseudo[sp].classes[px]) != classes.end();
                    conf[px] = pasted ? pseudo[sp].conf[px] : pseudo[si].conf[px];
                }
                targets = std::move(lab);
                logits = student_.forward(img, flags.use_dropout ? ac_.dropout_rate : real(0),
                                          rng);
            }
            valid = gate(conf);
        }
        CeSum ce = cross_entropy_sum(logits, targets, valid);
        if (ce.count > 0) {
            total = total.defined() ? add(total, ce.value) : ce.value;
            count += ce.count;
        }
    }
    if (count == 0) return {Tensor::scalar(0), 0};
    return {scale(total, real(1) / static_cast<real>(count)), count};
}

StepMetrics Trainer::train_step(const std::vector<int>& labeled_idx,
                                const std::vector<int>& unlabeled_idx) {
    if (labeled_idx.empty()) throw std::invalid_argument("train_step needs labeled indices");
    for (int i : labeled_idx) {
        if (i < 0 || i >= static_cast<int>(labeled_.size())) {
            throw std::out_of_range("labeled index " + std::to_string(i) + " out of range");
        }
    }
    if (!tc_.sup_only) {
        if (unlabeled_idx.empty()) {
            throw std::invalid_argument("train_step needs unlabeled indices in semi mode");
        }
        for (int i : unlabeled_idx) {
            if (i < 0 || i >= static_cast<int>(unlabeled_.size())) {
                throw std::out_of_range("unlabeled index " + std::to_string(i) + " out of range");
            }
        }
    }

    // The teacher tracks the pre-step student, so the update runs first.
    if (!tc_.sup_only) ema_update(teacher_, student_, tc_.theta);

    Tape tape;
    StepMetrics m;
    m.step = step_ + 1;
    m.theta = tc_.theta;
    m.rho = tc_.rho;
    const size_t n_px = static_cast<size_t>(mc_.image_size) * mc_.image_size;

    // Supervised stream: weak views, dropout-free forward, mean CE.
    Tensor sup_total;
    long sup_count = 0;
    const std::vector<uint8_t> all_valid(n_px, 1);
    for (int li : labeled_idx) {
        const Scene& scene = labeled_[static_cast<size_t>(li)];
        Tensor img = scene.image;
        std::vector<int> lab = scene.label;
        if (ac_.weak) {
            const WeakAugParams p = draw_weak_params(rng_weak_l_);
            auto pair = apply_weak(scene.image, scene.label, p);
            img = std::move(pair.first);
            lab = std::move(pair.second);
        }
        Tensor logits = student_.forward(img);
        CeSum ce = cross_entropy_sum(logits, lab, all_valid);
        sup_total = sup_total.defined() ? add(sup_total, ce.value) : ce.value;
        sup_count += ce.count;
    }
    Tensor l_sup = scale(sup_total, real(1) / static_cast<real>(sup_count));
    m.l_sup = l_sup.item();

    Tensor loss = l_sup;
    if (!tc_.sup_only) {
        // Weak views of the unlabeled batch feed the teacher.
        std::vector<Tensor> weak_u;
        weak_u.reserve(unlabeled_idx.size());
        for (int ui : unlabeled_idx) {
            const Scene& scene = unlabeled_[static_cast<size_t>(ui)];
            if (ac_.weak) {
                weak_u.push_back(apply_weak(scene.image, draw_weak_params(rng_weak_u_)));
            } else {
                weak_u.push_back(scene.image);
            }
        }
        std::vector<Tensor> weak_l;
        weak_l.reserve(labeled_idx.size());
        for (int li : labeled_idx) {
            // Donor views reuse the supervised stream's augmented geometry
            // only in distribution; they get their own draws so disabling
            // the unsupervised path never shifts the supervised stream.
            const Scene& scene = labeled_[static_cast<size_t>(li)];
            if (ac_.weak) {
                weak_l.push_back(apply_weak(scene.image, draw_weak_params(rng_weak_u_)));
            } else {
                weak_l.push_back(scene.image);
            }
        }

        std::vector<PseudoLabels> pseudo;
        pseudo.reserve(weak_u.size());
        {
            NoGradGuard guard;
            for (const Tensor& img : weak_u) {
                pseudo.push_back(pseudo_from_logits(teacher_.forward(img)));
            }
        }
        long admitted = 0;
        for (const PseudoLabels& p : pseudo) {
            for (real c : p.conf) admitted += c > tc_.rho ? 1 : 0;
        }
        m.gate_frac = static_cast<real>(admitted) /
                      static_cast<real>(n_px * pseudo.size());

        auto [b1, c1] = branch_loss(weak_u, weak_l, pseudo, design_.b1, rng_branch_[0]);
        auto [b2, c2] = branch_loss(weak_u, weak_l, pseudo, design_.b2, rng_branch_[1]);
        m.l_unsup1 = b1.item();
        m.l_unsup2 = b2.item();
        loss = add(l_sup, dual_branch_loss(b1, b2));
    }

    if (!std::isfinite(static_cast<double>(loss.item()))) {
        std::string msg = "non-finite loss at step " + std::to_string(m.step) +
                          "; recent metrics:";
        const size_t from = history_.size() > 10 ? history_.size() - 10 : 0;
        for (size_t k = from; k < history_.size(); ++k) msg += "\n" + metrics_line(history_[k]);
        throw std::runtime_error(msg);
    }

    student_.zero_grad();
    tape.backward(loss);
    m.lr = poly_lr(tc_.lr0, step_, total_iters(), tc_.poly_power);
    sgd_momentum_step(student_.params(), velocity_, m.lr, tc_.sgd_momentum);

    ++step_;
    history_.push_back(m);
    return m;
}

void Trainer::run_epoch() {
    const long spe = steps_per_epoch();
    const int b_l = tc_.batch_labeled;
    const int b_u = tc_.batch_unlabeled;
    std::vector<int> lab =
        replicate_labeled(static_cast<int>(labeled_.size()), static_cast<int>(spe) * b_l);
    rng_shuffle_l_.shuffle(lab);
    std::vector<int> unl(unlabeled_.size());
    std::iota(unl.begin(), unl.end(), 0);
    if (!unl.empty()) rng_shuffle_u_.shuffle(unl);
    for (long s = 0; s < spe; ++s) {
        std::vector<int> li(lab.begin() + s * b_l, lab.begin() + (s + 1) * b_l);
        std::vector<int> ui;
        if (!unl.empty()) {
            ui.assign(unl.begin() + s * b_u, unl.begin() + (s + 1) * b_u);
        }
        train_step(li, ui);
    }
}

std::vector<std::vector<real>> Trainer::student_snapshot() const {
    std::vector<std::vector<real>> snap;
    snap.reserve(student_.params().size());
    for (const auto& [name, p] : student_.params()) snap.push_back(p.values());
    return snap;
}

}  // namespace tokenseg
