#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tokenseg/augment.hpp"
#include "tokenseg/data.hpp"
#include "tokenseg/model.hpp"
#include "tokenseg/rng.hpp"
#include "tokenseg/tensor.hpp"

namespace tokenseg {

struct BranchFlags {
    bool use_tokenmix = false;
    bool use_dropout = false;
};

struct BranchDesign {
    BranchFlags b1, b2;
};

// D1 = (TM,-)x2; D2 = (TM,-)+(-,DO); D3 = (TM,DO)x2; D4 = (TM,DO)+(TM,-).
BranchDesign branch_design(const std::string& name);

enum class MixBaseline { none, cutmix, classmix, tokenmix_star, tokenmix };
MixBaseline mix_baseline(const std::string& name);
std::string mix_baseline_name(MixBaseline b);

struct TrainConfig {
    real lr0 = real(0.1);
    real sgd_momentum = real(0.0001);
    real poly_power = real(0.9);
    int epochs = 20;
    int batch_labeled = 2;
    int batch_unlabeled = 2;
    std::string branch = "D3";
    real theta = real(0.999);  // EMA decay
    real rho = real(0.95);     // confidence threshold
    bool sup_only = false;
    uint64_t seed = 0;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

struct AugConfig {
    real swap_ratio = real(0.5);
    real dropout_rate = real(0.1);
    int star_block = 2;        // block side for the tokenmix_star ablation
    bool weak = true;          // geometric jitter on/off
    bool strong = true;        // photometric jitter on/off
    std::string baseline = "tokenmix";

    void validate() const;
    bool operator==(const AugConfig&) const = default;
};

struct StepMetrics {
    long step = 0;
    real l_sup = 0;
    real l_unsup1 = 0;
    real l_unsup2 = 0;
    real gate_frac = 0;
    real lr = 0;
    real theta = 0;
    real rho = 0;
};

std::string metrics_line(const StepMetrics& m);  // fixed key order, %.17g

// Poly schedule: lr0 * (1 - iter/total)^power.
real poly_lr(real lr0, long iter, long total_iters, real power);

// v' = momentum*v + g; p' = p - lr*v'. Velocity index-aligned with params.
void sgd_momentum_step(const std::vector<std::pair<std::string, Tensor>>& params,
                       std::vector<std::vector<real>>& velocity, real lr, real momentum);

// t' = theta*t + (1-theta)*s, elementwise over the registries.
void ema_update(SegmenterModel& teacher, const SegmenterModel& student, real theta);

// Per-pixel argmax class and max softmax probability; ties go to the lowest
// class index.
struct PseudoLabels {
    std::vector<int> classes;  // H*W
    std::vector<real> conf;    // H*W
};
PseudoLabels pseudo_from_logits(const Tensor& logits);

// Cyclic repetition of indices 0..set_size-1, length target_count.
std::vector<int> replicate_labeled(int set_size, int target_count);

// 0.5 * (b1 + b2): both branch losses weighted equally.
Tensor dual_branch_loss(const Tensor& b1, const Tensor& b2);

// Dropout-free argmax inference over a labeled scene list.
IouReport evaluate_model(const SegmenterModel& model, const std::vector<Scene>& val_set);

// The teacher-student dual-branch loop. All randomness is drawn from named
// streams derived from cfg.seed, so disabling one consumer never shifts
// another's draws (this is what makes the rho=1 trajectory coincide with
// the sup-only trainer bitwise).
class Trainer {
public:
    // swap_branch_streams exchanges the two branch RNG streams; with a
    // symmetric design that must only swap the branch roles.
    Trainer(const ModelConfig& mc, const TrainConfig& tc, const AugConfig& ac,
            std::vector<Scene> labeled, std::vector<Scene> unlabeled,
            bool swap_branch_streams = false);

    // One optimizer step on the given batch indices.
    StepMetrics train_step(const std::vector<int>& labeled_idx,
                           const std::vector<int>& unlabeled_idx);

    // One epoch of the shuffled schedule (steps_per_epoch() steps).
    void run_epoch();
    long steps_per_epoch() const;
    long total_iters() const;
    long step_count() const { return step_; }

    SegmenterModel& student() { return student_; }
    const SegmenterModel& student() const { return student_; }
    SegmenterModel& teacher() { return teacher_; }
    const SegmenterModel& teacher() const { return teacher_; }

    const TrainConfig& train_config() const { return tc_; }
    const std::vector<StepMetrics>& history() const { return history_; }

    // Snapshot of student parameter values (for EMA audits).
    std::vector<std::vector<real>> student_snapshot() const;

private:
    Tensor mixed_token_forward(const Tensor& strong_u, const Tensor& donor, const TokenMask& mask,
                               bool use_dropout, Rng& rng);
    std::pair<Tensor, long> branch_loss(const std::vector<Tensor>& weak_u,
                                        const std::vector<Tensor>& weak_l,
                                        const std::vector<PseudoLabels>& pseudo,
                                        const BranchFlags& flags, Rng& rng);

    ModelConfig mc_;
    TrainConfig tc_;
    AugConfig ac_;
    BranchDesign design_;
    SegmenterModel student_, teacher_;
    std::vector<std::vector<real>> velocity_;
    std::vector<Scene> labeled_, unlabeled_;
    Rng rng_weak_l_, rng_weak_u_, rng_branch_[2], rng_shuffle_l_, rng_shuffle_u_;
    long step_ = 0;
    std::vector<StepMetrics> history_;
};

}  // namespace tokenseg
