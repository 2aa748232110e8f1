#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "tokenseg/data.hpp"
#include "tokenseg/trainer.hpp"

using namespace tokenseg;

namespace {

ModelConfig micro_model() {
    ModelConfig mc;
    mc.image_size = 16;
    mc.patch_size = 4;
    mc.embed_dim = 8;
    mc.num_layers = 1;
    mc.num_heads = 2;
    mc.mlp_ratio = real(2);
    mc.num_classes = 3;
    return mc;
}

TrainConfig micro_train() {
    TrainConfig tc;
    tc.lr0 = real(0.05);
    tc.epochs = 20;
    tc.batch_labeled = 1;
    tc.batch_unlabeled = 2;
    tc.branch = "D3";
    tc.theta = real(0.9);
    tc.rho = real(0.5);
    tc.seed = 1;
    return tc;
}

Splits micro_splits(uint64_t seed = 5) {
    SplitSpec spec;
    spec.n_labeled = 2;
    spec.n_unlabeled = 4;
    spec.n_val = 2;
    spec.seed = seed;
    return make_splits(spec, 16, 3);
}

bool snapshots_equal(const std::vector<std::vector<real>>& a,
                     const std::vector<std::vector<real>>& b) {
    if (a.size() != b.size()) return false;
    for (size_t k = 0; k < a.size(); ++k) {
        if (a[k] != b[k]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("branch designs map to the documented flag pairs") {
    const BranchDesign d1 = branch_design("D1");
    CHECK(d1.b1.use_tokenmix);
    CHECK_FALSE(d1.b1.use_dropout);
    CHECK(d1.b2.use_tokenmix);
    CHECK_FALSE(d1.b2.use_dropout);
    const BranchDesign d2 = branch_design("D2");
    CHECK(d2.b1.use_tokenmix);
    CHECK_FALSE(d2.b1.use_dropout);
    CHECK_FALSE(d2.b2.use_tokenmix);
    CHECK(d2.b2.use_dropout);
    const BranchDesign d3 = branch_design("D3");
    CHECK(d3.b1.use_tokenmix);
    CHECK(d3.b1.use_dropout);
    CHECK(d3.b2.use_tokenmix);
    CHECK(d3.b2.use_dropout);
    const BranchDesign d4 = branch_design("D4");
    CHECK(d4.b1.use_tokenmix);
    CHECK(d4.b1.use_dropout);
    CHECK(d4.b2.use_tokenmix);
    CHECK_FALSE(d4.b2.use_dropout);
    CHECK_THROWS_AS(branch_design("D5"), std::invalid_argument);
}

TEST_CASE("mix baselines round-trip their names") {
    for (const char* name : {"none", "cutmix", "classmix", "tokenmix_star", "tokenmix"}) {
        CHECK(mix_baseline_name(mix_baseline(name)) == name);
    }
    CHECK_THROWS_AS(mix_baseline("mixup"), std::invalid_argument);
}

TEST_CASE("poly_lr endpoints, linear midpoint, and schedule bound") {
    CHECK(poly_lr(real(0.1), 0, 100, real(0.9)) == real(0.1));
    CHECK(poly_lr(real(0.1), 100, 100, real(0.9)) == real(0));
    CHECK(std::abs(poly_lr(real(0.1), 50, 100, real(1)) - real(0.05)) <= real(1e-15));
    real prev = poly_lr(real(0.1), 0, 10, real(0.9));
    for (long i = 1; i <= 10; ++i) {
        const real cur = poly_lr(real(0.1), i, 10, real(0.9));
        CHECK(cur <= prev);
        prev = cur;
    }
    CHECK_THROWS_AS(poly_lr(real(0.1), 101, 100, real(0.9)), std::invalid_argument);
}

TEST_CASE("sgd_momentum_step follows the velocity recursion") {
    auto make_param = [] {
        Tensor p = Tensor::from({2}, {1, 1}).set_requires_grad(true);
        p.grad() = {1, 2};
        return std::vector<std::pair<std::string, Tensor>>{{"p", p}};
    };

    // momentum 0 is vanilla SGD.
    auto params = make_param();
    std::vector<std::vector<real>> vel = {{0, 0}};
    sgd_momentum_step(params, vel, real(0.1), real(0));
    CHECK(params[0].second.values() == std::vector<real>{real(0.9), real(0.8)});

    // lr 0 leaves params alone but still accumulates velocity.
    params = make_param();
    vel = {{0, 0}};
    sgd_momentum_step(params, vel, real(0), real(0.5));
    CHECK(params[0].second.values() == std::vector<real>{1, 1});
    CHECK(vel[0] == std::vector<real>{1, 2});

    // Two steps with constant gradient: v2 = m*g + g, p2 = p0 - lr*(v1+v2).
    params = make_param();
    vel = {{0, 0}};
    sgd_momentum_step(params, vel, real(0.1), real(0.5));
    sgd_momentum_step(params, vel, real(0.1), real(0.5));
    CHECK(std::abs(params[0].second.values()[0] - (1 - real(0.1) * (1 + real(1.5)))) <=
          real(1e-15));
    CHECK(vel[0][0] == real(1.5));
}

TEST_CASE("ema_update applies the decay recursion") {
    Rng r1(1), r2(2);
    const ModelConfig mc = micro_model();
    SegmenterModel student(mc, r1);
    SegmenterModel teacher(mc, r2);
    const real t0 = teacher.params()[0].second.values()[0];
    const real s0 = student.params()[0].second.values()[0];
    ema_update(teacher, student, real(0.9));
    const real t1 = teacher.params()[0].second.values()[0];
    CHECK(t1 == real(0.9) * t0 + (real(1) - real(0.9)) * s0);
    ema_update(teacher, student, real(0.9));
    CHECK(teacher.params()[0].second.values()[0] == real(0.9) * t1 + (real(1) - real(0.9)) * s0);
}

TEST_CASE("pseudo labels take the argmax with lowest-index ties and exact confidence") {
    Tensor logits = Tensor::zeros({2, 2, 4});  // uniform everywhere
    const PseudoLabels p = pseudo_from_logits(logits);
    REQUIRE(p.classes.size() == 4);
    for (int c : p.classes) CHECK(c == 0);
    for (real conf : p.conf) CHECK(conf == real(0.25));  // exactly 1/C

    Tensor two = Tensor::from({1, 4}, {1, 3, 3, 0});
    CHECK(pseudo_from_logits(two).classes[0] == 1);  // tie between 1 and 2

    // Argmax is invariant to positive rescaling and constant shifts.
    Tensor base = Tensor::from({2, 3}, {0.2, -1.0, 0.9, 4.0, 4.5, -2.0});
    Tensor moved = base.clone();
    for (real& v : moved.values()) v = real(2.5) * v + real(7);
    CHECK(pseudo_from_logits(base).classes == pseudo_from_logits(moved).classes);
}

TEST_CASE("replicate_labeled cycles with floor/ceil counts") {
    CHECK(replicate_labeled(4, 8) == std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3});
    CHECK(replicate_labeled(3, 3) == std::vector<int>{0, 1, 2});
    const std::vector<int> r = replicate_labeled(3, 8);
    std::vector<int> counts(3, 0);
    for (int i : r) ++counts[i];
    CHECK(counts == std::vector<int>{3, 3, 2});
    CHECK_THROWS_AS(replicate_labeled(0, 4), std::invalid_argument);
}

TEST_CASE("dual_branch_loss averages the two branches") {
    CHECK(dual_branch_loss(Tensor::scalar(0), Tensor::scalar(0)).item() == real(0));
    CHECK(dual_branch_loss(Tensor::scalar(2), Tensor::scalar(4)).item() == real(3));
    CHECK(dual_branch_loss(Tensor::scalar(real(0.3)), Tensor::scalar(real(0.5))).item() ==
          (real(0.3) + real(0.5)) * real(0.5));
}

TEST_CASE("trainer construction wires teacher to the student init") {
    const Splits splits = micro_splits();
    Trainer trainer(micro_model(), micro_train(), AugConfig{}, splits.labeled, splits.unlabeled);
    const auto& sp = trainer.student().params();
    const auto& tp = trainer.teacher().params();
    REQUIRE(sp.size() == tp.size());
    for (size_t k = 0; k < sp.size(); ++k) {
        CHECK(sp[k].second.values() == tp[k].second.values());
        CHECK(sp[k].second.requires_grad());
        CHECK_FALSE(tp[k].second.requires_grad());
    }
    CHECK_THROWS_AS(
        Trainer(micro_model(), micro_train(), AugConfig{}, splits.labeled, {}),
        std::invalid_argument);
}

TEST_CASE("train_step emits sane metrics and validates indices") {
    const Splits splits = micro_splits();
    const TrainConfig tc = micro_train();
    Trainer trainer(micro_model(), tc, AugConfig{}, splits.labeled, splits.unlabeled);
    const StepMetrics m = trainer.train_step({0}, {0, 1});
    CHECK(m.step == 1);
    CHECK(m.l_sup > 0);
    CHECK(m.gate_frac >= 0);
    CHECK(m.gate_frac <= 1);
    CHECK(m.lr == tc.lr0);  // poly schedule starts at lr0
    CHECK(m.theta == tc.theta);
    CHECK(m.rho == tc.rho);
    const StepMetrics m2 = trainer.train_step({1}, {2, 3});
    CHECK(m2.step == 2);
    CHECK(m2.lr < m.lr);
    CHECK(trainer.history().size() == 2);
    CHECK_THROWS_AS(trainer.train_step({}, {0}), std::invalid_argument);
    CHECK_THROWS_AS(trainer.train_step({5}, {0}), std::out_of_range);
    CHECK_THROWS_AS(trainer.train_step({0}, {}), std::invalid_argument);
    CHECK_THROWS_AS(trainer.train_step({0}, {9}), std::out_of_range);
}

TEST_CASE("the confidence gate closes fully at rho=1 and opens fully at rho=0") {
    const Splits splits = micro_splits();
    TrainConfig open = micro_train();
    open.rho = 0;
    Trainer a(micro_model(), open, AugConfig{}, splits.labeled, splits.unlabeled);
    const StepMetrics ma = a.train_step({0}, {0, 1});
    CHECK(ma.gate_frac == real(1));
    CHECK(ma.l_unsup1 > 0);

    TrainConfig closed = micro_train();
    closed.rho = 1;
    Trainer b(micro_model(), closed, AugConfig{}, splits.labeled, splits.unlabeled);
    const StepMetrics mb = b.train_step({0}, {0, 1});
    CHECK(mb.gate_frac == real(0));
    CHECK(mb.l_unsup1 == real(0));
    CHECK(mb.l_unsup2 == real(0));
}

TEST_CASE("rho=1 training is bitwise identical to the supervised-only trainer") {
    const Splits splits = micro_splits(11);
    TrainConfig semi = micro_train();
    semi.rho = 1;
    TrainConfig sup = micro_train();
    sup.sup_only = true;
    Trainer a(micro_model(), semi, AugConfig{}, splits.labeled, splits.unlabeled);
    Trainer b(micro_model(), sup, AugConfig{}, splits.labeled, splits.unlabeled);
    for (int step = 0; step < 10; ++step) {
        const std::vector<int> li = {step % 2};
        const std::vector<int> ui = {step % 4, (step + 1) % 4};
        const StepMetrics ma = a.train_step(li, ui);
        const StepMetrics mb = b.train_step(li, ui);
        CHECK(ma.l_sup == mb.l_sup);
        REQUIRE(snapshots_equal(a.student_snapshot(), b.student_snapshot()));
    }
}

TEST_CASE("with no mixing, no dropout, and an open gate the branch loss is plain CE") {
    SplitSpec spec;
    spec.n_labeled = 1;
    spec.n_unlabeled = 1;
    spec.n_val = 1;
    spec.seed = 21;
    const Splits splits = make_splits(spec, 16, 3);

    TrainConfig tc = micro_train();
    tc.branch = "D1";  // no dropout in either branch
    tc.rho = 0;
    tc.batch_labeled = 1;
    tc.batch_unlabeled = 1;
    AugConfig ac;
    ac.weak = false;
    ac.strong = false;
    ac.dropout_rate = 0;
    ac.baseline = "none";
    Trainer trainer(micro_model(), tc, ac, splits.labeled, splits.unlabeled);

    real expected;
    {
        NoGradGuard guard;
        const Tensor img = splits.unlabeled[0].image;
        const PseudoLabels p = pseudo_from_logits(trainer.teacher().forward(img));
        expected = cross_entropy(trainer.student().forward(img), p.classes).item();
    }
    const StepMetrics m = trainer.train_step({0}, {0});
    CHECK(std::abs(m.l_unsup1 - expected) <= real(1e-9));
    CHECK(std::abs(m.l_unsup2 - expected) <= real(1e-9));
}

TEST_CASE("teacher parameters never accumulate gradients") {
    const Splits splits = micro_splits();
    Trainer trainer(micro_model(), micro_train(), AugConfig{}, splits.labeled, splits.unlabeled);
    trainer.train_step({0}, {0, 1});
    for (const auto& [name, p] : trainer.teacher().params()) {
        CHECK_FALSE(p.has_grad());
    }
}

TEST_CASE("the teacher replays the EMA recursion over student snapshots") {
    const Splits splits = micro_splits(13);
    const TrainConfig tc = micro_train();
    Trainer trainer(micro_model(), tc, AugConfig{}, splits.labeled, splits.unlabeled);
    std::vector<std::vector<real>> replay = trainer.student_snapshot();  // teacher init
    for (int step = 0; step < 5; ++step) {
        const std::vector<std::vector<real>> pre = trainer.student_snapshot();
        trainer.train_step({step % 2}, {step % 4, (step + 1) % 4});
        for (size_t k = 0; k < replay.size(); ++k) {
            for (size_t j = 0; j < replay[k].size(); ++j) {
                replay[k][j] = tc.theta * replay[k][j] + (1 - tc.theta) * pre[k][j];
            }
        }
    }
    std::vector<std::vector<real>> teacher_now;
    for (const auto& [name, p] : trainer.teacher().params()) teacher_now.push_back(p.values());
    REQUIRE(snapshots_equal(replay, teacher_now));
}

TEST_CASE("swapping branch rng streams swaps the branch losses of D3") {
    const Splits splits = micro_splits(17);
    const TrainConfig tc = micro_train();
    Trainer normal(micro_model(), tc, AugConfig{}, splits.labeled, splits.unlabeled, false);
    Trainer swapped(micro_model(), tc, AugConfig{}, splits.labeled, splits.unlabeled, true);
    const StepMetrics mn = normal.train_step({0}, {0, 1});
    const StepMetrics ms = swapped.train_step({0}, {0, 1});
    CHECK(mn.l_sup == ms.l_sup);
    CHECK(mn.l_unsup1 == ms.l_unsup2);
    CHECK(mn.l_unsup2 == ms.l_unsup1);
}

TEST_CASE("run_epoch consumes the schedule") {
    const Splits splits = micro_splits();
    TrainConfig tc = micro_train();
    tc.epochs = 2;
    Trainer trainer(micro_model(), tc, AugConfig{}, splits.labeled, splits.unlabeled);
    CHECK(trainer.steps_per_epoch() == 2);  // 4 unlabeled / batch 2
    CHECK(trainer.total_iters() == 4);
    trainer.run_epoch();
    CHECK(trainer.step_count() == 2);
    trainer.run_epoch();
    CHECK(trainer.step_count() == 4);
    const auto& h = trainer.history();
    for (size_t k = 0; k < h.size(); ++k) CHECK(h[k].step == static_cast<long>(k) + 1);
}

TEST_CASE("steps_per_epoch falls back to the labeled set without unlabeled data") {
    const Splits splits = micro_splits();
    TrainConfig tc = micro_train();
    tc.sup_only = true;
    tc.batch_labeled = 1;
    Trainer trainer(micro_model(), tc, AugConfig{}, splits.labeled, {});
    CHECK(trainer.steps_per_epoch() == 2);  // 2 labeled / batch 1
}

TEST_CASE("metrics_line prints every key in order") {
    StepMetrics m;
    m.step = 3;
    m.l_sup = real(1.5);
    m.lr = real(0.25);
    const std::string line = metrics_line(m);
    CHECK(line.find("step=3 ") == 0);
    const char* keys[] = {"l_sup=", "l_unsup1=", "l_unsup2=", "gate_frac=", "lr=", "theta=",
                          "rho="};
    size_t pos = 0;
    for (const char* key : keys) {
        const size_t at = line.find(key);
        CHECK(at != std::string::npos);
        CHECK(at > pos);
        pos = at;
    }
    CHECK(line.find("l_sup=1.5 ") != std::string::npos);
}

TEST_CASE("evaluate_model scores a labeled scene list") {
    const Splits splits = micro_splits();
    Trainer trainer(micro_model(), micro_train(), AugConfig{}, splits.labeled, splits.unlabeled);
    const IouReport r = evaluate_model(trainer.student(), splits.val);
    CHECK(r.miou >= real(0));
    CHECK(r.miou <= real(1));
    CHECK(r.per_class.size() == 3);
}
