#include "tokenseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tokenseg/model.hpp"
#include "tokenseg/rng.hpp"

namespace tokenseg {

GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                           real h) {
    if (leaves.empty()) throw std::invalid_argument("grad_check needs at least one leaf");
    for (const Tensor& t : leaves) {
        Tensor leaf = t;
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
    }
    std::vector<std::vector<real>> analytic;
    analytic.reserve(leaves.size());
    for (const Tensor& t : leaves) analytic.push_back(t.grad());

    GradCheckResult result;
    NoGradGuard guard;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        for (size_t j = 0; j < leaf.size(); ++j) {
            const real orig = leaf.values()[j];
            leaf.values()[j] = orig + h;
            const real fp = f().item();
            leaf.values()[j] = orig - h;
            const real fm = f().item();
            leaf.values()[j] = orig;
            const real numeric = (fp - fm) / (2 * h);
            const real a = analytic[li][j];
            const real denom = std::max({std::fabs(a), std::fabs(numeric), real(1e-3)});
            const real rel = std::fabs(a - numeric) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst = "leaf " + std::to_string(li) + "[" + std::to_string(j) + "]";
            }
        }
    }
    return result;
}

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, real scale = real(1)) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (real& v : t.values()) v = rng.normal() * scale;
    return t;
}

// sum(op_output * probe) turns any output into a scalar with non-uniform
// output gradients.
Tensor probe_sum(const Tensor& out, const Tensor& probe) { return sum(mul(out, probe)); }

struct Case {
    std::string name;
    std::function<real(Rng&, real)> worst_err;  // one seeded trial at step h
};

std::vector<Case> build_cases() {
    std::vector<Case> cases;

    cases.push_back({"matmul", [](Rng& r, real h) {
        Tensor a = rand_tensor({3, 4}, r), b = rand_tensor({4, 2}, r);
        Tensor probe = rand_tensor({3, 2}, r);
        return grad_check([&] { return probe_sum(matmul(a, b), probe); }, {a, b}, h).max_rel_err;
    }});
    cases.push_back({"transpose", [](Rng& r, real h) {
        Tensor a = rand_tensor({3, 5}, r);
        Tensor probe = rand_tensor({5, 3}, r);
        return grad_check([&] { return probe_sum(transpose(a), probe); }, {a}, h).max_rel_err;
    }});
    cases.push_back({"add", [](Rng& r, real h) {
        Tensor a = rand_tensor({4, 3}, r), b = rand_tensor({4, 3}, r);
        Tensor probe = rand_tensor({4, 3}, r);
        return grad_check([&] { return probe_sum(add(a, b), probe); }, {a, b}, h).max_rel_err;
    }});
    cases.push_back({"add_rowvec", [](Rng& r, real h) {
        Tensor a = rand_tensor({5, 4}, r), v = rand_tensor({4}, r);
        Tensor probe = rand_tensor({5, 4}, r);
        return grad_check([&] { return probe_sum(add_rowvec(a, v), probe); }, {a, v}, h)
            .max_rel_err;
    }});
    cases.push_back({"mul", [](Rng& r, real h) {
        Tensor a = rand_tensor({3, 4}, r), b = rand_tensor({3, 4}, r);
        Tensor probe = rand_tensor({3, 4}, r);
        return grad_check([&] { return probe_sum(mul(a, b), probe); }, {a, b}, h).max_rel_err;
    }});
    cases.push_back({"scale", [](Rng& r, real h) {
        Tensor a = rand_tensor({3, 4}, r);
        Tensor probe = rand_tensor({3, 4}, r);
        return grad_check([&] { return probe_sum(scale(a, real(1.7)), probe); }, {a}, h)
            .max_rel_err;
    }});
    cases.push_back({"scale_rows", [](Rng& r, real h) {
        Tensor a = rand_tensor({4, 3}, r);
        std::vector<real> w(4);
        for (real& x : w) x = r.normal();
        Tensor probe = rand_tensor({4, 3}, r);
        return grad_check([&] { return probe_sum(scale_rows(a, w), probe); }, {a}, h).max_rel_err;
    }});
    cases.push_back({"slice_cols", [](Rng& r, real h) {
        Tensor a = rand_tensor({3, 6}, r);
        Tensor probe = rand_tensor({3, 3}, r);
        return grad_check([&] { return probe_sum(slice_cols(a, 1, 4), probe); }, {a}, h)
            .max_rel_err;
    }});
    cases.push_back({"concat_cols", [](Rng& r, real h) {
        Tensor a = rand_tensor({3, 2}, r), b = rand_tensor({3, 3}, r), c = rand_tensor({3, 1}, r);
        Tensor probe = rand_tensor({3, 6}, r);
        return grad_check([&] { return probe_sum(concat_cols({a, b, c}), probe); }, {a, b, c}, h)
            .max_rel_err;
    }});
    cases.push_back({"row_select", [](Rng& r, real h) {
        Tensor a = rand_tensor({5, 3}, r), b = rand_tensor({5, 3}, r);
        std::vector<uint8_t> take(5);
        for (auto& m : take) m = r.bernoulli(real(0.5)) ? 1 : 0;
        Tensor probe = rand_tensor({5, 3}, r);
        return grad_check([&] { return probe_sum(row_select(a, b, take), probe); }, {a, b}, h)
            .max_rel_err;
    }});
    cases.push_back({"softmax", [](Rng& r, real h) {
        Tensor x = rand_tensor({4, 5}, r);
        Tensor probe = rand_tensor({4, 5}, r);
        return grad_check([&] { return probe_sum(softmax(x), probe); }, {x}, h).max_rel_err;
    }});
    cases.push_back({"layer_norm", [](Rng& r, real h) {
        Tensor x = rand_tensor({4, 6}, r);
        Tensor gamma = Tensor::zeros({6}), beta = rand_tensor({6}, r);
        for (real& g : gamma.values()) g = r.uniform(real(0.5), real(1.5));
        Tensor probe = rand_tensor({4, 6}, r);
        return grad_check(
                   [&] { return probe_sum(layer_norm(x, gamma, beta, real(1e-5)), probe); },
                   {x, gamma, beta}, h)
            .max_rel_err;
    }});
    cases.push_back({"gelu", [](Rng& r, real h) {
        Tensor x = rand_tensor({3, 4}, r);
        Tensor probe = rand_tensor({3, 4}, r);
        return grad_check([&] { return probe_sum(gelu(x), probe); }, {x}, h).max_rel_err;
    }});
    cases.push_back({"sum", [](Rng& r, real h) {
        Tensor x = rand_tensor({4, 3}, r);
        return grad_check([&] { return sum(x); }, {x}, h).max_rel_err;
    }});
    cases.push_back({"cross_entropy", [](Rng& r, real h) {
        Tensor logits = rand_tensor({6, 4}, r);
        std::vector<int> targets(6);
        std::vector<uint8_t> valid(6);
        for (int& t : targets) t = r.uniform_int(0, 3);
        for (auto& v : valid) v = r.bernoulli(real(0.6)) ? 1 : 0;
        valid[0] = 1;
        return grad_check([&] { return cross_entropy(logits, targets, valid); }, {logits}, h)
            .max_rel_err;
    }});
    cases.push_back({"cross_entropy_sum", [](Rng& r, real h) {
        Tensor logits = rand_tensor({5, 3}, r);
        std::vector<int> targets(5);
        std::vector<uint8_t> valid(5, 1);
        for (int& t : targets) t = r.uniform_int(0, 2);
        return grad_check([&] { return cross_entropy_sum(logits, targets, valid).value; },
                          {logits}, h)
            .max_rel_err;
    }});
    cases.push_back({"extract_patches", [](Rng& r, real h) {
        Tensor image = rand_tensor({6, 6, 3}, r);
        Tensor probe = rand_tensor({4, 27}, r);
        return grad_check([&] { return probe_sum(extract_patches(image, 3), probe); }, {image}, h)
            .max_rel_err;
    }});
    cases.push_back({"upsample_tokens", [](Rng& r, real h) {
        Tensor toks = rand_tensor({4, 3}, r);
        Tensor probe = rand_tensor({4, 4, 3}, r);
        return grad_check([&] { return probe_sum(upsample_tokens(toks, 2, 2), probe); }, {toks}, h)
            .max_rel_err;
    }});

    const ModelConfig toy{8, 4, 8, 1, 2, real(2), 2};

    cases.push_back({"composed_model", [toy](Rng& r, real h) {
        SegmenterModel model(toy, r);
        Tensor image = rand_tensor({8, 8, 3}, r, real(0.5));
        std::vector<int> targets(64);
        for (int& t : targets) t = r.uniform_int(0, toy.num_classes - 1);
        std::vector<Tensor> leaves;
        for (const auto& [name, t] : model.params()) leaves.push_back(t);
        leaves.push_back(image);
        return grad_check([&] { return cross_entropy(model.forward(image), targets); }, leaves, h)
            .max_rel_err;
    }});
    cases.push_back({"composed_tokenmix", [toy](Rng& r, real h) {
        SegmenterModel model(toy, r);
        Tensor img_u = rand_tensor({8, 8, 3}, r, real(0.5));
        Tensor img_l = rand_tensor({8, 8, 3}, r, real(0.5));
        std::vector<uint8_t> mask(static_cast<size_t>(toy.n_tokens()));
        for (auto& m : mask) m = r.bernoulli(real(0.5)) ? 1 : 0;
        std::vector<int> targets(64);
        for (int& t : targets) t = r.uniform_int(0, toy.num_classes - 1);
        std::vector<Tensor> leaves;
        for (const auto& [name, t] : model.params()) leaves.push_back(t);
        leaves.push_back(img_u);
        leaves.push_back(img_l);
        return grad_check(
                   [&] {
                       Tensor gu = model.patch_embed(img_u);
                       Tensor gl = model.patch_embed(img_l);
                       Tensor gu2 = row_select(gu, gl, mask);
                       Tensor gl2 = row_select(gl, gu, mask);
                       Tensor fu = model.encode(gu2);
                       Tensor fl = model.encode(gl2);
                       Tensor f = row_select(fu, fl, mask);
                       return cross_entropy(model.decode(f), targets);
                   },
                   leaves, h)
            .max_rel_err;
    }});

    return cases;
}

}  // namespace

std::vector<FdCase> run_fd_suite(const std::vector<uint64_t>& seeds, real tol, real h) {
    if (seeds.empty()) throw std::invalid_argument("run_fd_suite needs at least one seed");
    std::vector<Case> cases = build_cases();
    std::vector<FdCase> out;
    out.reserve(cases.size());
    for (const Case& c : cases) {
        FdCase fc;
        fc.name = c.name;
        for (uint64_t seed : seeds) {
            Rng r = Rng::stream(seed, c.name);
            fc.max_rel_err = std::max(fc.max_rel_err, c.worst_err(r, h));
        }
        fc.pass = fc.max_rel_err <= tol;
        out.push_back(std::move(fc));
    }
    return out;
}

}  // namespace tokenseg
