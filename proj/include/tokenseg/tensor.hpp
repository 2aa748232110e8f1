#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tokenseg {

#ifdef TOKENSEG_REAL32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

// Dense row-major tensor. Handles share storage; ops allocate fresh outputs,
// so recorded graphs never alias. Gradients live next to the data and are
// accumulated by Tape::backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, real value);
    static Tensor from(Shape shape, std::vector<real> values);
    static Tensor scalar(real value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    int dim(int i) const;
    size_t size() const;
    int rows() const;  // 2D views: product of all leading dims
    int cols() const;  // last dim

    real* data();
    const real* data() const;
    std::vector<real>& values();
    const std::vector<real>& values() const;
    real item() const;  // single-element tensors only

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    bool has_grad() const;
    std::vector<real>& grad() const;  // allocates zeros on first touch
    void zero_grad();

    Tensor clone() const;  // deep copy, no tape history

private:
    struct Impl {
        Shape shape;
        std::vector<real> data;
        mutable std::vector<real> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// Wengert list: ops append their backward rules in execution order, which is
// a valid topological order, so one reverse sweep fills every reachable grad.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn);
    void backward(const Tensor& loss);
    size_t size() const { return records_.size(); }

    static Tape* active();

private:
    std::vector<std::function<void()>> records_;
    Tape* prev_;
};

// Suspends recording while alive (teacher inference, evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

// Backward through the active tape; loss must be a single-element tensor.
void backward(const Tensor& loss);

// ---- differentiable ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);            // same shape
Tensor add_rowvec(const Tensor& a, const Tensor& v);     // v broadcast over rows
Tensor mul(const Tensor& a, const Tensor& b);            // elementwise
Tensor scale(const Tensor& a, real c);
Tensor scale_rows(const Tensor& a, const std::vector<real>& w);  // row i times w[i]
Tensor slice_cols(const Tensor& a, int c0, int c1);
// Row i of the result is b's row i where take_b[i] != 0, else a's row i.
// Exact row copies, so mixing and unmixing are bitwise inverses.
Tensor row_select(const Tensor& a, const Tensor& b, const std::vector<uint8_t>& take_b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor softmax(const Tensor& x);                         // along last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps);
Tensor gelu(const Tensor& x);                            // exact erf form
Tensor sum(const Tensor& x);                             // scalar

// Sum of -log softmax(logits)[target] over positions with valid != 0.
// Logits may be any [...xC]; leading dims are flattened to rows.
struct CeSum {
    Tensor value;   // scalar; constant 0 off-tape when count == 0
    long count = 0;
};
CeSum cross_entropy_sum(const Tensor& logits, std::span<const int> targets,
                        std::span<const uint8_t> valid);
// Mean over valid positions; exactly 0 (with zero gradient) when none valid.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> valid);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// [H,W,3] image -> [n_tokens, patch*patch*3] rows, patches in row-major
// order, pixels row-major within each patch, channel innermost.
Tensor extract_patches(const Tensor& image, int patch);
// [n_tokens, C] -> [H,W,C], each token's vector repeated over its patch.
Tensor upsample_tokens(const Tensor& token_logits, int tokens_per_side, int patch);

// ---- debug dump format: "shape: d0 d1 ..." then row-major values ----

void dump_tensor(std::ostream& os, const Tensor& t);
Tensor parse_tensor(std::istream& is);

// Throws if any element is NaN/Inf; ops with exp/log paths call this on
// their outputs so a blow-up is never silent.
void ensure_finite(const Tensor& t, const char* op_name);

}  // namespace tokenseg
