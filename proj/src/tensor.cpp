#include "tokenseg/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace tokenseg {

namespace {

size_t checked_numel(const Shape& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw std::invalid_argument("tensor dimension must be positive, got shape " +
                                        shape_str(shape));
        }
        n *= static_cast<size_t>(d);
    }
    return n;
}

void check_2d(const Tensor& t, const char* who) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(who) + " expects a 2D tensor, got shape " +
                                    shape_str(t.shape()));
    }
}

thread_local Tape* g_active_tape = nullptr;

bool grad_wanted(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape) {
    Tensor t;
    size_t n = checked_numel(shape);
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(n, real(0));
    return t;
}

Tensor Tensor::full(Shape shape, real value) {
    Tensor t = zeros(std::move(shape));
    for (real& v : t.impl_->data) v = value;
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<real> values) {
    size_t n = checked_numel(shape);
    if (n != values.size()) {
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
}

Tensor Tensor::scalar(real value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
size_t Tensor::size() const { return impl_->data.size(); }

int Tensor::rows() const {
    int r = 1;
    for (size_t i = 0; i + 1 < impl_->shape.size(); ++i) r *= impl_->shape[i];
    return r;
}

int Tensor::cols() const {
    if (impl_->shape.empty()) return 1;
    return impl_->shape.back();
}

real* Tensor::data() { return impl_->data.data(); }
const real* Tensor::data() const { return impl_->data.data(); }
std::vector<real>& Tensor::values() { return impl_->data; }
const std::vector<real>& Tensor::values() const { return impl_->data; }

real Tensor::item() const {
    if (size() != 1) {
        throw std::invalid_argument("item() requires a single-element tensor, got shape " +
                                    shape_str(shape()));
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<real>& Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), real(0));
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), real(0));
}

Tensor Tensor::clone() const {
    Tensor t = Tensor::from(impl_->shape, impl_->data);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

// ---- Tape ----

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
    records_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward expects a scalar loss, got shape " +
                                    (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));
    }
    loss.grad()[0] += real(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (tape == nullptr) {
        throw std::logic_error("backward called with no active tape");
    }
    tape->backward(loss);
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

void ensure_finite(const Tensor& t, const char* op_name) {
    for (real v : t.values()) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op_name) + " produced a non-finite value");
        }
    }
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const int m = a.dim(0), k = a.dim(1);
    const int k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    {
        const real* pa = a.data();
        const real* pb = b.data();
        real* pc = out.data();
        for (int i = 0; i < m; ++i) {
            for (int t = 0; t < k; ++t) {
                const real aik = pa[i * k + t];
                if (aik == real(0)) continue;
                const real* brow = pb + t * n;
                real* crow = pc + i * n;
                for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
    }
    if (grad_wanted({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, b, out, m, k, n] {
            if (!out.has_grad()) return;
            const real* go = out.grad().data();
            if (a.requires_grad()) {
                real* ga = a.grad().data();
                const real* pb = b.data();
                for (int i = 0; i < m; ++i) {
                    for (int t = 0; t < k; ++t) {
                        real acc = 0;
                        const real* grow = go + i * n;
                        const real* brow = pb + t * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + t] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                real* gb = b.grad().data();
                const real* pa = a.data();
                for (int i = 0; i < m; ++i) {
                    const real* grow = go + i * n;
                    for (int t = 0; t < k; ++t) {
                        const real ait = pa[i * k + t];
                        if (ait == real(0)) continue;
                        real* gbrow = gb + t * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += ait * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    check_2d(a, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    const real* pa = a.data();
    real* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
    if (grad_wanted({&a})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, out, m, n] {
            if (!out.has_grad() || !a.requires_grad()) return;
            const real* go = out.grad().data();
            real* ga = a.grad().data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.size();
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (grad_wanted({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, b, out, n] {
            if (!out.has_grad()) return;
            const real* go = out.grad().data();
            if (a.requires_grad()) {
                real* ga = a.grad().data();
                for (size_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                real* gb = b.grad().data();
                for (size_t i = 0; i < n; ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    const int cols = a.cols();
    if (v.rank() != 1 || v.dim(0) != cols) {
        throw std::invalid_argument("add_rowvec needs vector of length " + std::to_string(cols) +
                                    ", got shape " + shape_str(v.shape()));
    }
    const int rows = a.rows();
    Tensor out = Tensor::zeros(a.shape());
    const real* pa = a.data();
    const real* pv = v.data();
    real* po = out.data();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) po[i * cols + j] = pa[i * cols + j] + pv[j];
    if (grad_wanted({&a, &v})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, v, out, rows, cols] {
            if (!out.has_grad()) return;
            const real* go = out.grad().data();
            if (a.requires_grad()) {
                real* ga = a.grad().data();
                for (int i = 0; i < rows * cols; ++i) ga[i] += go[i];
            }
            if (v.requires_grad()) {
                real* gv = v.grad().data();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) gv[j] += go[i * cols + j];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.size();
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (grad_wanted({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, b, out, n] {
            if (!out.has_grad()) return;
            const real* go = out.grad().data();
            if (a.requires_grad()) {
                real* ga = a.grad().data();
                const real* pb2 = b.data();
                for (size_t i = 0; i < n; ++i) ga[i] += go[i] * pb2[i];
            }
            if (b.requires_grad()) {
                real* gb = b.grad().data();
                const real* pa2 = a.data();
                for (size_t i = 0; i < n; ++i) gb[i] += go[i] * pa2[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, real c) {
    Tensor out = Tensor::zeros(a.shape());
    const size_t n = a.size();
    const real* pa = a.data();
    real* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (grad_wanted({&a})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, out, c, n] {
            if (!out.has_grad() || !a.requires_grad()) return;
            const real* go = out.grad().data();
            real* ga = a.grad().data();
            for (size_t i = 0; i < n; ++i) ga[i] += go[i] * c;
        });
    }
    return out;
}

Tensor scale_rows(const Tensor& a, const std::vector<real>& w) {
    const int rows = a.rows(), cols = a.cols();
    if (static_cast<int>(w.size()) != rows) {
        throw std::invalid_argument("scale_rows weight length " + std::to_string(w.size()) +
                                    " does not match row count " + std::to_string(rows));
    }
    Tensor out = Tensor::zeros(a.shape());
    const real* pa = a.data();
    real* po = out.data();
    for (int i = 0; i < rows; ++i) {
        const real wi = w[static_cast<size_t>(i)];
        for (int j = 0; j < cols; ++j) po[i * cols + j] = pa[i * cols + j] * wi;
    }
    if (grad_wanted({&a})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, out, w, rows, cols] {
            if (!out.has_grad() || !a.requires_grad()) return;
            const real* go = out.grad().data();
            real* ga = a.grad().data();
            for (int i = 0; i < rows; ++i) {
                const real wi = w[static_cast<size_t>(i)];
                for (int j = 0; j < cols; ++j) ga[i * cols + j] += go[i * cols + j] * wi;
            }
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    check_2d(a, "slice_cols");
    const int rows = a.dim(0), cols = a.dim(1);
    if (c0 < 0 || c1 > cols || c0 >= c1) {
        throw std::invalid_argument("slice_cols range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") invalid for shape " +
                                    shape_str(a.shape()));
    }
    const int width = c1 - c0;
    Tensor out = Tensor::zeros({rows, width});
    const real* pa = a.data();
    real* po = out.data();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < width; ++j) po[i * width + j] = pa[i * cols + c0 + j];
    if (grad_wanted({&a})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, out, rows, cols, c0, width] {
            if (!out.has_grad() || !a.requires_grad()) return;
            const real* go = out.grad().data();
            real* ga = a.grad().data();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < width; ++j) ga[i * cols + c0 + j] += go[i * width + j];
        });
    }
    return out;
}

Tensor row_select(const Tensor& a, const Tensor& b, const std::vector<uint8_t>& take_b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("row_select shape mismatch: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const int rows = a.rows(), cols = a.cols();
    if (static_cast<int>(take_b.size()) != rows) {
        throw std::invalid_argument("row_select mask length " + std::to_string(take_b.size()) +
                                    " does not match row count " + std::to_string(rows));
    }
    Tensor out = Tensor::zeros(a.shape());
    const real* pa = a.data();
    const real* pb = b.data();
    real* po = out.data();
    for (int i = 0; i < rows; ++i) {
        const real* src = take_b[static_cast<size_t>(i)] ? pb : pa;
        for (int j = 0; j < cols; ++j) po[i * cols + j] = src[i * cols + j];
    }
    if (grad_wanted({&a, &b})) {
        out.set_requires_grad(true);
        Tape::active()->record([a, b, out, take_b, rows, cols] {
            if (!out.has_grad()) return;
            const real* go = out.grad().data();
            for (int i = 0; i < rows; ++i) {
                const Tensor& dst = take_b[static_cast<size_t>(i)] ? b : a;
                if (!dst.requires_grad()) continue;
                real* gd = dst.grad().data();
                for (int j = 0; j < cols; ++j) gd[i * cols + j] += go[i * cols + j];
            }
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols needs at least one part");
    const int rows = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        check_2d(p, "concat_cols");
        if (p.dim(0) != rows) {
            throw std::invalid_argument("concat_cols row mismatch: " + shape_str(parts[0].shape()) +
                                        " vs " + shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({rows, total});
    real* po = out.data();
    int off = 0;
    for (const Tensor& p : parts) {
        const int w = p.dim(1);
        const real* pp = p.data();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j) po[i * total + off + j] = pp[i * w + j];
        off += w;
    }
    bool want = false;
    if (Tape::active() != nullptr) {
        for (const Tensor& p : parts) want = want || p.requires_grad();
    }
    if (want) {
        out.set_requires_grad(true);
        Tape::active()->record([parts, out, rows, total] {
            if (!out.has_grad()) return;
            const real* go = out.grad().data();
            int off2 = 0;
            for (const Tensor& p : parts) {
                const int w = p.dim(1);
                if (p.requires_grad()) {
                    real* gp = p.grad().data();
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < w; ++j) gp[i * w + j] += go[i * total + off2 + j];
                }
                off2 += w;
            }
        });
    }
    return out;
}

Tensor softmax(const Tensor& x) {
    const int rows = x.rows(), cols = x.cols();
    if (cols < 1) throw std::invalid_argument("softmax needs a non-empty last axis");
    Tensor out = Tensor::zeros(x.shape());
    const real* px = x.data();
    real* po = out.data();
    for (int i = 0; i < rows; ++i) {
        const real* row = px + static_cast<size_t>(i) * cols;
        real* orow = po + static_cast<size_t>(i) * cols;
        real mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        real denom = 0;
        for (int j = 0; j < cols; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (int j = 0; j < cols; ++j) orow[j] /= denom;
    }
    ensure_finite(out, "softmax");
    if (grad_wanted({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x, out, rows, cols] {
            if (!out.has_grad() || !x.requires_grad()) return;
            const real* go = out.grad().data();
            const real* py = out.data();
            real* gx = x.grad().data();
            for (int i = 0; i < rows; ++i) {
                const real* yrow = py + static_cast<size_t>(i) * cols;
                const real* grow = go + static_cast<size_t>(i) * cols;
                real dot = 0;
                for (int j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
                real* gxrow = gx + static_cast<size_t>(i) * cols;
                for (int j = 0; j < cols; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
    const int cols = x.cols();
    if (gamma.rank() != 1 || gamma.dim(0) != cols || beta.rank() != 1 || beta.dim(0) != cols) {
        throw std::invalid_argument("layer_norm gamma/beta must have shape [" +
                                    std::to_string(cols) + "], got " + shape_str(gamma.shape()) +
                                    " and " + shape_str(beta.shape()));
    }
    if (eps <= 0) throw std::invalid_argument("layer_norm eps must be positive");
    const int rows = x.rows();
    Tensor out = Tensor::zeros(x.shape());
    // x_hat per row is reused by the backward rule.
    auto xhat = std::make_shared<std::vector<real>>(x.size());
    auto inv_sigma = std::make_shared<std::vector<real>>(static_cast<size_t>(rows));
    const real* px = x.data();
    const real* pg = gamma.data();
    const real* pb = beta.data();
    real* po = out.data();
    for (int i = 0; i < rows; ++i) {
        const real* row = px + static_cast<size_t>(i) * cols;
        real mean = 0;
        for (int j = 0; j < cols; ++j) mean += row[j];
        mean /= cols;
        real var = 0;
        for (int j = 0; j < cols; ++j) {
            const real d = row[j] - mean;
            var += d * d;
        }
        var /= cols;
        const real is = real(1) / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<size_t>(i)] = is;
        for (int j = 0; j < cols; ++j) {
            const real xh = (row[j] - mean) * is;
            (*xhat)[static_cast<size_t>(i) * cols + j] = xh;
            po[static_cast<size_t>(i) * cols + j] = pg[j] * xh + pb[j];
        }
    }
    ensure_finite(out, "layer_norm");
    if (grad_wanted({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tape::active()->record([x, gamma, beta, out, xhat, inv_sigma, rows, cols] {
            if (!out.has_grad()) return;
            const real* go = out.grad().data();
            const real* pg2 = gamma.data();
            for (int i = 0; i < rows; ++i) {
                const real* grow = go + static_cast<size_t>(i) * cols;
                const real* xh = xhat->data() + static_cast<size_t>(i) * cols;
                if (x.requires_grad()) {
                    real* gx = x.grad().data() + static_cast<size_t>(i) * cols;
                    const real is = (*inv_sigma)[static_cast<size_t>(i)];
                    real mean_g = 0, mean_gx = 0;
                    for (int j = 0; j < cols; ++j) {
                        const real gj = pg2[j] * grow[j];
                        mean_g += gj;
                        mean_gx += gj * xh[j];
                    }
                    mean_g /= cols;
                    mean_gx /= cols;
                    for (int j = 0; j < cols; ++j) {
                        const real gj = pg2[j] * grow[j];
                        gx[j] += (gj - mean_g - xh[j] * mean_gx) * is;
                    }
                }
                if (gamma.requires_grad()) {
                    real* gg = gamma.grad().data();
                    for (int j = 0; j < cols; ++j) gg[j] += grow[j] * xh[j];
                }
                if (beta.requires_grad()) {
                    real* gb = beta.grad().data();
                    for (int j = 0; j < cols; ++j) gb[j] += grow[j];
                }
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    static const real inv_sqrt2 = real(1) / std::sqrt(real(2));
    static const real inv_sqrt2pi = real(1) / std::sqrt(real(2) * real(M_PI));
    Tensor out = Tensor::zeros(x.shape());
    const size_t n = x.size();
    const real* px = x.data();
    real* po = out.data();
    for (size_t i = 0; i < n; ++i) {
        const real cdf = real(0.5) * (real(1) + std::erf(px[i] * inv_sqrt2));
        po[i] = px[i] * cdf;
    }
    ensure_finite(out, "gelu");
    if (grad_wanted({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x, out, n] {
            if (!out.has_grad() || !x.requires_grad()) return;
            const real* go = out.grad().data();
            const real* px2 = x.data();
            real* gx = x.grad().data();
            for (size_t i = 0; i < n; ++i) {
                const real v = px2[i];
                const real cdf = real(0.5) * (real(1) + std::erf(v * inv_sqrt2));
                const real pdf = std::exp(real(-0.5) * v * v) * inv_sqrt2pi;
                gx[i] += go[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    real acc = 0;
    for (real v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (grad_wanted({&x})) {
        out.set_requires_grad(true);
        Tape::active()->record([x, out] {
            if (!out.has_grad() || !x.requires_grad()) return;
            const real g = out.grad()[0];
            real* gx = x.grad().data();
            const size_t n = x.size();
            for (size_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

CeSum cross_entropy_sum(const Tensor& logits, std::span<const int> targets,
                        std::span<const uint8_t> valid) {
    const int rows = logits.rows(), cols = logits.cols();
    if (static_cast<int>(targets.size()) != rows) {
        throw std::invalid_argument("cross_entropy targets length " +
                                    std::to_string(targets.size()) + " does not match " +
                                    std::to_string(rows) + " rows of " + shape_str(logits.shape()));
    }
    if (static_cast<int>(valid.size()) != rows) {
        throw std::invalid_argument("cross_entropy valid mask length " +
                                    std::to_string(valid.size()) + " does not match " +
                                    std::to_string(rows) + " rows");
    }
    for (int i = 0; i < rows; ++i) {
        if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= cols) {
            throw std::out_of_range("cross_entropy target " +
                                    std::to_string(targets[static_cast<size_t>(i)]) +
                                    " at position " + std::to_string(i) + " outside [0, " +
                                    std::to_string(cols) + ")");
        }
    }
    long count = 0;
    for (int i = 0; i < rows; ++i) count += valid[static_cast<size_t>(i)] ? 1 : 0;
    if (count == 0) return {Tensor::scalar(0), 0};

    auto probs = std::make_shared<std::vector<real>>(logits.size());
    const real* pl = logits.data();
    real acc = 0;
    for (int i = 0; i < rows; ++i) {
        const real* row = pl + static_cast<size_t>(i) * cols;
        real* prow = probs->data() + static_cast<size_t>(i) * cols;
        real mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        real denom = 0;
        for (int j = 0; j < cols; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += prow[j];
        }
        for (int j = 0; j < cols; ++j) prow[j] /= denom;
        if (valid[static_cast<size_t>(i)]) {
            const real lse = mx + std::log(denom);
            acc += lse - row[targets[static_cast<size_t>(i)]];
        }
    }
    Tensor out = Tensor::scalar(acc);
    ensure_finite(out, "cross_entropy");
    if (grad_wanted({&logits})) {
        out.set_requires_grad(true);
        std::vector<int> tcopy(targets.begin(), targets.end());
        std::vector<uint8_t> vcopy(valid.begin(), valid.end());
        Tape::active()->record([logits, out, probs, tcopy, vcopy, rows, cols] {
            if (!out.has_grad() || !logits.requires_grad()) return;
            const real g = out.grad()[0];
            real* gl = logits.grad().data();
            for (int i = 0; i < rows; ++i) {
                if (!vcopy[static_cast<size_t>(i)]) continue;
                const real* prow = probs->data() + static_cast<size_t>(i) * cols;
                real* grow = gl + static_cast<size_t>(i) * cols;
                const int t = tcopy[static_cast<size_t>(i)];
                for (int j = 0; j < cols; ++j) {
                    grow[j] += g * (prow[j] - (j == t ? real(1) : real(0)));
                }
            }
        });
    }
    return {out, count};
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> valid) {
    CeSum s = cross_entropy_sum(logits, targets, valid);
    if (s.count == 0) return s.value;  // constant zero, no gradient by design
    return scale(s.value, real(1) / static_cast<real>(s.count));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    std::vector<uint8_t> valid(targets.size(), uint8_t(1));
    return cross_entropy(logits, targets, valid);
}

Tensor extract_patches(const Tensor& image, int patch) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw std::invalid_argument("extract_patches expects [H,W,3], got " +
                                    shape_str(image.shape()));
    }
    const int h = image.dim(0), w = image.dim(1);
    if (patch <= 0 || h % patch != 0 || w % patch != 0) {
        throw std::invalid_argument("patch size " + std::to_string(patch) +
                                    " must divide image shape " + shape_str(image.shape()));
    }
    const int th = h / patch, tw = w / patch;
    const int pd = patch * patch * 3;
    Tensor out = Tensor::zeros({th * tw, pd});
    const real* pi = image.data();
    real* po = out.data();
    for (int ty = 0; ty < th; ++ty) {
        for (int tx = 0; tx < tw; ++tx) {
            real* row = po + static_cast<size_t>(ty * tw + tx) * pd;
            for (int dy = 0; dy < patch; ++dy) {
                for (int dx = 0; dx < patch; ++dx) {
                    const size_t src = (static_cast<size_t>(ty * patch + dy) * w +
                                        static_cast<size_t>(tx * patch + dx)) * 3;
                    const size_t dst = (static_cast<size_t>(dy) * patch + dx) * 3;
                    row[dst + 0] = pi[src + 0];
                    row[dst + 1] = pi[src + 1];
                    row[dst + 2] = pi[src + 2];
                }
            }
        }
    }
    if (grad_wanted({&image})) {
        out.set_requires_grad(true);
        Tape::active()->record([image, out, patch, th, tw, w, pd] {
            if (!out.has_grad() || !image.requires_grad()) return;
            const real* go = out.grad().data();
            real* gi = image.grad().data();
            for (int ty = 0; ty < th; ++ty) {
                for (int tx = 0; tx < tw; ++tx) {
                    const real* row = go + static_cast<size_t>(ty * tw + tx) * pd;
                    for (int dy = 0; dy < patch; ++dy) {
                        for (int dx = 0; dx < patch; ++dx) {
                            const size_t dst = (static_cast<size_t>(ty * patch + dy) * w +
                                                static_cast<size_t>(tx * patch + dx)) * 3;
                            const size_t src = (static_cast<size_t>(dy) * patch + dx) * 3;
                            gi[dst + 0] += row[src + 0];
                            gi[dst + 1] += row[src + 1];
                            gi[dst + 2] += row[src + 2];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor upsample_tokens(const Tensor& token_logits, int tokens_per_side, int patch) {
    check_2d(token_logits, "upsample_tokens");
    const int n = token_logits.dim(0), c = token_logits.dim(1);
    if (n != tokens_per_side * tokens_per_side) {
        throw std::invalid_argument("upsample_tokens got " + std::to_string(n) + " tokens for a " +
                                    std::to_string(tokens_per_side) + "x" +
                                    std::to_string(tokens_per_side) + " grid");
    }
    const int side = tokens_per_side * patch;
    Tensor out = Tensor::zeros({side, side, c});
    const real* pt = token_logits.data();
    real* po = out.data();
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const int tok = (y / patch) * tokens_per_side + (x / patch);
            const real* row = pt + static_cast<size_t>(tok) * c;
            real* orow = po + (static_cast<size_t>(y) * side + x) * c;
            for (int j = 0; j < c; ++j) orow[j] = row[j];
        }
    }
    if (grad_wanted({&token_logits})) {
        out.set_requires_grad(true);
        Tape::active()->record([token_logits, out, tokens_per_side, patch, side, c] {
            if (!out.has_grad() || !token_logits.requires_grad()) return;
            const real* go = out.grad().data();
            real* gt = token_logits.grad().data();
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side; ++x) {
                    const int tok = (y / patch) * tokens_per_side + (x / patch);
                    const real* grow = go + (static_cast<size_t>(y) * side + x) * c;
                    real* trow = gt + static_cast<size_t>(tok) * c;
                    for (int j = 0; j < c; ++j) trow[j] += grow[j];
                }
            }
        });
    }
    return out;
}

// ---- dump format ----

void dump_tensor(std::ostream& os, const Tensor& t) {
    os << "shape:";
    for (int d : t.shape()) os << ' ' << d;
    os << '\n';
    char buf[64];
    const int cols = t.cols();
    const size_t n = t.size();
    for (size_t i = 0; i < n; ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(t.data()[i]));
        os << buf;
        os << (((i + 1) % static_cast<size_t>(cols) == 0) ? '\n' : ' ');
    }
}

Tensor parse_tensor(std::istream& is) {
    std::string tag;
    is >> tag;
    if (tag != "shape:") {
        throw std::runtime_error("tensor dump must start with 'shape:', got '" + tag + "'");
    }
    std::string line;
    std::getline(is, line);
    std::istringstream hdr(line);
    Shape shape;
    int d;
    while (hdr >> d) shape.push_back(d);
    if (shape.empty()) throw std::runtime_error("tensor dump header has no dimensions");
    size_t n = checked_numel(shape);
    std::vector<real> values(n);
    for (size_t i = 0; i < n; ++i) {
        double v;
        if (!(is >> v)) {
            throw std::runtime_error("tensor dump ended after " + std::to_string(i) + " of " +
                                     std::to_string(n) + " values");
        }
        values[i] = static_cast<real>(v);
    }
    return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace tokenseg
